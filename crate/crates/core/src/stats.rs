//! Token frequency statistics over a reference corpus and Zipf diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, EncodedCorpus, TokenId};
use crate::error::{Error, Result};
use crate::io::{header_fields, header_value, read_text, write_text};

/// Which quantity `freq(t)` refers to when computing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqMode {
    Counts,
    #[default]
    Probabilities,
}

impl FreqMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FreqMode::Counts => "counts",
            FreqMode::Probabilities => "probabilities",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "counts" => Some(FreqMode::Counts),
            "probabilities" => Some(FreqMode::Probabilities),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    counts: Vec<u64>,
    total: u64,
    probs: Option<Vec<f64>>,
}

impl FreqTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FreqTable {
            counts,
            total,
            probs: None,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn mode(&self) -> FreqMode {
        if self.probs.is_some() {
            FreqMode::Probabilities
        } else {
            FreqMode::Counts
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        self.probs.as_deref()
    }

    /// `freq(t)` in the table's mode: the raw count or the probability.
    pub fn freq(&self, id: TokenId) -> f64 {
        match &self.probs {
            Some(p) => p[id],
            None => self.counts[id] as f64,
        }
    }

    /// Returns a probabilities-mode copy; counts are kept.
    pub fn normalize(&self) -> Result<FreqTable> {
        if self.total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let total = self.total as f64;
        let probs = self.counts.iter().map(|&c| c as f64 / total).collect();
        Ok(FreqTable {
            counts: self.counts.clone(),
            total: self.total,
            probs: Some(probs),
        })
    }

    /// Switches to `mode`, normalizing if needed.
    pub fn with_mode(&self, mode: FreqMode) -> Result<FreqTable> {
        match mode {
            FreqMode::Probabilities => self.normalize(),
            FreqMode::Counts => Ok(FreqTable::from_counts(self.counts.clone())),
        }
    }

    /// Elementwise sum of two count tables, for merging shards.
    pub fn merge(&self, other: &FreqTable) -> Result<FreqTable> {
        if self.len() != other.len() {
            return Err(Error::Data(format!(
                "cannot merge tables of size {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(FreqTable::from_counts(
            self.counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, "")
    }

    /// Writes the table; `provenance` is appended verbatim to the header line.
    pub fn save_with_provenance(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = format!(
            "#freqtable v1 vocab_size={} total={}",
            self.len(),
            self.total
        );
        if !provenance.is_empty() {
            out.push(' ');
            out.push_str(provenance);
        }
        out.push('\n');
        for (id, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{id}\t{c}\n"));
        }
        write_text(path, &out)
    }

    /// Loads a counts-mode table, checking size, total and nonnegativity.
    pub fn load(path: &Path) -> Result<FreqTable> {
        let text = read_text(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        if !header.starts_with("#freqtable v1") {
            return Err(Error::parse(path, 1, "missing `#freqtable v1` header"));
        }
        let fields = header_fields(header);
        let vocab_size: usize = header_value(&fields, "vocab_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "missing or bad vocab_size"))?;
        let total: u64 = header_value(&fields, "total")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "missing or bad total"))?;

        let mut counts = Vec::with_capacity(vocab_size);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let (id, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>count`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad id {id:?}")))?;
            if id != i {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("id {id} out of order, expected {i}"),
                ));
            }
            if count.starts_with('-') {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("negative count {count}"),
                ));
            }
            let count: u64 = count
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad count {count:?}")))?;
            counts.push(count);
        }
        if counts.len() != vocab_size {
            return Err(Error::parse(
                path,
                counts.len() + 1,
                format!("expected {vocab_size} rows, found {}", counts.len()),
            ));
        }
        let table = FreqTable::from_counts(counts);
        if table.total != total {
            return Err(Error::parse(
                path,
                1,
                format!("declared total {total} but counts sum to {}", table.total),
            ));
        }
        Ok(table)
    }
}

/// Tallies every id occurrence, BOS/EOS included.
pub fn count_frequencies(corpus: &EncodedCorpus, vocab_size: usize) -> Result<FreqTable> {
    let mut counts = vec![0u64; vocab_size];
    for (s, seq) in corpus.sequences.iter().enumerate() {
        for (p, &id) in seq.iter().enumerate() {
            let slot = counts.get_mut(id).ok_or_else(|| {
                Error::Data(format!(
                    "sequence {s} position {p}: id {id} >= vocab size {vocab_size}"
                ))
            })?;
            *slot += 1;
        }
    }
    Ok(FreqTable::from_counts(counts))
}

/// `I(w) = -ln P(w)` in nats.
pub fn self_information(table: &FreqTable, id: TokenId) -> Result<f64> {
    let probs = table.probs().ok_or_else(|| {
        Error::config(
            "freq_mode",
            "self-information needs a probabilities-mode table",
        )
    })?;
    let p = *probs
        .get(id)
        .ok_or_else(|| Error::Data(format!("id {id} >= table size {}", probs.len())))?;
    if p <= 0.0 {
        return Err(Error::UndefinedInformation { id });
    }
    Ok(-p.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub ranks_used: usize,
}

/// Least-squares line through `(ln rank, ln count)` for ordinary tokens with
/// nonzero count, ranked by descending count from 1.
pub fn fit_zipf(table: &FreqTable) -> Result<ZipfFit> {
    let mut counts: Vec<u64> = table
        .counts()
        .iter()
        .enumerate()
        .filter(|&(id, &c)| !is_special(id) && c > 0)
        .map(|(_, &c)| c)
        .collect();
    if counts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "Zipf fit needs at least 2 nonzero ordinary tokens, found {}",
            counts.len()
        )));
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    fit_rank_frequency(&freqs)
}

/// Least-squares fit of `ln f` against `ln rank` for positive frequencies
/// already sorted in descending order.
pub fn fit_rank_frequency(sorted_freqs: &[f64]) -> Result<ZipfFit> {
    if sorted_freqs.len() < 2 {
        return Err(Error::InsufficientData(
            "rank-frequency fit needs at least 2 points".into(),
        ));
    }
    let n = sorted_freqs.len() as f64;
    let xs: Vec<f64> = (1..=sorted_freqs.len()).map(|r| (r as f64).ln()).collect();
    let ys: Vec<f64> = sorted_freqs.iter().map(|f| f.ln()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 {
        // Flat curve: the fitted line is exact.
        1.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(ZipfFit {
        slope,
        intercept,
        r_squared,
        ranks_used: sorted_freqs.len(),
    })
}

/// Total-variation distance between two distributions of equal length.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
