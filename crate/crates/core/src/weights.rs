//! Power-law token weights `w(t) = (freq(t) + ε)^(-α)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, header_fields, header_value, read_text, write_text};
use crate::stats::{FreqMode, FreqTable};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    pub mean_normalized: bool,
    /// Cap applied to raw weights. `None` uses the weight of a token seen
    /// once: `(1 + ε)^(-α)` for counts, `(1/total + ε)^(-α)` for probabilities.
    pub w_max: Option<f64>,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            mean_normalized: true,
            w_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: Vec<f64>,
    pub alpha: f64,
    pub epsilon: f64,
    pub freq_mode: FreqMode,
    pub mean_normalized: bool,
    /// Upper bound on every entry, expressed in the final (post-normalization) scale.
    pub w_max: f64,
}

/// Raw power-law weight before clamping and normalization.
pub fn raw_weight(freq: f64, alpha: f64, epsilon: f64) -> f64 {
    (freq + epsilon).powf(-alpha)
}

fn check_params(alpha: f64, epsilon: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(
            "alpha",
            format!("must be finite and >= 0, got {alpha}"),
        ));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config(
            "epsilon",
            format!("must be finite and > 0, got {epsilon}"),
        ));
    }
    Ok(())
}

/// Computes per-token weights from `freq` in its current mode.
///
/// Order of operations: raw power law, clamp to `w_max`, optional division by
/// the mean over non-PAD ids, then PAD set to 0.
pub fn compute_weights(
    freq: &FreqTable,
    alpha: f64,
    epsilon: f64,
    options: WeightOptions,
) -> Result<WeightTable> {
    check_params(alpha, epsilon)?;
    let mode = freq.mode();
    let cap = match options.w_max {
        Some(w) if w > 0.0 => w,
        Some(w) => return Err(Error::config("w_max", format!("must be > 0, got {w}"))),
        None => {
            let once = match mode {
                FreqMode::Counts => 1.0,
                FreqMode::Probabilities => {
                    if freq.total() == 0 {
                        return Err(Error::EmptyCorpus);
                    }
                    1.0 / freq.total() as f64
                }
            };
            raw_weight(once, alpha, epsilon)
        }
    };

    let mut weights: Vec<f64> = (0..freq.len())
        .map(|id| raw_weight(freq.freq(id), alpha, epsilon).min(cap))
        .collect();
    let mut w_max = cap;
    if options.mean_normalized {
        let non_pad: Vec<f64> = weights
            .iter()
            .enumerate()
            .filter(|&(id, _)| id != PAD)
            .map(|(_, &w)| w)
            .collect();
        if !non_pad.is_empty() {
            let mean = non_pad.iter().sum::<f64>() / non_pad.len() as f64;
            for w in weights.iter_mut() {
                *w /= mean;
            }
            w_max /= mean;
        }
    }
    if let Some(pad) = weights.get_mut(PAD) {
        *pad = 0.0;
    }
    Ok(WeightTable {
        weights,
        alpha,
        epsilon,
        freq_mode: mode,
        mean_normalized: options.mean_normalized,
        w_max,
    })
}

impl WeightTable {
    /// All-ones table (PAD zero): the weights under which PDL is plain CE.
    pub fn unit(vocab_size: usize) -> Self {
        let mut weights = vec![1.0; vocab_size];
        if let Some(pad) = weights.get_mut(PAD) {
            *pad = 0.0;
        }
        WeightTable {
            weights,
            alpha: 0.0,
            epsilon: DEFAULT_EPSILON,
            freq_mode: FreqMode::Probabilities,
            mean_normalized: false,
            w_max: 1.0,
        }
    }

    /// Wraps explicit per-id weights (PAD must be 0). The power-law metadata
    /// is set to the α = 0 defaults.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some((id, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::Data(format!(
                "weight {w} for id {id} must be finite and >= 0"
            )));
        }
        if weights.first().is_some_and(|&w| w != 0.0) {
            return Err(Error::Data("PAD weight must be 0".into()));
        }
        let w_max = weights.iter().copied().fold(0.0, f64::max);
        Ok(WeightTable {
            weights,
            alpha: 0.0,
            epsilon: DEFAULT_EPSILON,
            freq_mode: FreqMode::Probabilities,
            mean_normalized: false,
            w_max,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, id: TokenId) -> f64 {
        self.weights[id]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn header(&self) -> String {
        format!(
            "#weighttable v1 vocab_size={} alpha={} epsilon={} mode={} mean_normalized={} w_max={}",
            self.len(),
            self.alpha,
            self.epsilon,
            self.freq_mode.as_str(),
            u8::from(self.mean_normalized),
            self.w_max
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, "")
    }

    pub fn save_with_provenance(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = self.header();
        if !provenance.is_empty() {
            out.push(' ');
            out.push_str(provenance);
        }
        out.push('\n');
        for (id, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{id}\t{}\n", fmt_f64(*w)));
        }
        write_text(path, &out)
    }

    pub fn load(path: &Path) -> Result<WeightTable> {
        let text = read_text(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        if !header.starts_with("#weighttable v1") {
            return Err(Error::parse(path, 1, "missing `#weighttable v1` header"));
        }
        let fields = header_fields(header);
        let get = |key: &str| {
            header_value(&fields, key)
                .ok_or_else(|| Error::parse(path, 1, format!("missing {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::parse(path, 1, format!("bad {key}")))
        };
        let vocab_size: usize = get("vocab_size")?
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad vocab_size"))?;
        let alpha = num("alpha")?;
        let epsilon = num("epsilon")?;
        let w_max = num("w_max")?;
        let freq_mode =
            FreqMode::parse(get("mode")?).ok_or_else(|| Error::parse(path, 1, "bad mode"))?;
        let mean_normalized = match get("mean_normalized")? {
            "0" => false,
            "1" => true,
            _ => return Err(Error::parse(path, 1, "mean_normalized must be 0 or 1")),
        };
        check_params(alpha, epsilon).map_err(|e| Error::parse(path, 1, e.to_string()))?;

        let mut weights = Vec::with_capacity(vocab_size);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let (id, w) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>weight`"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("id {id:?} out of order, expected {i}"),
                ));
            }
            let w: f64 = w
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad weight {w:?}")))?;
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("weight {w} must be finite and >= 0"),
                ));
            }
            weights.push(w);
        }
        if weights.len() != vocab_size {
            return Err(Error::parse(
                path,
                weights.len() + 1,
                format!("expected {vocab_size} rows, found {}", weights.len()),
            ));
        }
        if weights.first().is_some_and(|&w| w != 0.0) {
            return Err(Error::parse(path, 2, "PAD weight must be 0"));
        }
        Ok(WeightTable {
            weights,
            alpha,
            epsilon,
            freq_mode,
            mean_normalized,
            w_max,
        })
    }
}
