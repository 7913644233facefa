//! Frequency-bucketed evaluation, rule recall, diversity, and CE-vs-PDL reports.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, EncodedCorpus, Rule, TokenId, BOS, EOS, PAD};
use crate::dataset::Pairs;
use crate::error::{Error, Result};
use crate::io::{read_text, write_text};
use crate::loss::log_softmax_at;
use crate::model::ModelParams;
use crate::stats::FreqTable;
use crate::weights::WeightTable;

pub const DEFAULT_NUM_BUCKETS: usize = 5;
pub const REPORT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub num_buckets: usize,
    /// `num_buckets - 1` increasing thresholds on the token count; bucket `k`
    /// holds counts in `[boundaries[k-1], boundaries[k])`.
    pub boundaries: Vec<f64>,
    /// Bucket per id; -1 for special and zero-count ids.
    pub assignment: Vec<i64>,
}

/// Log-spaced buckets between the smallest and largest nonzero count of
/// ordinary tokens. Bucket 0 is the rarest.
pub fn make_buckets(freq: &FreqTable, num_buckets: usize) -> Result<BucketSpec> {
    if num_buckets < 2 {
        return Err(Error::config("num_buckets", "must be >= 2"));
    }
    let nonzero: Vec<(usize, u64)> = freq
        .counts()
        .iter()
        .enumerate()
        .filter(|&(id, &c)| !is_special(id) && c > 0)
        .map(|(id, &c)| (id, c))
        .collect();
    let distinct: HashSet<u64> = nonzero.iter().map(|&(_, c)| c).collect();
    if distinct.len() < num_buckets {
        return Err(Error::config(
            "num_buckets",
            format!(
                "{num_buckets} buckets need as many distinct nonzero frequencies, found {}",
                distinct.len()
            ),
        ));
    }
    let lo = (*distinct.iter().min().unwrap() as f64).ln();
    let hi = (*distinct.iter().max().unwrap() as f64).ln();
    let boundaries: Vec<f64> = (1..num_buckets)
        .map(|k| (lo + (hi - lo) * k as f64 / num_buckets as f64).exp())
        .collect();
    let mut assignment = vec![-1i64; freq.len()];
    for (id, c) in nonzero {
        let c = c as f64;
        assignment[id] = boundaries.iter().filter(|&&b| c >= b).count() as i64;
    }
    Ok(BucketSpec {
        num_buckets,
        boundaries,
        assignment,
    })
}

impl BucketSpec {
    pub fn bucket_of(&self, id: TokenId) -> Option<usize> {
        self.assignment
            .get(id)
            .and_then(|&b| usize::try_from(b).ok())
    }
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub index: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub tokens: u64,
    pub mean_nll: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedMetrics {
    pub buckets: Vec<BucketStats>,
    /// Non-PAD targets with no bucket (special or zero-count ids).
    pub unassigned_tokens: u64,
    pub total_tokens: u64,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    /// Mean of `w(y)·nll` when evaluated with a weight table.
    pub weighted_loss: Option<f64>,
    pub rule_positions: u64,
    pub rule_recall: Option<f64>,
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
}

impl BucketedMetrics {
    pub fn rare_bucket(&self) -> &BucketStats {
        &self.buckets[0]
    }

    pub fn frequent_bucket(&self) -> &BucketStats {
        self.buckets.last().expect("at least two buckets")
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub rules: &'a [Rule],
    pub weights: Option<&'a WeightTable>,
    /// Number of corpus sequences whose opening tokens seed greedy generation
    /// for distinct-n. 0 disables generation.
    pub num_prompts: usize,
    pub gen_len: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Forward-only pass over every (context, target) pair of `corpus`.
pub fn evaluate(
    params: &ModelParams,
    corpus: &EncodedCorpus,
    buckets: &BucketSpec,
    options: &EvalOptions<'_>,
) -> Result<BucketedMetrics> {
    let vocab = params.vocab_size();
    if corpus.vocab_size != vocab || buckets.assignment.len() != vocab {
        return Err(Error::Data(format!(
            "vocab mismatch: model {vocab}, corpus {}, buckets {}",
            corpus.vocab_size,
            buckets.assignment.len()
        )));
    }
    if let Some(w) = options.weights {
        if w.len() != vocab {
            return Err(Error::Data(format!(
                "weight table size {} != vocab {vocab}",
                w.len()
            )));
        }
    }
    let mut rule_of = vec![None; vocab];
    for r in options.rules {
        if r.trigger >= vocab || r.target >= vocab {
            return Err(Error::Data(format!("rule {r:?} outside vocab {vocab}")));
        }
        rule_of[r.trigger] = Some(r.target);
    }

    let pairs = Pairs::from_corpus(corpus, params.context_size);
    let k = buckets.num_buckets;
    let mut bucket_nll = vec![CompensatedSum::default(); k];
    let mut bucket_tokens = vec![0u64; k];
    let mut bucket_hits = vec![0u64; k];
    let mut nll_sum = CompensatedSum::default();
    let mut weighted_sum = CompensatedSum::default();
    let (mut total, mut hits, mut unassigned) = (0u64, 0u64, 0u64);
    let (mut rule_positions, mut rule_hits) = (0u64, 0u64);

    let n = params.context_size;
    let indices: Vec<usize> = (0..pairs.len()).collect();
    let (mut ctx, mut tgt) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(EVAL_CHUNK) {
        pairs.gather(chunk, &mut ctx, &mut tgt);
        let logits = params.forward(&ctx)?;
        for (r, &y) in tgt.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let row = logits.row(r);
            let nll = -log_softmax_at(row, y);
            let pred = argmax(row);
            total += 1;
            nll_sum.add(nll);
            if let Some(w) = options.weights {
                weighted_sum.add(w.weight(y) * nll);
            }
            let hit = pred == y;
            hits += u64::from(hit);
            match buckets.bucket_of(y) {
                Some(b) => {
                    bucket_tokens[b] += 1;
                    bucket_nll[b].add(nll);
                    bucket_hits[b] += u64::from(hit);
                }
                None => unassigned += 1,
            }
            let last = ctx[r * n + n - 1];
            if let Some(target) = rule_of[last] {
                rule_positions += 1;
                rule_hits += u64::from(pred == target);
            }
        }
    }

    let bucket_stats = (0..k)
        .map(|b| {
            let t = bucket_tokens[b];
            BucketStats {
                index: b,
                lower: if b == 0 {
                    None
                } else {
                    Some(buckets.boundaries[b - 1])
                },
                upper: buckets.boundaries.get(b).copied(),
                tokens: t,
                mean_nll: (t > 0).then(|| bucket_nll[b].value() / t as f64),
                accuracy: (t > 0).then(|| bucket_hits[b] as f64 / t as f64),
            }
        })
        .collect();
    let mean_nll = if total > 0 {
        nll_sum.value() / total as f64
    } else {
        0.0
    };

    let (distinct_1, distinct_2) = if options.num_prompts > 0 && options.gen_len > 0 {
        let generations: Vec<Vec<TokenId>> = corpus
            .sequences
            .iter()
            .take(options.num_prompts)
            .map(|seq| {
                // BOS plus up to n opening tokens; never the closing EOS.
                let end = (n + 1).min(seq.len() - 1).max(1);
                let prompt = &seq[..end];
                greedy_generate(params, prompt, options.gen_len).map(|mut g| {
                    if g.last() == Some(&EOS) {
                        g.pop();
                    }
                    g
                })
            })
            .collect::<Result<_>>()?;
        (
            pooled_distinct_n(&generations, 1),
            pooled_distinct_n(&generations, 2),
        )
    } else {
        (None, None)
    };

    Ok(BucketedMetrics {
        buckets: bucket_stats,
        unassigned_tokens: unassigned,
        total_tokens: total,
        mean_nll,
        perplexity: mean_nll.exp(),
        accuracy: if total > 0 {
            hits as f64 / total as f64
        } else {
            0.0
        },
        weighted_loss: options.weights.map(|_| {
            if total > 0 {
                weighted_sum.value() / total as f64
            } else {
                0.0
            }
        }),
        rule_positions,
        rule_recall: (rule_positions > 0).then(|| rule_hits as f64 / rule_positions as f64),
        distinct_1,
        distinct_2,
    })
}

/// Unique n-grams over total n-grams.
pub fn distinct_n(tokens: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    if tokens.len() < n {
        return Err(Error::Data(format!(
            "sequence of length {} shorter than n = {n}",
            tokens.len()
        )));
    }
    let grams: HashSet<&[TokenId]> = tokens.windows(n).collect();
    Ok(grams.len() as f64 / (tokens.len() - n + 1) as f64)
}

/// Distinct-n over several sequences: n-grams are taken within each
/// sequence and uniqueness is counted across all of them.
pub fn pooled_distinct_n(sequences: &[Vec<TokenId>], n: usize) -> Option<f64> {
    let mut grams: HashSet<&[TokenId]> = HashSet::new();
    let mut total = 0usize;
    for seq in sequences {
        if seq.len() >= n {
            total += seq.len() - n + 1;
            grams.extend(seq.windows(n));
        }
    }
    (total > 0).then(|| grams.len() as f64 / total as f64)
}

/// Appends argmax tokens to `prompt` until EOS or `max_len` new tokens.
/// Returns only the generated tokens (EOS included when produced).
pub fn greedy_generate(
    params: &ModelParams,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".into()));
    }
    let n = params.context_size;
    let mut history: Vec<TokenId> = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_len);
    let mut ctx = vec![BOS; n];
    while generated.len() < max_len {
        for (slot, c) in ctx.iter_mut().enumerate() {
            let back = n - slot;
            *c = if back > history.len() {
                BOS
            } else {
                history[history.len() - back]
            };
        }
        let logits = params.forward(&ctx)?;
        let next = argmax(logits.row(0));
        generated.push(next);
        history.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(generated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDelta {
    pub index: usize,
    pub accuracy_delta: Option<f64>,
    pub mean_nll_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub buckets: Vec<BucketDelta>,
    pub rule_recall_delta: Option<f64>,
    pub perplexity_delta: f64,
    pub mean_nll_delta: f64,
    pub distinct_1_delta: Option<f64>,
    pub distinct_2_delta: Option<f64>,
}

/// CE-vs-PDL comparison. Deltas are `pdl - ce`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub report_version: u32,
    pub tool: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub bucket_boundaries: Vec<f64>,
    pub ce: BucketedMetrics,
    pub pdl: BucketedMetrics,
    pub deltas: Deltas,
}

fn opt_delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

pub fn compare_report(
    ce: &BucketedMetrics,
    pdl: &BucketedMetrics,
    buckets: &BucketSpec,
    provenance: &crate::Provenance,
) -> Result<Report> {
    let same_bounds = |m: &BucketedMetrics| {
        m.buckets.len() == buckets.num_buckets
            && m.buckets
                .iter()
                .zip(m.buckets.iter().skip(1))
                .zip(&buckets.boundaries)
                .all(|((_, next), b)| next.lower == Some(*b))
    };
    if !same_bounds(ce) || !same_bounds(pdl) || ce.total_tokens != pdl.total_tokens {
        return Err(Error::Data(
            "metrics were computed with different buckets or corpora".into(),
        ));
    }
    let bucket_deltas = ce
        .buckets
        .iter()
        .zip(&pdl.buckets)
        .map(|(c, p)| BucketDelta {
            index: c.index,
            accuracy_delta: opt_delta(c.accuracy, p.accuracy),
            mean_nll_delta: opt_delta(c.mean_nll, p.mean_nll),
        })
        .collect();
    Ok(Report {
        report_version: REPORT_VERSION,
        tool: provenance.tool.clone(),
        config_hash: provenance.config_hash.clone(),
        config: provenance.config.clone(),
        bucket_boundaries: buckets.boundaries.clone(),
        ce: ce.clone(),
        pdl: pdl.clone(),
        deltas: Deltas {
            buckets: bucket_deltas,
            rule_recall_delta: opt_delta(ce.rule_recall, pdl.rule_recall),
            perplexity_delta: pdl.perplexity - ce.perplexity,
            mean_nll_delta: pdl.mean_nll - ce.mean_nll,
            distinct_1_delta: opt_delta(ce.distinct_1, pdl.distinct_1),
            distinct_2_delta: opt_delta(ce.distinct_2, pdl.distinct_2),
        },
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = read_text(path)?;
        let report: Report =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if report.report_version != REPORT_VERSION {
            return Err(Error::parse(
                path,
                0,
                format!("unsupported report_version {}", report.report_version),
            ));
        }
        Ok(report)
    }

    /// One row per bucket for plotting.
    pub fn to_csv(&self) -> String {
        let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(
            "bucket,lower,upper,tokens,ce_accuracy,pdl_accuracy,accuracy_delta,ce_mean_nll,pdl_mean_nll,mean_nll_delta\n",
        );
        for ((c, p), d) in self
            .ce
            .buckets
            .iter()
            .zip(&self.pdl.buckets)
            .zip(&self.deltas.buckets)
        {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.index,
                cell(c.lower),
                cell(c.upper),
                c.tokens,
                cell(c.accuracy),
                cell(p.accuracy),
                cell(d.accuracy_delta),
                cell(c.mean_nll),
                cell(p.mean_nll),
                cell(d.mean_nll_delta),
            ));
        }
        out
    }
}
