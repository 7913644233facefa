//! Single-threaded minibatch SGD over sliding-window pairs.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedCorpus;
use crate::dataset::Pairs;
use crate::error::{Error, Result};
use crate::eval::{evaluate, make_buckets, EvalOptions, DEFAULT_NUM_BUCKETS};
use crate::loss::{ce_loss, pdl_loss, LossBatch, Reduction};
use crate::model::ModelParams;
use crate::stats::{FreqMode, FreqTable};
use crate::weights::{compute_weights, WeightOptions, WeightTable, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Pdl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub epsilon: f64,
    pub freq_mode: FreqMode,
    pub mean_normalized: bool,
    pub w_max: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub context_size: usize,
    pub embed_dim: usize,
    pub num_buckets: usize,
    /// Precomputed weights; overrides alpha/epsilon/freq_mode when set.
    pub weight_table_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Ce,
            alpha: 1.0,
            epsilon: DEFAULT_EPSILON,
            freq_mode: FreqMode::Probabilities,
            mean_normalized: true,
            w_max: None,
            learning_rate: 0.5,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            context_size: 2,
            embed_dim: 16,
            num_buckets: DEFAULT_NUM_BUCKETS,
            weight_table_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.context_size < 1 {
            return Err(Error::config("context_size", "must be >= 1"));
        }
        if self.embed_dim < 1 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        Ok(())
    }

    /// Weight table used by the PDL objective; `None` for CE.
    pub fn weight_table(&self, freq: &FreqTable) -> Result<Option<WeightTable>> {
        if self.loss == LossKind::Ce {
            return Ok(None);
        }
        let table = match &self.weight_table_path {
            Some(path) => WeightTable::load(path)?,
            None => compute_weights(
                &freq.with_mode(self.freq_mode)?,
                self.alpha,
                self.epsilon,
                WeightOptions {
                    mean_normalized: self.mean_normalized,
                    w_max: self.w_max,
                },
            )?,
        };
        Ok(Some(table))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-mean of the configured objective over the epoch's minibatches.
    pub train_loss: f64,
    /// Configured objective on the validation set.
    pub valid_loss: f64,
    /// Unweighted cross-entropy on the validation set.
    pub valid_ce: f64,
    pub valid_rare_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Not serialized, so history files stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: Vec<f64>,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
    }
}

/// Random stream for epoch shuffles, separate from parameter init.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains a fresh model. Validation metrics use `valid` when given, else the
/// training corpus. Buckets for the rare-token accuracy come from `freq`.
pub fn train(
    config: &TrainConfig,
    corpus: &EncodedCorpus,
    freq: &FreqTable,
    valid: Option<&EncodedCorpus>,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let vocab = corpus.vocab_size;
    if freq.len() != vocab {
        return Err(Error::Data(format!(
            "frequency table size {} != corpus vocab {vocab}",
            freq.len()
        )));
    }
    if let Some(v) = valid {
        if v.vocab_size != vocab {
            return Err(Error::Data(format!(
                "validation vocab {} != training vocab {vocab}",
                v.vocab_size
            )));
        }
    }
    corpus.validate()?;
    let pairs = Pairs::from_corpus(corpus, config.context_size);
    if pairs.is_empty() {
        return Err(Error::Data(
            "training corpus has no (context, target) pairs".into(),
        ));
    }
    let weights = config.weight_table(freq)?;
    if let Some(w) = &weights {
        if w.len() != vocab {
            return Err(Error::Data(format!(
                "weight table size {} != vocab {vocab}",
                w.len()
            )));
        }
    }
    let buckets = make_buckets(freq, config.num_buckets).ok();
    let valid = valid.unwrap_or(corpus);

    let mut params = ModelParams::init(vocab, config.context_size, config.embed_dim, config.seed)?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let (mut ctx, mut tgt) = (Vec::new(), Vec::new());

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, epoch));

        let mut loss_sum = 0.0;
        let mut active = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            pairs.gather(chunk, &mut ctx, &mut tgt);
            let batch = LossBatch {
                logits: params.forward(&ctx)?,
                targets: std::mem::take(&mut tgt),
                reduction: Reduction::TokenMean,
            };
            let result = match &weights {
                Some(w) => pdl_loss(&batch, w)?,
                None => ce_loss(&batch)?,
            };
            tgt = batch.targets;
            loss_sum += result.per_position.iter().sum::<f64>();
            active += tgt.iter().filter(|&&y| y != crate::corpus::PAD).count();
            let grads = params.backward(&ctx, &result.grad)?;
            params
                .sgd_step(&grads, config.learning_rate)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
        }
        let train_loss = loss_sum / active.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: training loss is {train_loss}"
            )));
        }

        let (valid_loss, valid_ce, rare) =
            validation(&params, valid, buckets.as_ref(), weights.as_ref())?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            valid_loss,
            valid_ce,
            valid_rare_accuracy: rare,
        });
        history
            .wall_clock_seconds
            .push(started.elapsed().as_secs_f64());
    }
    Ok((params, history))
}

fn validation(
    params: &ModelParams,
    valid: &EncodedCorpus,
    buckets: Option<&crate::eval::BucketSpec>,
    weights: Option<&WeightTable>,
) -> Result<(f64, f64, Option<f64>)> {
    let fallback;
    let spec = match buckets {
        Some(b) => b,
        None => {
            // No usable buckets: a single pseudo-bucket keeps the losses.
            fallback = crate::eval::BucketSpec {
                num_buckets: 1,
                boundaries: Vec::new(),
                assignment: vec![-1; params.vocab_size()],
            };
            &fallback
        }
    };
    let metrics = evaluate(
        params,
        valid,
        spec,
        &EvalOptions {
            weights,
            ..EvalOptions::default()
        },
    )?;
    let valid_loss = metrics.weighted_loss.unwrap_or(metrics.mean_nll);
    let rare = buckets.and_then(|_| metrics.rare_bucket().accuracy);
    Ok((valid_loss, metrics.mean_nll, rare))
}
