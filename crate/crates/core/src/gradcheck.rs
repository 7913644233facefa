//! Finite-difference checks of the loss gradient and of the model backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, NUM_SPECIAL, PAD};
use crate::error::{Error, Result};
use crate::loss::{grad_check, pdl_loss, LossBatch, Reduction};
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::stats::{FreqMode, FreqTable};
use crate::weights::{compute_weights, WeightOptions, WeightTable, DEFAULT_EPSILON};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random (batch, weight table) pairs for the logit-gradient check.
    pub trials: usize,
    pub max_vocab: usize,
    pub max_batch: usize,
    /// Tiny model used for the all-parameter check.
    pub model_vocab: usize,
    pub model_context: usize,
    pub model_dim: usize,
    pub model_batch: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            trials: 100,
            max_vocab: 64,
            max_batch: 8,
            model_vocab: 12,
            model_context: 2,
            model_dim: 4,
            model_batch: 3,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_vocab < NUM_SPECIAL + 1 {
            return Err(Error::config(
                "max_vocab",
                format!("must be >= {}", NUM_SPECIAL + 1),
            ));
        }
        if self.model_vocab < NUM_SPECIAL + 1 {
            return Err(Error::config(
                "model_vocab",
                format!("must be >= {}", NUM_SPECIAL + 1),
            ));
        }
        for (field, v) in [
            ("max_batch", self.max_batch),
            ("model_context", self.model_context),
            ("model_dim", self.model_dim),
            ("model_batch", self.model_batch),
        ] {
            if v < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("step", "must be finite and > 0"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::config("tolerance", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub max_rel_error_logits: f64,
    pub max_rel_error_model: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A weight table over random counts with a random exponent in [0, 2].
fn random_weights(rng: &mut ChaCha8Rng, vocab: usize) -> Result<WeightTable> {
    let counts: Vec<u64> = (0..vocab)
        .map(|id| {
            if id < NUM_SPECIAL {
                0
            } else {
                rng.random_range(0..1000)
            }
        })
        .collect();
    let mut freq = FreqTable::from_counts(counts);
    if freq.total() == 0 {
        freq = FreqTable::from_counts((0..vocab).map(|id| u64::from(id >= NUM_SPECIAL)).collect());
    }
    let mode = if rng.random_bool(0.5) {
        FreqMode::Counts
    } else {
        FreqMode::Probabilities
    };
    compute_weights(
        &freq.with_mode(mode)?,
        rng.random_range(0.0..2.0),
        DEFAULT_EPSILON,
        WeightOptions {
            mean_normalized: rng.random_bool(0.5),
            w_max: None,
        },
    )
}

fn random_targets(rng: &mut ChaCha8Rng, batch: usize, vocab: usize) -> Vec<TokenId> {
    (0..batch)
        .map(|_| {
            if rng.random_bool(0.1) {
                PAD
            } else {
                rng.random_range(1..vocab)
            }
        })
        .collect()
}

/// Random batches of logits against random weight tables.
pub fn check_logit_gradients(config: &GradcheckConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    for trial in 0..config.trials {
        let vocab = rng.random_range(NUM_SPECIAL + 1..=config.max_vocab);
        let batch = rng.random_range(1..=config.max_batch);
        let logits: Vec<f64> = (0..batch * vocab)
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let weights = random_weights(&mut rng, vocab)?;
        let b = LossBatch {
            logits: Matrix::from_vec(batch, vocab, logits),
            targets: random_targets(&mut rng, batch, vocab),
            reduction: if trial % 2 == 0 {
                Reduction::TokenMean
            } else {
                Reduction::Sum
            },
        };
        worst = worst.max(grad_check(&b, &weights, config.step)?);
    }
    Ok(worst)
}

fn model_loss(
    params: &ModelParams,
    contexts: &[TokenId],
    targets: &[TokenId],
    weights: &WeightTable,
) -> Result<f64> {
    let batch = LossBatch {
        logits: params.forward(contexts)?,
        targets: targets.to_vec(),
        reduction: Reduction::TokenMean,
    };
    Ok(pdl_loss(&batch, weights)?.value)
}

/// Central differences through forward, softmax and the weighted loss for
/// every parameter of `params`, against [`ModelParams::backward`].
pub fn check_model_gradients(
    params: &ModelParams,
    contexts: &[TokenId],
    targets: &[TokenId],
    weights: &WeightTable,
    h: f64,
) -> Result<f64> {
    let batch = LossBatch {
        logits: params.forward(contexts)?,
        targets: targets.to_vec(),
        reduction: Reduction::TokenMean,
    };
    let grads = params.backward(contexts, &pdl_loss(&batch, weights)?.grad)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let mut compare = |probe: &mut ModelParams,
                       slot: fn(&mut ModelParams) -> &mut [f64],
                       analytic: &[f64]|
     -> Result<()> {
        for (i, &a) in analytic.iter().enumerate() {
            let orig = slot(probe)[i];
            slot(probe)[i] = orig + h;
            let plus = model_loss(probe, contexts, targets, weights)?;
            slot(probe)[i] = orig - h;
            let minus = model_loss(probe, contexts, targets, weights)?;
            slot(probe)[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        Ok(())
    };
    compare(
        &mut probe,
        |p| p.embedding.as_mut_slice(),
        grads.embedding.as_slice(),
    )?;
    compare(
        &mut probe,
        |p| p.projection.as_mut_slice(),
        grads.projection.as_slice(),
    )?;
    compare(&mut probe, |p| p.bias.as_mut_slice(), &grads.bias)?;
    Ok(worst)
}

/// Both checks with the configured sizes.
pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.validate()?;
    let logits = check_logit_gradients(config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let v = config.model_vocab;
    let mut params = ModelParams::init(v, config.model_context, config.model_dim, config.seed)?;
    // Larger than the training init so the loss surface is not nearly flat.
    for x in params
        .embedding
        .as_mut_slice()
        .iter_mut()
        .chain(params.projection.as_mut_slice())
    {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in &mut params.bias {
        *x = rng.random_range(-0.5..0.5);
    }
    let contexts: Vec<TokenId> = (0..config.model_batch * config.model_context)
        .map(|_| rng.random_range(1..v))
        .collect();
    let targets: Vec<TokenId> = (0..config.model_batch)
        .map(|_| rng.random_range(1..v))
        .collect();
    let weights = random_weights(&mut rng, v)?;
    let model = check_model_gradients(&params, &contexts, &targets, &weights, config.step)?;

    Ok(GradcheckReport {
        trials: config.trials,
        max_rel_error_logits: logits,
        max_rel_error_model: model,
        tolerance: config.tolerance,
        passed: logits < config.tolerance && model < config.tolerance,
    })
}
