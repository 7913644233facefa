//! Weighted cross-entropy over logits with its analytic gradient.
//!
//! For a prediction row `z` with target `y` and weight `w = w(y)`:
//!
//! ```text
//! loss = -w * ln softmax(z)[y]
//! dloss/dz = w * (softmax(z) - onehot(y))
//! ```
//!
//! Plain cross-entropy is the same computation with `w = 1` (PAD still 0).

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::weights::WeightTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    TokenMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub logits: Matrix,
    pub targets: Vec<TokenId>,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
    pub per_position: Vec<f64>,
}

fn check_finite(row: &[f64]) -> Result<()> {
    match row.iter().position(|z| !z.is_finite()) {
        Some(j) => Err(Error::Numeric(format!(
            "non-finite logit {} at index {j}",
            row[j]
        ))),
        None => Ok(()),
    }
}

/// Max-shifted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Writes `softmax(logits)` into `out` and returns `ln Σ exp(z - max)` and `max`.
fn softmax_into(logits: &[f64], out: &mut [f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    (sum.ln(), max)
}

/// Natural-log softmax probability of `target`: `z_y - max - ln Σ exp(z - max)`.
pub fn log_softmax_at(logits: &[f64], target: TokenId) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    logits[target] - max - sum.ln()
}

fn weighted_loss(batch: &LossBatch, weight_of: impl Fn(TokenId) -> f64) -> Result<LossResult> {
    let (rows, vocab) = batch.logits.shape();
    if rows == 0 || batch.targets.is_empty() {
        return Err(Error::Data("empty loss batch".into()));
    }
    if batch.targets.len() != rows {
        return Err(Error::Data(format!(
            "{} targets for {rows} logit rows",
            batch.targets.len()
        )));
    }
    if let Some((k, &y)) = batch.targets.iter().enumerate().find(|(_, &y)| y >= vocab) {
        return Err(Error::Data(format!(
            "target {y} at position {k} >= vocab size {vocab}"
        )));
    }

    let mut grad = Matrix::zeros(rows, vocab);
    let mut per_position = vec![0.0; rows];
    let mut active = 0usize;
    for (k, &y) in batch.targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        active += 1;
        let z = batch.logits.row(k);
        check_finite(z).map_err(|e| Error::Numeric(format!("row {k}: {e}")))?;
        let w = weight_of(y);
        let g = grad.row_mut(k);
        let (log_sum, max) = softmax_into(z, g);
        let log_p = z[y] - max - log_sum;
        per_position[k] = -w * log_p;
        g[y] -= 1.0;
        for gj in g.iter_mut() {
            *gj *= w;
        }
    }

    let value = match batch.reduction {
        Reduction::Sum => per_position.iter().sum(),
        Reduction::TokenMean => {
            if active == 0 {
                0.0
            } else {
                let scale = 1.0 / active as f64;
                for g in grad.as_mut_slice() {
                    *g *= scale;
                }
                per_position.iter().sum::<f64>() / active as f64
            }
        }
    };
    Ok(LossResult {
        value,
        grad,
        per_position,
    })
}

/// Weighted cross-entropy with weights looked up from `weights`.
pub fn pdl_loss(batch: &LossBatch, weights: &WeightTable) -> Result<LossResult> {
    if weights.len() != batch.logits.cols() {
        return Err(Error::Data(format!(
            "weight table has {} entries, logits have {} columns",
            weights.len(),
            batch.logits.cols()
        )));
    }
    weighted_loss(batch, |y| weights.weight(y))
}

/// Unweighted cross-entropy; PAD targets are still masked.
pub fn ce_loss(batch: &LossBatch) -> Result<LossResult> {
    weighted_loss(batch, |y| if y == PAD { 0.0 } else { 1.0 })
}

/// Largest relative disagreement between the analytic gradient of
/// [`pdl_loss`] and central differences with step `h`.
///
/// Perturbing a logit only changes its own row, so each difference is taken
/// on that row's contribution (scaled as the reduction scales it).
pub fn grad_check(batch: &LossBatch, weights: &WeightTable, h: f64) -> Result<f64> {
    let analytic = pdl_loss(batch, weights)?;
    let active = batch.targets.iter().filter(|&&y| y != PAD).count();
    let scale = match batch.reduction {
        Reduction::Sum => 1.0,
        Reduction::TokenMean if active > 0 => 1.0 / active as f64,
        Reduction::TokenMean => 0.0,
    };
    let row_loss = |row: Vec<f64>, target: TokenId| -> Result<f64> {
        let single = LossBatch {
            logits: Matrix::from_vec(1, row.len(), row),
            targets: vec![target],
            reduction: Reduction::Sum,
        };
        Ok(pdl_loss(&single, weights)?.value * scale)
    };

    let mut worst = 0.0f64;
    for (k, &y) in batch.targets.iter().enumerate() {
        let row = batch.logits.row(k);
        for j in 0..row.len() {
            let mut plus = row.to_vec();
            plus[j] += h;
            let mut minus = row.to_vec();
            minus[j] -= h;
            let numeric = (row_loss(plus, y)? - row_loss(minus, y)?) / (2.0 * h);
            let a = analytic.grad.get(k, j);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f64>], targets: &[TokenId], reduction: Reduction) -> LossBatch {
        LossBatch {
            logits: Matrix::from_rows(rows),
            targets: targets.to_vec(),
            reduction,
        }
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.3; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = stable_softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(stable_softmax(&[0.0, f64::NAN]).is_err());
        assert!(stable_softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let wt = scaled_table(&WeightTable::unit(3), 7.0);
        let b = batch(&[vec![0.0, 800.0, 0.0]], &[1], Reduction::Sum);
        assert_eq!(pdl_loss(&b, &wt).unwrap().per_position[0], 0.0);
    }

    #[test]
    fn uniform_logits_unit_weight() {
        let b = batch(&[vec![0.0; 4]], &[2], Reduction::Sum);
        let r = ce_loss(&b).unwrap();
        assert!((r.per_position[0] - 4f64.ln()).abs() < 1e-15);
        let b = batch(&[vec![1.5; 10]], &[9], Reduction::TokenMean);
        assert!((ce_loss(&b).unwrap().value - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn weight_two_at_half_probability() {
        // Two-way tie gives p = 0.5 for the target.
        let freq = crate::stats::FreqTable::from_counts(vec![0, 1, 1]);
        let wt = crate::weights::compute_weights(
            &freq,
            0.0,
            1e-8,
            crate::weights::WeightOptions {
                mean_normalized: false,
                w_max: None,
            },
        )
        .unwrap();
        let b = batch(&[vec![-1e3, 0.0, 0.0]], &[1], Reduction::Sum);
        let r = pdl_loss(&b, &wt).unwrap();
        assert!((r.per_position[0] - 2f64.ln()).abs() < 1e-12);

        let doubled = scaled_table(&wt, 2.0);
        let r = pdl_loss(&b, &doubled).unwrap();
        assert!((r.per_position[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((r.per_position[0] - 1.386294).abs() < 1e-6);
    }

    fn scaled_table(wt: &WeightTable, c: f64) -> WeightTable {
        WeightTable::from_weights(wt.weights().iter().map(|w| w * c).collect()).unwrap()
    }

    #[test]
    fn pad_targets_are_masked() {
        let b = batch(
            &[vec![0.1, 0.2, 0.3], vec![0.5, -0.2, 0.0]],
            &[PAD, 2],
            Reduction::TokenMean,
        );
        let r = ce_loss(&b).unwrap();
        assert_eq!(r.per_position[0], 0.0);
        assert!(r.grad.row(0).iter().all(|&g| g == 0.0));
        assert_eq!(r.value, r.per_position[1]);
    }

    #[test]
    fn errors() {
        let b = batch(&[vec![0.0; 3]], &[3], Reduction::Sum);
        assert!(matches!(ce_loss(&b), Err(Error::Data(_))));
        let empty = LossBatch {
            logits: Matrix::zeros(0, 3),
            targets: vec![],
            reduction: Reduction::Sum,
        };
        assert!(matches!(ce_loss(&empty), Err(Error::Data(_))));
        let b = batch(&[vec![0.0; 3]], &[1], Reduction::Sum);
        assert!(pdl_loss(&b, &WeightTable::unit(4)).is_err());
    }

    #[test]
    fn ce_matches_unit_weights_exactly() {
        let b = batch(
            &[vec![0.3, -1.2, 2.0, 0.7], vec![1.0, 1.0, -3.0, 0.0]],
            &[3, 1],
            Reduction::TokenMean,
        );
        assert_eq!(
            ce_loss(&b).unwrap(),
            pdl_loss(&b, &WeightTable::unit(4)).unwrap()
        );
    }

    #[test]
    fn unit_weight_grad_is_p_minus_y() {
        let z = vec![0.3, -1.2, 2.0, 0.7];
        let b = batch(std::slice::from_ref(&z), &[2], Reduction::Sum);
        let r = ce_loss(&b).unwrap();
        let mut expected = stable_softmax(&z).unwrap();
        expected[2] -= 1.0;
        for (g, e) in r.grad.row(0).iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn stationary_point_grad_vanishes() {
        let b = batch(&[vec![-400.0, 400.0, -400.0]], &[1], Reduction::Sum);
        let r = ce_loss(&b).unwrap();
        assert!(r.grad.max_abs() < 1e-300);
        assert!(grad_check(&b, &WeightTable::unit(3), 1e-5).unwrap() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-30.0f64..30.0, 1..40), c in -100.0f64..100.0) {
            let a = stable_softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn loss_nonnegative(z in proptest::collection::vec(-20.0f64..20.0, 2..20), w in 0.0f64..5.0) {
            let v = z.len();
            let b = batch(&[z], &[v - 1], Reduction::Sum);
            let r = pdl_loss(&b, &scaled_table(&WeightTable::unit(v), w)).unwrap();
            prop_assert!(r.value >= 0.0);
        }
    }
}
