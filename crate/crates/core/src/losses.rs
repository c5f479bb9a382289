//! Loss formulas: weighted sequence NLL, joint label/explanation token
//! re-weighting, Masked Label Regularization and batch confidence weights.
//!
//! These are the scalar definitions. The reference transformer evaluates the
//! same expressions on tensors; tests pin the two against each other.

use serde::{Deserialize, Serialize};

use crate::backend::StepDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of label tokens in joint targets; explanation tokens get `1 - λ`.
    pub lambda_token: f64,
    pub lambda_mlr: f64,
    pub label_smoothing: f64,
    pub confidence_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_token: 0.8,
            lambda_mlr: 1e-4,
            label_smoothing: 0.1,
            confidence_weighting: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda_token(self.lambda_token)?;
        if !(self.lambda_mlr >= 0.0 && self.lambda_mlr.is_finite()) {
            return Err(Error::Config(format!("lambda_mlr must be >= 0, got {}", self.lambda_mlr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

fn check_lambda_token(lambda: f64) -> Result<()> {
    if (0.5..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::contract(format!("lambda_token must be in [0.5, 1), got {lambda}")))
    }
}

/// `example_weight * Σ w_t (-log p_t) / Σ w_t`.
pub fn weighted_nll(token_log_probs: &[f64], token_weights: &[f64], example_weight: f64) -> Result<f64> {
    let losses: Vec<f64> = token_log_probs.iter().map(|lp| -lp).collect();
    weighted_token_loss(&losses, token_weights, example_weight)
}

/// Weighted per-token mean of arbitrary per-token losses (plain NLL or the
/// label-smoothed variant).
pub fn weighted_token_loss(token_losses: &[f64], token_weights: &[f64], example_weight: f64) -> Result<f64> {
    if token_losses.len() != token_weights.len() {
        return Err(Error::contract(format!(
            "{} token losses but {} token weights",
            token_losses.len(),
            token_weights.len()
        )));
    }
    if token_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::contract("token weights must be finite and non-negative"));
    }
    let norm: f64 = token_weights.iter().sum();
    if norm <= 0.0 {
        return Err(Error::contract("at least one token weight must be positive"));
    }
    if example_weight == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = token_losses.iter().zip(token_weights).map(|(l, w)| w * l).sum();
    Ok(example_weight * total / norm)
}

/// Label-smoothed loss of one position: `(1-ε)(-log p_y) + ε · mean_v(-log p_v)`.
pub fn smoothed_token_loss(log_probs: &[f64], target: usize, smoothing: f64) -> f64 {
    let nll = -log_probs[target];
    if smoothing == 0.0 {
        return nll;
    }
    let uniform = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    (1.0 - smoothing) * nll + smoothing * uniform
}

/// Token weights for a joint target `label separator explanation <eos>`.
///
/// `explanation_token_count` counts everything after the label (separator
/// included); the trailing EOS position joins the explanation group.
pub fn joint_token_weights(label_token_count: usize, explanation_token_count: usize, lambda_token: f64) -> Result<Vec<f64>> {
    check_lambda_token(lambda_token)?;
    if label_token_count == 0 {
        return Err(Error::contract("label_token_count must be positive"));
    }
    let mut w = vec![lambda_token; label_token_count];
    w.extend(std::iter::repeat_n(1.0 - lambda_token, explanation_token_count + 1));
    Ok(w)
}

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Negative mean per-step entropy. Minimizing it drives the explanation
/// distributions toward uniform; the value lies in `[-ln V, 0]`.
pub fn mlr_loss(distributions: &[StepDistribution]) -> Result<f64> {
    if distributions.is_empty() {
        return Err(Error::contract("mlr_loss needs at least one step distribution"));
    }
    let total: f64 = distributions.iter().map(|d| entropy(d.probs())).sum();
    Ok(-total / distributions.len() as f64)
}

pub fn rationalizer_loss(gen_loss: f64, mlr: f64, lambda_mlr: f64) -> f64 {
    if lambda_mlr == 0.0 {
        gen_loss
    } else {
        gen_loss + lambda_mlr * mlr
    }
}

/// Rescales confidences so the batch mean weight is one:
/// `w_j = B c_j / Σ c_k`. An all-zero batch falls back to uniform weights.
pub fn normalize_confidence_weights(confidences: &[f64]) -> Result<Vec<f64>> {
    if confidences.is_empty() {
        return Err(Error::contract("confidence batch is empty"));
    }
    if confidences.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::contract("confidences must be finite and non-negative"));
    }
    let total: f64 = confidences.iter().sum();
    let b = confidences.len() as f64;
    if total == 0.0 {
        log::warn!("all {} confidences are zero; using uniform weights", confidences.len());
        return Ok(vec![1.0; confidences.len()]);
    }
    Ok(confidences.iter().map(|c| b * c / total).collect())
}

/// Length-normalized sequence likelihood `exp(mean_t log p_t)`.
pub fn sequence_confidence(token_log_probs: &[f64]) -> f64 {
    if token_log_probs.is_empty() {
        return 0.0;
    }
    let mean = token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64;
    mean.exp().clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> StepDistribution {
        StepDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn nll_of_halves() {
        let lp = vec![0.5f64.ln(); 4];
        assert_relative_eq!(weighted_nll(&lp, &[1.0; 4], 1.0).unwrap(), 0.6931471805599453, epsilon = 1e-12);
        assert_eq!(weighted_nll(&lp, &[1.0; 4], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn nll_rejects_mismatch_and_zero_weights() {
        assert!(weighted_nll(&[-1.0], &[1.0, 1.0], 1.0).is_err());
        assert!(weighted_nll(&[-1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn joint_weights_examples() {
        let w = joint_token_weights(2, 3, 0.8).unwrap();
        let expected = [0.8, 0.8, 0.2, 0.2, 0.2, 0.2];
        assert_eq!(w.len(), expected.len());
        for (a, b) in w.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(joint_token_weights(2, 3, 0.5).unwrap(), vec![0.5; 6]);
        assert_eq!(joint_token_weights(3, 0, 0.9).unwrap().len(), 4);
        assert!(joint_token_weights(2, 3, 1.0).is_err());
        assert!(joint_token_weights(2, 3, 0.4).is_err());
    }

    #[test]
    fn mlr_examples() {
        let uniform = dist(&[0.25; 4]);
        assert_relative_eq!(mlr_loss(&[uniform.clone(), uniform]).unwrap(), -(4f64.ln()), epsilon = 1e-12);
        assert_eq!(mlr_loss(&[dist(&[0.0, 1.0, 0.0])]).unwrap(), 0.0);
        assert_relative_eq!(
            mlr_loss(&[dist(&[0.5, 0.5, 0.0, 0.0])]).unwrap(),
            -(2f64.ln()),
            epsilon = 1e-12
        );
        assert!(mlr_loss(&[]).is_err());
    }

    #[test]
    fn rationalizer_loss_examples() {
        assert_eq!(rationalizer_loss(1.234, -1.3863, 0.0), 1.234);
        assert_relative_eq!(rationalizer_loss(1.0, -1.3863, 1e-4), 0.99986137, epsilon = 1e-9);
    }

    #[test]
    fn confidence_weight_examples() {
        assert_eq!(normalize_confidence_weights(&[0.2, 0.2]).unwrap(), vec![1.0, 1.0]);
        let w = normalize_confidence_weights(&[0.1, 0.3]).unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.5, epsilon = 1e-12);
        assert_eq!(normalize_confidence_weights(&[0.0, 0.0, 0.0]).unwrap(), vec![1.0; 3]);
        assert!(normalize_confidence_weights(&[]).is_err());
    }

    #[test]
    fn smoothing_zero_is_plain_nll() {
        let lp = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        assert_eq!(smoothed_token_loss(&lp, 1, 0.0), -lp[1]);
        let s = smoothed_token_loss(&lp, 1, 0.1);
        assert_relative_eq!(s, 0.9 * -lp[1] + 0.1 * -(lp.iter().sum::<f64>()) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_config_ranges() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda_token: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { label_smoothing: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_mlr: -1.0, ..Default::default() }.validate().is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn mlr_bounded_and_permutation_invariant(steps in prop::collection::vec(simplex(6), 1..5)) {
            let d: Vec<StepDistribution> = steps.iter().map(|p| dist(p)).collect();
            let v = mlr_loss(&d).unwrap();
            prop_assert!(v <= 1e-12 && v >= -(6f64.ln()) - 1e-12);
            let rev: Vec<StepDistribution> = steps.iter().rev().map(|p| {
                let mut q = p.clone();
                q.reverse();
                dist(&q)
            }).collect();
            prop_assert!((mlr_loss(&rev).unwrap() - v).abs() < 1e-12);
        }

        #[test]
        fn confidence_weights_scale_invariant(c in prop::collection::vec(0.01f64..1.0, 1..20), s in 0.1f64..10.0) {
            let a = normalize_confidence_weights(&c).unwrap();
            let scaled: Vec<f64> = c.iter().map(|x| x * s).collect();
            let b = normalize_confidence_weights(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.iter().sum::<f64>() - c.len() as f64).abs() < 1e-9);
        }

        #[test]
        fn nll_linear_in_example_weight(lp in prop::collection::vec(-5.0f64..0.0, 1..10), w in 0.0f64..4.0) {
            let ones = vec![1.0; lp.len()];
            let base = weighted_nll(&lp, &ones, 1.0).unwrap();
            prop_assert!((weighted_nll(&lp, &ones, w).unwrap() - w * base).abs() < 1e-9);
        }

        #[test]
        fn joint_weight_group_masses(l in 1usize..6, e in 0usize..30, lambda in 0.5f64..0.99) {
            let w = joint_token_weights(l, e, lambda).unwrap();
            let label_mass: f64 = w[..l].iter().sum();
            let expl_mass: f64 = w[l..].iter().sum();
            prop_assert!((label_mass - lambda * l as f64).abs() < 1e-9);
            prop_assert!((expl_mass - (1.0 - lambda) * (e + 1) as f64).abs() < 1e-9);
        }
    }
}
