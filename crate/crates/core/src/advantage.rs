//! Group-relative advantages and confidence-divergence advantage weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, GcpoError, Result};

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

/// Standardize rewards within a group using the population standard deviation.
///
/// Groups whose spread falls below `std_floor` carry no ranking signal and get
/// all-zero advantages.
pub fn group_advantage(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    ensure!(rewards.len() >= 2, "advantages need a group of at least 2, got {}", rewards.len());
    ensure!(std_floor > 0.0, "std_floor must be positive, got {std_floor}");
    if let Some((i, r)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(GcpoError::Validation(format!("reward {i} is {r}")));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// How the cumulative divergence becomes the multiplier on the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `1 + raw`: equals 1 while the policy matches the reference.
    #[default]
    Offset,
    /// `raw` as is.
    Literal,
    /// `|raw|`.
    Abs,
    /// Always 1 (plain GRPO weighting); raw values are still reported.
    Off,
}

impl WeightMode {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            WeightMode::Offset => 1.0 + raw,
            WeightMode::Literal => raw,
            WeightMode::Abs => raw.abs(),
            WeightMode::Off => 1.0,
        }
    }
}

/// Per-position advantage weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// Cumulative mean of clipped divergences, within `[-eps_w, eps_w]`.
    pub raw: Vec<f64>,
    pub effective: Vec<f64>,
}

/// Running mean of `clip(policy - ref, -eps_w, eps_w)` along the sequence.
pub fn dynamic_weights(
    policy_logprob: &[f64],
    ref_logprob: &[f64],
    eps_w: f64,
    mode: WeightMode,
) -> Result<WeightVector> {
    if !(eps_w > 0.0) {
        return Err(GcpoError::Config(format!("eps_w must be positive, got {eps_w}")));
    }
    ensure!(
        policy_logprob.len() == ref_logprob.len(),
        "confidence traces differ in length: {} vs {}",
        policy_logprob.len(),
        ref_logprob.len()
    );
    let mut raw = Vec::with_capacity(policy_logprob.len());
    let mut sum = 0.0;
    for (t, (p, r)) in policy_logprob.iter().zip(ref_logprob).enumerate() {
        ensure!(p.is_finite() && r.is_finite(), "non-finite confidence at position {t}");
        sum += (p - r).clamp(-eps_w, eps_w);
        // the mean of clipped terms can round one ulp past the bound
        raw.push((sum / (t + 1) as f64).clamp(-eps_w, eps_w));
    }
    let effective = raw.iter().map(|&w| mode.apply(w)).collect();
    Ok(WeightVector { raw, effective })
}

/// Mean, min and max of a slice; zeros for an empty slice.
pub fn summary(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    (mean, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[1.0, 0.0], 1e-6).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantage(&[0.3; 3], 1e-6).unwrap(), vec![0.0; 3]);
        assert_eq!(
            group_advantage(&[1.0, 0.0, 0.0, 1.0], 1e-6).unwrap(),
            vec![1.0, -1.0, -1.0, 1.0]
        );
    }

    #[test]
    fn advantage_errors() {
        assert!(group_advantage(&[1.0], 1e-6).is_err());
        assert!(group_advantage(&[1.0, f64::NAN], 1e-6).is_err());
        assert!(group_advantage(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn near_degenerate_group_is_zeroed() {
        let a = group_advantage(&[0.5, 0.5 + 1e-8, 0.5], 1e-6).unwrap();
        assert_eq!(a, vec![0.0; 3]);
    }

    #[test]
    fn weight_examples() {
        let w = dynamic_weights(&[-1.0, -2.0], &[-1.0, -2.0], 0.5, WeightMode::Offset).unwrap();
        assert_eq!(w.raw, vec![0.0, 0.0]);
        assert_eq!(w.effective, vec![1.0, 1.0]);

        // diffs (0.2, -0.4) clip to (0.2, -0.3)
        let w = dynamic_weights(&[0.2, -0.4], &[0.0, 0.0], 0.3, WeightMode::Literal).unwrap();
        assert!((w.raw[0] - 0.2).abs() < 1e-15);
        assert!((w.raw[1] + 0.05).abs() < 1e-15);
        assert_eq!(w.raw, w.effective);

        let w = dynamic_weights(&[-0.9; 5], &[-1.0; 5], 0.5, WeightMode::Abs).unwrap();
        assert!(w.raw.iter().all(|&r| (r - 0.1).abs() < 1e-12));
    }

    #[test]
    fn weight_modes() {
        assert_eq!(WeightMode::Offset.apply(-0.25), 0.75);
        assert_eq!(WeightMode::Literal.apply(-0.25), -0.25);
        assert_eq!(WeightMode::Abs.apply(-0.25), 0.25);
        assert_eq!(WeightMode::Off.apply(-0.25), 1.0);
    }

    #[test]
    fn weight_errors() {
        assert!(matches!(
            dynamic_weights(&[0.0], &[0.0], 0.0, WeightMode::Offset),
            Err(GcpoError::Config(_))
        ));
        assert!(dynamic_weights(&[0.0], &[0.0, 1.0], 0.5, WeightMode::Offset).is_err());
    }

    proptest! {
        #[test]
        fn advantage_standardized_and_shift_invariant(
            rewards in proptest::collection::vec(0.0f64..1.0, 2..16),
            shift in -10.0f64..10.0,
            scale in 0.01f64..100.0,
        ) {
            let a = group_advantage(&rewards, 1e-6).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let b = group_advantage(&shifted, 1e-6).unwrap();
            let c = group_advantage(&scaled, 1e-6).unwrap();
            let g = a.len() as f64;
            let mean = a.iter().sum::<f64>() / g;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g).sqrt();
            if a.iter().any(|&x| x != 0.0) {
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((std - 1.0).abs() <= 1e-9);
                for i in 0..a.len() {
                    prop_assert!((a[i] - b[i]).abs() <= 1e-9);
                    prop_assert!((a[i] - c[i]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn raw_weights_bounded_running_mean(
            diffs in proptest::collection::vec(-3.0f64..3.0, 1..40),
            eps in 0.05f64..2.0,
        ) {
            let zeros = vec![0.0; diffs.len()];
            let w = dynamic_weights(&diffs, &zeros, eps, WeightMode::Offset).unwrap();
            for t in 0..diffs.len() {
                prop_assert!(w.raw[t].abs() <= eps + 1e-15);
                let prev = if t == 0 { 0.0 } else { w.raw[t - 1] * t as f64 };
                let step = w.raw[t] * (t + 1) as f64 - prev;
                prop_assert!((step - diffs[t].clamp(-eps, eps)).abs() <= 1e-12);
                prop_assert_eq!(w.effective[t], 1.0 + w.raw[t]);
            }
        }
    }
}
