//! Clipped importance-ratio surrogate objectives with a k3 KL penalty.
//!
//! Losses follow the minimization convention `loss = -(surrogate - beta * kl)`.
//! Gradients are returned with respect to the per-position logits of the
//! current policy; advantage weights are treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, GcpoError, Result};

/// Log-ratio magnitude beyond which the importance ratio is saturated.
pub const MAX_LOG_RATIO: f64 = 30.0;

/// Where the KL penalty is applied when a selection mask is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScope {
    /// Only at selected positions, inside the masked sum.
    #[default]
    Selected,
    /// At every position.
    Full,
}

/// Per-sample normalizer of the token sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the full sequence length.
    #[default]
    Sequence,
    /// Divide by the number of selected positions.
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    #[default]
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub kl_estimator: KlEstimator,
    pub kl_scope: KlScope,
    pub normalization: Normalization,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.01,
            kl_estimator: KlEstimator::K3,
            kl_scope: KlScope::Selected,
            normalization: Normalization::Sequence,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GcpoError::Config(format!(
                "objective.clip_eps must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(GcpoError::Config(format!(
                "objective.beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Log-probabilities of the sampled tokens under the updating and rollout policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioInputs {
    pub logprob_new: Vec<f64>,
    pub logprob_old: Vec<f64>,
}

fn saturated_log_ratio(new: f64, old: f64) -> (f64, bool) {
    let d = new - old;
    if d.abs() > MAX_LOG_RATIO {
        (d.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO), true)
    } else {
        (d, false)
    }
}

/// `exp(new - old)` per position, saturated at `exp(±30)`.
pub fn importance_ratio(inp: &RatioInputs) -> Result<Vec<f64>> {
    ensure!(
        inp.logprob_new.len() == inp.logprob_old.len(),
        "ratio inputs differ in length: {} vs {}",
        inp.logprob_new.len(),
        inp.logprob_old.len()
    );
    inp.logprob_new
        .iter()
        .zip(&inp.logprob_old)
        .enumerate()
        .map(|(t, (&n, &o))| {
            ensure!(n.is_finite() && o.is_finite(), "non-finite log-prob at position {t}");
            let (d, sat) = saturated_log_ratio(n, o);
            if sat {
                log::warn!("importance log-ratio {} at position {t} saturated", n - o);
            }
            Ok(d.exp())
        })
        .collect()
}

fn k3_term(logprob_new: f64, logprob_ref: f64) -> f64 {
    let d = logprob_ref - logprob_new;
    d.exp() - d - 1.0
}

/// Mean over positions of `exp(ref - new) - (ref - new) - 1`.
pub fn kl_k3(logprob_new: &[f64], logprob_ref: &[f64]) -> Result<f64> {
    ensure!(
        logprob_new.len() == logprob_ref.len(),
        "KL inputs differ in length: {} vs {}",
        logprob_new.len(),
        logprob_ref.len()
    );
    ensure!(!logprob_new.is_empty(), "KL of empty sequences");
    ensure!(
        logprob_new.iter().chain(logprob_ref).all(|v| v.is_finite()),
        "non-finite log-prob in KL inputs"
    );
    let sum: f64 = logprob_new
        .iter()
        .zip(logprob_ref)
        .map(|(&n, &r)| k3_term(n, r))
        .sum();
    Ok(sum / logprob_new.len() as f64)
}

/// Everything the loss needs about one rollout of the group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInputs {
    pub tokens: Vec<usize>,
    pub logprob_new: Vec<f64>,
    pub logprob_old: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    /// Current-policy distributions, row-major `n x vocab`.
    pub probs_new: Vec<f64>,
    pub vocab: usize,
    pub advantage: f64,
}

impl SampleInputs {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self, i: usize) -> Result<()> {
        let n = self.tokens.len();
        ensure!(n > 0, "sample {i} is empty");
        ensure!(
            self.logprob_new.len() == n && self.logprob_old.len() == n && self.logprob_ref.len() == n,
            "sample {i}: log-prob vectors must all have length {n}"
        );
        ensure!(
            self.probs_new.len() == n * self.vocab,
            "sample {i}: probability table has {} entries, expected {}",
            self.probs_new.len(),
            n * self.vocab
        );
        ensure!(
            self.tokens.iter().all(|&z| z < self.vocab),
            "sample {i}: token id out of range"
        );
        ensure!(self.advantage.is_finite(), "sample {i}: non-finite advantage");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted, masked clipped surrogate (to be maximized).
    pub surrogate: f64,
    /// Masked mean k3 KL, before multiplying by beta.
    pub kl: f64,
    /// Share of contributing tokens whose clipped branch won the min.
    pub clipped_fraction: f64,
    /// d loss / d logits, one row-major `n x vocab` table per sample.
    pub grad_logits: Vec<Vec<f64>>,
    /// d loss / d logprob_new, one vector per sample.
    pub grad_logprob: Vec<Vec<f64>>,
}

/// Group-relative clipped surrogate over every position with unit weights.
pub fn grpo_loss(group: &[SampleInputs], cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    masked_loss(group, cfg, |_, _| true, |_, _| 1.0)
}

/// Critical-token objective: the surrogate at position `t` of sample `i`
/// counts only when `masks[i][t]` and is scaled by `weights[i][t]`.
pub fn gcpo_loss(
    group: &[SampleInputs],
    masks: &[Vec<bool>],
    weights: &[Vec<f64>],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    ensure!(
        masks.len() == group.len() && weights.len() == group.len(),
        "got {} samples, {} masks and {} weight vectors",
        group.len(),
        masks.len(),
        weights.len()
    );
    for (i, s) in group.iter().enumerate() {
        ensure!(
            masks[i].len() == s.len() && weights[i].len() == s.len(),
            "sample {i}: mask/weights not aligned with sequence length {}",
            s.len()
        );
        ensure!(weights[i].iter().all(|w| w.is_finite()), "sample {i}: non-finite weight");
    }
    masked_loss(group, cfg, |i, t| masks[i][t], |i, t| weights[i][t])
}

fn masked_loss(
    group: &[SampleInputs],
    cfg: &ObjectiveConfig,
    selected: impl Fn(usize, usize) -> bool,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    ensure!(!group.is_empty(), "empty group");
    for (i, s) in group.iter().enumerate() {
        s.validate(i)?;
    }
    let g = group.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);

    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut contributing = 0usize;
    let mut clipped = 0usize;
    let mut grad_logits = Vec::with_capacity(group.len());
    let mut grad_logprob = Vec::with_capacity(group.len());

    for (i, s) in group.iter().enumerate() {
        let n = s.len();
        let denom = match cfg.normalization {
            Normalization::Sequence => n as f64,
            Normalization::Selected => (0..n).filter(|&t| selected(i, t)).count().max(1) as f64,
        };
        let scale = 1.0 / (g * denom);
        let mut surr_i = 0.0;
        let mut kl_i = 0.0;
        let mut d_logprob = vec![0.0; n];

        for t in 0..n {
            let sel = selected(i, t);
            let kl_here = sel || cfg.kl_scope == KlScope::Full;
            if kl_here {
                let k = k3_term(s.logprob_new[t], s.logprob_ref[t]);
                kl_i += k;
                // d k3 / d logprob_new = 1 - exp(ref - new)
                let dk = 1.0 - (s.logprob_ref[t] - s.logprob_new[t]).exp();
                d_logprob[t] += scale * cfg.beta * dk;
            }
            if !sel {
                continue;
            }
            contributing += 1;
            let (d, saturated) = saturated_log_ratio(s.logprob_new[t], s.logprob_old[t]);
            let r = d.exp();
            let unclipped = r * s.advantage;
            let clipped_val = r.clamp(lo, hi) * s.advantage;
            let w = weight(i, t);
            if unclipped <= clipped_val {
                surr_i += w * unclipped;
                if !saturated {
                    d_logprob[t] -= scale * w * unclipped;
                }
            } else {
                surr_i += w * clipped_val;
                clipped += 1;
            }
        }
        surrogate += scale * surr_i;
        kl += scale * kl_i;

        let v = s.vocab;
        let mut gl = vec![0.0; n * v];
        for t in 0..n {
            let c = d_logprob[t];
            if c == 0.0 {
                continue;
            }
            let row = &mut gl[t * v..(t + 1) * v];
            for (k, out) in row.iter_mut().enumerate() {
                *out = -c * s.probs_new[t * v + k];
            }
            row[s.tokens[t]] += c;
        }
        grad_logits.push(gl);
        grad_logprob.push(d_logprob);
    }

    let total = -surrogate + cfg.beta * kl;
    let clipped_fraction = if contributing == 0 {
        0.0
    } else {
        clipped as f64 / contributing as f64
    };
    Ok(LossBreakdown {
        total,
        surrogate,
        kl,
        clipped_fraction,
        grad_logits,
        grad_logprob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_sample(n: usize, vocab: usize, advantage: f64) -> SampleInputs {
        let lp = -(vocab as f64).ln();
        SampleInputs {
            tokens: (0..n).map(|t| t % vocab).collect(),
            logprob_new: vec![lp; n],
            logprob_old: vec![lp; n],
            logprob_ref: vec![lp; n],
            probs_new: vec![1.0 / vocab as f64; n * vocab],
            vocab,
            advantage,
        }
    }

    fn no_kl() -> ObjectiveConfig {
        ObjectiveConfig {
            beta: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn ratio_examples() {
        let same = RatioInputs {
            logprob_new: vec![-1.0, -2.0],
            logprob_old: vec![-1.0, -2.0],
        };
        assert_eq!(importance_ratio(&same).unwrap(), vec![1.0, 1.0]);
        let r = importance_ratio(&RatioInputs {
            logprob_new: vec![2f64.ln() - 1.0, -4f64.ln()],
            logprob_old: vec![-1.0, 0.0],
        })
        .unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15);
        assert!((r[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ratio_saturates() {
        let r = importance_ratio(&RatioInputs {
            logprob_new: vec![0.0],
            logprob_old: vec![-100.0],
        })
        .unwrap();
        assert_eq!(r[0], MAX_LOG_RATIO.exp());
        assert!(importance_ratio(&RatioInputs {
            logprob_new: vec![0.0],
            logprob_old: vec![],
        })
        .is_err());
    }

    #[test]
    fn k3_examples() {
        assert_eq!(kl_k3(&[-1.0, -0.3], &[-1.0, -0.3]).unwrap(), 0.0);
        let v = kl_k3(&[2f64.ln() - 1.0], &[-1.0]).unwrap();
        assert!((v - (0.5 + 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.193147).abs() < 1e-6);
    }

    #[test]
    fn single_selected_token_contributes_advantage_over_n() {
        let n = 5;
        let s = uniform_sample(n, 3, 2.0);
        let mut mask = vec![false; n];
        mask[2] = true;
        let out = gcpo_loss(&[s], &[mask], &[vec![1.0; n]], &no_kl()).unwrap();
        assert!((out.surrogate - 2.0 / n as f64).abs() < 1e-15);
        assert!((out.total + 2.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let s = uniform_sample(4, 3, 1.5);
        let out = gcpo_loss(&[s], &[vec![false; 4]], &[vec![1.0; 4]], &no_kl()).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.grad_logits[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grpo_examples() {
        let zero_adv = grpo_loss(&[uniform_sample(4, 3, 0.0)], &no_kl()).unwrap();
        assert_eq!(zero_adv.surrogate, 0.0);

        let one = grpo_loss(&[uniform_sample(1, 4, 1.0)], &no_kl()).unwrap();
        assert_eq!(one.surrogate, 1.0);

        // ratio 1.5 with positive advantage: clipped branch, no surrogate gradient
        let mut s = uniform_sample(1, 4, 1.0);
        s.logprob_new[0] = s.logprob_old[0] + 1.5f64.ln();
        let out = grpo_loss(&[s], &no_kl()).unwrap();
        assert!((out.surrogate - 1.2).abs() < 1e-12);
        assert!(out.grad_logits[0].iter().all(|&g| g == 0.0));
        assert_eq!(out.clipped_fraction, 1.0);
    }

    #[test]
    fn full_mask_unit_weights_matches_grpo_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut group = Vec::new();
        for _ in 0..3 {
            let mut s = uniform_sample(6, 4, rng.gen_range(-2.0..2.0));
            for t in 0..6 {
                s.logprob_new[t] += rng.gen_range(-0.3..0.3);
                s.logprob_ref[t] += rng.gen_range(-0.3..0.3);
            }
            group.push(s);
        }
        let cfg = ObjectiveConfig::default();
        let a = grpo_loss(&group, &cfg).unwrap();
        let b = gcpo_loss(&group, &vec![vec![true; 6]; 3], &vec![vec![1.0; 6]; 3], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_positions_have_no_surrogate_gradient() {
        let mut s = uniform_sample(4, 3, 1.0);
        s.logprob_new[1] -= 0.1;
        let mask = vec![true, false, true, false];
        let out = gcpo_loss(&[s], &[mask.clone()], &[vec![1.3; 4]], &no_kl()).unwrap();
        for t in 0..4 {
            let row = &out.grad_logits[0][t * 3..(t + 1) * 3];
            assert_eq!(row.iter().all(|&g| g == 0.0), !mask[t]);
        }
    }

    #[test]
    fn kl_scope_full_counts_unselected_positions() {
        let mut s = uniform_sample(4, 3, 0.0);
        s.logprob_new[3] -= 0.5;
        let mask = vec![vec![true, false, false, false]];
        let w = vec![vec![1.0; 4]];
        let sel = gcpo_loss(&[s.clone()], &mask, &w, &ObjectiveConfig::default()).unwrap();
        assert_eq!(sel.kl, 0.0);
        let full_cfg = ObjectiveConfig {
            kl_scope: KlScope::Full,
            ..Default::default()
        };
        let full = gcpo_loss(&[s], &mask, &w, &full_cfg).unwrap();
        assert!(full.kl > 0.0);
    }

    #[test]
    fn selected_normalization_divides_by_count() {
        let s = uniform_sample(8, 3, 1.0);
        let mut mask = vec![false; 8];
        mask[0] = true;
        mask[5] = true;
        let cfg = ObjectiveConfig {
            beta: 0.0,
            normalization: Normalization::Selected,
            ..Default::default()
        };
        let out = gcpo_loss(&[s], &[mask], &[vec![1.0; 8]], &cfg).unwrap();
        assert!((out.surrogate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sign_flip_negates_surrogate_without_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ObjectiveConfig {
            clip_eps: 0.999_999,
            beta: 0.0,
            ..Default::default()
        };
        let mut s = uniform_sample(5, 3, 0.7);
        for t in 0..5 {
            s.logprob_new[t] += rng.gen_range(-0.2..0.2);
        }
        let mut neg = s.clone();
        neg.advantage = -0.7;
        let a = grpo_loss(&[s], &cfg).unwrap();
        let b = grpo_loss(&[neg], &cfg).unwrap();
        assert!((a.surrogate + b.surrogate).abs() < 1e-15);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let s = uniform_sample(4, 3, 1.0);
        assert!(gcpo_loss(&[s.clone()], &[vec![true; 3]], &[vec![1.0; 4]], &no_kl()).is_err());
        let mut bad = s;
        bad.logprob_ref.pop();
        assert!(grpo_loss(&[bad], &no_kl()).is_err());
        let cfg = ObjectiveConfig {
            clip_eps: 1.5,
            ..Default::default()
        };
        assert!(grpo_loss(&[uniform_sample(2, 2, 0.0)], &cfg).is_err());
    }
}
