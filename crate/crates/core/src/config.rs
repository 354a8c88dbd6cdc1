//! Run configuration. Unknown keys are rejected at every level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::{WeightMode, DEFAULT_STD_FLOOR};
use crate::error::{GcpoError, Result};
use crate::objective::ObjectiveConfig;
use crate::policy::{GridShape, PolicyDims};
use crate::rewards::RewardSpec;
use crate::selection::SelectionBudget;

/// Which tokens receive the surrogate, and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Critical-token mask with dynamic advantage weights.
    #[default]
    Gcpo,
    /// Every token, unit weights.
    GrpoFull,
    /// A uniformly random mask with the same per-sample size as the critical mask.
    GrpoRandomMask,
    /// The complement of the critical mask.
    GrpoOtherTokens,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Gcpo,
        Method::GrpoFull,
        Method::GrpoRandomMask,
        Method::GrpoOtherTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gcpo => "gcpo",
            Method::GrpoFull => "grpo_full",
            Method::GrpoRandomMask => "grpo_random_mask",
            Method::GrpoOtherTokens => "grpo_other_tokens",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub eps_w: f64,
    pub mode: WeightMode,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            eps_w: 0.5,
            mode: WeightMode::Offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub dim: usize,
    /// Standard deviation of the initial embeddings.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            height: 6,
            width: 6,
            vocab: 8,
            dim: 16,
            init_scale: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn shape(&self) -> GridShape {
        GridShape::new(self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub method: Method,
    pub group_size: usize,
    pub learning_rate: f64,
    pub inner_epochs: usize,
    pub grad_norm_clip: f64,
    pub std_floor: f64,
    pub objective: ObjectiveConfig,
    pub weights: WeightConfig,
    pub selection: SelectionBudget,
    pub policy: PolicyConfig,
    /// One reward per prompt; the batch holds one group per prompt.
    pub tasks: Vec<RewardSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 300,
            method: Method::Gcpo,
            group_size: 8,
            learning_rate: 1e-3,
            inner_epochs: 1,
            grad_norm_clip: 1.0,
            std_floor: DEFAULT_STD_FLOOR,
            objective: ObjectiveConfig::default(),
            weights: WeightConfig::default(),
            selection: SelectionBudget::default(),
            policy: PolicyConfig::default(),
            tasks: vec![
                RewardSpec::BorderStructure {
                    border: 1,
                    interior: 2,
                },
                RewardSpec::BorderStructure {
                    border: 3,
                    interior: 4,
                },
            ],
        }
    }
}

impl TrainConfig {
    /// Base configuration of the selection ablation: defaults with a single
    /// border_structure prompt.
    pub fn ablation() -> Self {
        Self {
            tasks: vec![RewardSpec::BorderStructure {
                border: 1,
                interior: 2,
            }],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GcpoError::Config(msg));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.inner_epochs < 1 {
            return bad("inner_epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.grad_norm_clip > 0.0) {
            return bad(format!("grad_norm_clip must be > 0, got {}", self.grad_norm_clip));
        }
        if !(self.std_floor > 0.0) {
            return bad(format!("std_floor must be > 0, got {}", self.std_floor));
        }
        if !(self.weights.eps_w > 0.0 && self.weights.eps_w.is_finite()) {
            return bad(format!("weights.eps_w must be > 0, got {}", self.weights.eps_w));
        }
        let p = &self.policy;
        if p.height < 2 || p.width < 2 {
            return bad(format!("policy grid must be at least 2x2, got {}x{}", p.height, p.width));
        }
        if p.vocab < 2 || p.dim < 2 {
            return bad("policy.vocab and policy.dim must be >= 2".into());
        }
        if !(p.init_scale > 0.0 && p.init_scale.is_finite()) {
            return bad(format!("policy.init_scale must be > 0, got {}", p.init_scale));
        }
        if self.tasks.is_empty() {
            return bad("tasks must list at least one reward".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate(p.shape(), p.vocab)
                .map_err(|e| GcpoError::Config(format!("tasks[{i}]: {e}")))?;
        }
        self.objective.validate()?;
        self.selection.validate()?;
        Ok(())
    }

    pub fn policy_dims(&self) -> PolicyDims {
        PolicyDims {
            vocab: self.policy.vocab,
            seq_len: self.policy.height * self.policy.width,
            prompts: self.tasks.len(),
            dim: self.policy.dim,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
