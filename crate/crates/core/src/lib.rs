//! Group critical-token policy optimization on a desk-scale autoregressive
//! token-grid policy.
//!
//! The pieces, bottom up:
//!
//! - [`token_stats`]: token entropy, causal entropy-map smoothing, entropy
//!   gradients and intra-group embedding similarity.
//! - [`selection`]: initial, structural and diverse token subsets and their union.
//! - [`advantage`]: group-relative advantages and confidence-divergence weights.
//! - [`objective`]: clipped surrogate losses with analytic logit gradients.
//! - [`policy`]: the toy autoregressive policy, sampling and checkpoints.
//! - [`rewards`]: verifiable grid rewards.
//! - [`trainer`]: the update loop and metrics stream.
//! - [`analysis`]: perturbation, entropy-region and map-export studies.

pub mod advantage;
pub mod analysis;
pub mod config;
pub mod error;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod selection;
pub mod token_stats;
pub mod trainer;

pub use config::{Method, TrainConfig};
pub use error::{GcpoError, Result};
