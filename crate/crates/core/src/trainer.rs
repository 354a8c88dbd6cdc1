//! The training loop: rollouts, rewards, critical-token selection, weights,
//! loss, clipped Adam update.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::advantage::{dynamic_weights, group_advantage, summary, WeightMode};
use crate::config::{Method, TrainConfig};
use crate::error::{GcpoError, Result};
use crate::objective::{gcpo_loss, SampleInputs};
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::{keyed_rng, logprob_and_grad, sample_rollout, GridShape, PolicyParams, RolloutRecord};
use crate::selection::{select_group, SelectionMask};

const RANDOM_MASK_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// One line of the metrics stream, emitted after every optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub effective_selection_ratio: f64,
    pub mean_effective_weight: f64,
    pub effective_weight_min: f64,
    pub effective_weight_max: f64,
    pub raw_weight_mean: f64,
    pub raw_weight_min: f64,
    pub raw_weight_max: f64,
    pub mean_entropy: f64,
    pub clipped_fraction: f64,
    /// `max |ratio - 1|` over contributing and non-contributing tokens.
    pub max_ratio_deviation: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    /// Frozen initial policy used for the KL and the confidence divergence.
    pub reference: PolicyParams,
    pub optimizer: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = PolicyParams::init(cfg.policy_dims(), cfg.policy.init_scale, cfg.seed)?;
        Ok(Self {
            reference: params.clone(),
            optimizer: Adam::new(&params, cfg.learning_rate),
            params,
            step: 0,
        })
    }
}

/// Everything fixed for a sampled batch across inner epochs.
struct Batch {
    rollouts: Vec<Vec<RolloutRecord>>,
    rewards: Vec<Vec<f64>>,
    advantages: Vec<Vec<f64>>,
    masks: Vec<Vec<Vec<bool>>>,
    ref_logprobs: Vec<Vec<Vec<f64>>>,
    mean_entropy: f64,
    selection_ratio: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    shape: GridShape,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Ok(Self {
            shape: cfg.policy.shape(),
            cfg,
            state,
            pool: None,
        })
    }

    /// Run rollouts and per-sample work on `threads` workers. Results are
    /// reduced in a fixed order, so output does not depend on the count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| GcpoError::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    fn map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
        match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.par_iter().map(&f).collect())
            }
            None => items.iter().map(f).collect(),
        }
    }

    fn weight_mode(&self) -> WeightMode {
        match self.cfg.method {
            Method::Gcpo => self.cfg.weights.mode,
            _ => WeightMode::Off,
        }
    }

    fn sample_batch(&self) -> Result<Batch> {
        let cfg = &self.cfg;
        let g = cfg.group_size;
        let prompts = cfg.tasks.len();
        let params = &self.state.params;
        let step = self.state.step as u64;

        let keys: Vec<(usize, u64)> = (0..prompts)
            .flat_map(|p| (0..g).map(move |i| (p, (step * prompts as u64 + p as u64) * g as u64 + i as u64)))
            .collect();
        let flat = self.map(&keys, |&(p, idx)| sample_rollout(params, self.shape, p, cfg.seed, idx));
        let flat: Vec<RolloutRecord> = flat.into_iter().collect::<Result<_>>()?;
        let rollouts: Vec<Vec<RolloutRecord>> = flat.chunks(g).map(<[_]>::to_vec).collect();

        let mut rewards = Vec::with_capacity(prompts);
        let mut advantages = Vec::with_capacity(prompts);
        let mut masks = Vec::with_capacity(prompts);
        let mut ratio_sum = 0.0;
        let mut entropy_sum = 0.0;
        for (p, group) in rollouts.iter().enumerate() {
            let r = group
                .iter()
                .map(|rec| cfg.tasks[p].evaluate(&rec.grid))
                .collect::<Result<Vec<f64>>>()?;
            advantages.push(group_advantage(&r, cfg.std_floor)?);
            rewards.push(r);

            let selection = select_group(group, &cfg.selection)?;
            entropy_sum += selection.entropy_maps.iter().map(|m| m.mean()).sum::<f64>();
            let group_masks: Vec<SelectionMask> = match cfg.method {
                Method::Gcpo => selection.masks,
                Method::GrpoFull => vec![SelectionMask::full(self.shape.len()); g],
                Method::GrpoOtherTokens => selection.masks.iter().map(SelectionMask::complement).collect(),
                Method::GrpoRandomMask => selection
                    .masks
                    .iter()
                    .zip(group)
                    .map(|(m, rec)| self.random_mask(m.count(), rec.sample_index))
                    .collect(),
            };
            ratio_sum += group_masks.iter().map(SelectionMask::ratio).sum::<f64>();
            masks.push(group_masks.into_iter().map(|m| m.selected).collect());
        }
        debug_assert!(entropy_sum.is_finite());

        let reference = &self.state.reference;
        let ref_flat = self.map(&flat, |rec| logprob_and_grad(reference, &rec.grid, rec.prompt_id));
        let ref_flat: Vec<Vec<f64>> = ref_flat
            .into_iter()
            .map(|tf| tf.map(|t| t.logprobs))
            .collect::<Result<_>>()?;
        let ref_logprobs = ref_flat.chunks(g).map(<[_]>::to_vec).collect();

        let total = (prompts * g) as f64;
        Ok(Batch {
            rollouts,
            rewards,
            advantages,
            masks,
            ref_logprobs,
            mean_entropy: entropy_sum / total,
            selection_ratio: ratio_sum / total,
        })
    }

    fn random_mask(&self, count: usize, sample_index: u64) -> SelectionMask {
        let n = self.shape.len();
        let mut rng = keyed_rng(self.cfg.seed ^ RANDOM_MASK_SALT, sample_index, 0);
        let mut selected = vec![false; n];
        for i in sample_indices(&mut rng, n, count.min(n)).iter() {
            selected[i] = true;
        }
        SelectionMask::from_selected(selected)
    }

    /// One sampled batch: `inner_epochs` optimizer updates, one record each.
    pub fn train_step(&mut self) -> Result<Vec<MetricsRecord>> {
        let batch = self.sample_batch()?;
        let mut records = Vec::with_capacity(self.cfg.inner_epochs);
        for epoch in 0..self.cfg.inner_epochs {
            records.push(self.update(&batch, epoch)?);
        }
        self.state.step += 1;
        Ok(records)
    }

    fn update(&mut self, batch: &Batch, epoch: usize) -> Result<MetricsRecord> {
        let cfg = &self.cfg;
        let params = &self.state.params;
        let prompts = batch.rollouts.len();
        let g = cfg.group_size;
        let mode = self.weight_mode();

        let flat: Vec<&RolloutRecord> = batch.rollouts.iter().flatten().collect();
        let forwards = self.map(&flat, |rec| logprob_and_grad(params, &rec.grid, rec.prompt_id));
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

        let mut grads = PolicyParams::zeros(params.dims);
        let (mut loss, mut surrogate, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0);
        let mut raw_all = Vec::new();
        let mut eff_selected = Vec::new();
        let mut max_dev: f64 = 0.0;
        let mut per_sample_grads = Vec::with_capacity(flat.len());

        for p in 0..prompts {
            let mut inputs = Vec::with_capacity(g);
            let mut weights = Vec::with_capacity(g);
            for i in 0..g {
                let rec = &batch.rollouts[p][i];
                let tf = &forwards[p * g + i];
                let w = dynamic_weights(&tf.logprobs, &batch.ref_logprobs[p][i], cfg.weights.eps_w, mode)?;
                for (t, &sel) in batch.masks[p][i].iter().enumerate() {
                    if sel {
                        eff_selected.push(w.effective[t]);
                    }
                }
                for (new, old) in tf.logprobs.iter().zip(&rec.logprob_old) {
                    max_dev = max_dev.max(((new - old).exp() - 1.0).abs());
                }
                raw_all.extend_from_slice(&w.raw);
                weights.push(w.effective);
                inputs.push(SampleInputs {
                    tokens: rec.grid.tokens.clone(),
                    logprob_new: tf.logprobs.clone(),
                    logprob_old: rec.logprob_old.clone(),
                    logprob_ref: batch.ref_logprobs[p][i].clone(),
                    probs_new: tf.probs.clone(),
                    vocab: params.dims.vocab,
                    advantage: batch.advantages[p][i],
                });
            }
            let out = gcpo_loss(&inputs, &batch.masks[p], &weights, &cfg.objective)?;
            loss += out.total;
            surrogate += out.surrogate;
            kl += out.kl;
            clipped += out.clipped_fraction;
            for (i, gl) in out.grad_logits.into_iter().enumerate() {
                per_sample_grads.push((p * g + i, gl));
            }
        }

        let partials = self.map(&per_sample_grads, |(idx, gl)| {
            let mut acc = PolicyParams::zeros(params.dims);
            forwards[*idx].backward_logits(params, gl, &mut acc);
            acc
        });
        for part in &partials {
            grads.add_scaled(part, 1.0);
        }
        let inv_p = 1.0 / prompts as f64;
        grads.scale(inv_p);
        loss *= inv_p;

        if !loss.is_finite() || !grads.is_finite() {
            let what = if loss.is_finite() { "gradient" } else { "loss" };
            let dump = serde_json::json!({
                "step": self.state.step,
                "epoch": epoch,
                "loss": loss.to_string(),
                "rewards": batch.rewards,
                "advantages": batch.advantages,
                "tokens": batch.rollouts.iter().map(|grp| grp.iter().map(|r| r.grid.tokens.clone()).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "logprob_new": forwards.iter().map(|f| f.logprobs.iter().map(|v| v.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            return Err(GcpoError::NonFinite {
                what: what.into(),
                step: self.state.step,
                dump: dump.to_string(),
            });
        }

        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_norm_clip);
        self.state.optimizer.step(&mut self.state.params, &grads);

        let total = (prompts * g) as f64;
        let mean_reward = batch.rewards.iter().flatten().sum::<f64>() / total;
        let (raw_mean, raw_min, raw_max) = summary(&raw_all);
        let (eff_mean, eff_min, eff_max) = summary(&eff_selected);
        Ok(MetricsRecord {
            step: self.state.step,
            epoch,
            mean_reward,
            loss,
            surrogate: surrogate * inv_p,
            kl: kl * inv_p,
            effective_selection_ratio: batch.selection_ratio,
            mean_effective_weight: eff_mean,
            effective_weight_min: eff_min,
            effective_weight_max: eff_max,
            raw_weight_mean: raw_mean,
            raw_weight_min: raw_min,
            raw_weight_max: raw_max,
            mean_entropy: batch.mean_entropy,
            clipped_fraction: clipped * inv_p,
            max_ratio_deviation: max_dev,
            grad_norm,
        })
    }

    /// Run every configured step, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.state.step < self.cfg.steps {
            for rec in self.train_step()? {
                sink(&rec)?;
            }
        }
        Ok(())
    }
}

/// Files produced by [`run_training`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Train to completion, writing `metrics.jsonl` and `checkpoint.bin` into `dir`.
pub fn run_training(cfg: &TrainConfig, dir: &Path, threads: usize) -> Result<RunOutputs> {
    std::fs::create_dir_all(dir).map_err(|e| GcpoError::io(dir, e))?;
    let metrics = dir.join(METRICS_FILE);
    let file = File::create(&metrics).map_err(|e| GcpoError::io(&metrics, e))?;
    let mut out = BufWriter::new(file);
    let mut trainer = Trainer::new(cfg.clone())?.with_threads(threads)?;
    let mut records = Vec::with_capacity(cfg.steps);
    trainer.run(|rec| {
        let line = serde_json::to_string(rec).expect("metrics serialize");
        writeln!(out, "{line}").map_err(|e| GcpoError::io(&metrics, e))?;
        records.push(rec.clone());
        Ok(())
    })?;
    out.flush().map_err(|e| GcpoError::io(&metrics, e))?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    trainer.state.params.save(&checkpoint)?;
    Ok(RunOutputs {
        metrics,
        checkpoint,
        records,
    })
}
