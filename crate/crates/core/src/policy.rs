//! A small autoregressive policy over token grids.
//!
//! At position `t` the context vector is
//! `pos_embed[t] + prompt_embed[p] + mean_{j<t} token_embed[z_j]`
//! (the mean is dropped at `t = 0`), and the logits are
//! `context · out_proj + out_bias`. Every gradient is closed-form.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GcpoError, Result};
use crate::token_stats::ProbVector;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCPO";
const CHECKPOINT_VERSION: u32 = 1;
const NOISE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Shapes of the parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab: usize,
    pub seq_len: usize,
    pub prompts: usize,
    pub dim: usize,
}

/// Height and width of a token grid; tokens are generated in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_border(&self, t: usize) -> bool {
        let (y, x) = (t / self.width, t % self.width);
        y == 0 || x == 0 || y + 1 == self.height || x + 1 == self.width
    }
}

/// All learnable parameters, row-major.
///
/// The same struct doubles as a gradient accumulator and as optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    /// `vocab x dim`
    pub token_embed: Vec<f64>,
    /// `seq_len x dim`
    pub pos_embed: Vec<f64>,
    /// `prompts x dim`
    pub prompt_embed: Vec<f64>,
    /// `dim x vocab`
    pub out_proj: Vec<f64>,
    /// `vocab`
    pub out_bias: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let PolicyDims {
            vocab,
            seq_len,
            prompts,
            dim,
        } = dims;
        Self {
            dims,
            token_embed: vec![0.0; vocab * dim],
            pos_embed: vec![0.0; seq_len * dim],
            prompt_embed: vec![0.0; prompts * dim],
            out_proj: vec![0.0; dim * vocab],
            out_bias: vec![0.0; vocab],
        }
    }

    /// Embeddings drawn from `N(0, init_scale^2)`; output head zeroed so the
    /// initial policy is uniform.
    pub fn init(dims: PolicyDims, init_scale: f64, seed: u64) -> Result<Self> {
        ensure!(dims.vocab >= 2, "vocab must be at least 2");
        ensure!(dims.dim >= 2, "embedding dim must be at least 2");
        ensure!(dims.seq_len >= 1 && dims.prompts >= 1, "empty sequence or prompt set");
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p
            .token_embed
            .iter_mut()
            .chain(p.pos_embed.iter_mut())
            .chain(p.prompt_embed.iter_mut())
        {
            let z: f64 = rng.sample(StandardNormal);
            *v = init_scale * z;
        }
        Ok(p)
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.token_embed,
            &self.pos_embed,
            &self.prompt_embed,
            &self.out_proj,
            &self.out_bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.token_embed,
            &mut self.pos_embed,
            &mut self.prompt_embed,
            &mut self.out_proj,
            &mut self.out_bias,
        ]
    }

    pub const BLOCK_NAMES: [&'static str; 5] =
        ["token_embed", "pos_embed", "prompt_embed", "out_proj", "out_bias"];

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks().into_iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks_mut().into_iter().flat_map(|b| b.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    fn embed_row(block: &[f64], row: usize, dim: usize) -> &[f64] {
        &block[row * dim..(row + 1) * dim]
    }

    /// Flat little-endian checkpoint: magic, version, (V, N, P, d) as u32,
    /// then the five f64 blocks in field order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [self.dims.vocab, self.dims.seq_len, self.dims.prompts, self.dims.dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 24 {
            return Err("file shorter than header".into());
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dims = PolicyDims {
            vocab: word(8) as usize,
            seq_len: word(12) as usize,
            prompts: word(16) as usize,
            dim: word(20) as usize,
        };
        let mut p = Self::zeros(dims);
        let expected = 24 + 8 * p.num_params();
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        for (v, chunk) in p.iter_mut().zip(bytes[24..].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| GcpoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GcpoError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| GcpoError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// A sampled grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub shape: GridShape,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, tokens: Vec<usize>) -> Result<Self> {
        ensure!(
            tokens.len() == shape.len(),
            "grid {}x{} needs {} tokens, got {}",
            shape.height,
            shape.width,
            shape.len(),
            tokens.len()
        );
        Ok(Self { shape, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fraction of positions `>= from` where the two grids differ.
    pub fn hamming_fraction_from(&self, other: &TokenGrid, from: usize) -> f64 {
        let n = self.tokens.len();
        if from >= n {
            return 0.0;
        }
        let diff = self.tokens[from..]
            .iter()
            .zip(&other.tokens[from..])
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / (n - from) as f64
    }
}

/// One sampled sequence with everything recorded at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub grid: TokenGrid,
    /// Sampling distributions, row-major `n x vocab`.
    pub probs: Vec<f64>,
    pub logprob_old: Vec<f64>,
    /// Token-embedding rows of the sampled ids, row-major `n x dim`.
    pub embeddings: Vec<f64>,
    pub prompt_id: usize,
    pub seed: u64,
    pub sample_index: u64,
}

/// Generator for the draw at `(seed, sample, position)`.
///
/// Each key gets its own ChaCha stream, so resampling from any position with
/// the same key reproduces the same randomness regardless of what came before.
pub fn keyed_rng(seed: u64, sample: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sample << 24) ^ position as u64);
    rng
}

/// Incremental evaluation of contexts along a sequence.
struct ContextWalker<'a> {
    params: &'a PolicyParams,
    prompt: &'a [f64],
    prefix_sum: Vec<f64>,
}

impl<'a> ContextWalker<'a> {
    fn new(params: &'a PolicyParams, prompt_id: usize) -> Result<Self> {
        ensure!(
            prompt_id < params.dims.prompts,
            "prompt id {prompt_id} out of range (have {})",
            params.dims.prompts
        );
        let d = params.dims.dim;
        Ok(Self {
            params,
            prompt: PolicyParams::embed_row(&params.prompt_embed, prompt_id, d),
            prefix_sum: vec![0.0; d],
        })
    }

    fn context(&self, t: usize) -> Vec<f64> {
        let d = self.params.dims.dim;
        let pos = PolicyParams::embed_row(&self.params.pos_embed, t, d);
        let mut c: Vec<f64> = pos.iter().zip(self.prompt).map(|(a, b)| a + b).collect();
        if t > 0 {
            let inv = 1.0 / t as f64;
            for (ci, s) in c.iter_mut().zip(&self.prefix_sum) {
                *ci += s * inv;
            }
        }
        c
    }

    fn push(&mut self, token: usize) {
        let d = self.params.dims.dim;
        let row = PolicyParams::embed_row(&self.params.token_embed, token, d);
        for (s, e) in self.prefix_sum.iter_mut().zip(row) {
            *s += e;
        }
    }

    fn logits(&self, context: &[f64]) -> Vec<f64> {
        let v = self.params.dims.vocab;
        let mut l = self.params.out_bias.clone();
        for (a, &ca) in context.iter().enumerate() {
            let row = &self.params.out_proj[a * v..(a + 1) * v];
            for (lk, w) in l.iter_mut().zip(row) {
                *lk += ca * w;
            }
        }
        l
    }
}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    // u landed in the rounding gap above the last cumulative value
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_tokens(params: &PolicyParams, tokens: &[usize]) -> Result<()> {
    if let Some((j, z)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &z)| z >= params.dims.vocab)
    {
        return Err(GcpoError::Validation(format!(
            "token id {z} at position {j} out of range for vocab {}",
            params.dims.vocab
        )));
    }
    Ok(())
}

/// Next-token distribution at position `t` given the first `t` tokens.
pub fn forward_distribution(
    params: &PolicyParams,
    prefix: &[usize],
    t: usize,
    prompt_id: usize,
    temperature: f64,
) -> Result<ProbVector> {
    ensure!(t < params.dims.seq_len, "position {t} beyond sequence length");
    ensure!(prefix.len() == t, "prefix has {} tokens, expected {t}", prefix.len());
    ensure!(temperature > 0.0, "temperature must be positive");
    check_tokens(params, prefix)?;
    let mut walker = ContextWalker::new(params, prompt_id)?;
    for &z in prefix {
        walker.push(z);
    }
    let logp = log_softmax(&walker.logits(&walker.context(t)), temperature);
    ProbVector::new(logp.into_iter().map(f64::exp).collect())
}

/// Sample a full grid autoregressively at temperature 1.
pub fn sample_rollout(
    params: &PolicyParams,
    shape: GridShape,
    prompt_id: usize,
    seed: u64,
    sample_index: u64,
) -> Result<RolloutRecord> {
    ensure!(
        shape.len() == params.dims.seq_len,
        "grid {}x{} does not match policy sequence length {}",
        shape.height,
        shape.width,
        params.dims.seq_len
    );
    generate(params, shape, prompt_id, seed, sample_index, &[], None)
}

struct Noise {
    seed: u64,
    start: usize,
    end: usize,
    scale: f64,
}

fn generate(
    params: &PolicyParams,
    shape: GridShape,
    prompt_id: usize,
    seed: u64,
    sample_index: u64,
    fixed_prefix: &[usize],
    noise: Option<Noise>,
) -> Result<RolloutRecord> {
    let PolicyDims { vocab, dim, .. } = params.dims;
    let n = shape.len();
    let mut walker = ContextWalker::new(params, prompt_id)?;
    let mut tokens = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * vocab);
    let mut logprob_old = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n * dim);
    for t in 0..n {
        let mut logits = walker.logits(&walker.context(t));
        if let Some(nz) = noise.as_ref().filter(|nz| (nz.start..nz.end).contains(&t)) {
            let mut rng = keyed_rng(nz.seed ^ NOISE_SALT, sample_index, t);
            for l in logits.iter_mut() {
                *l += nz.scale * rng.gen_range(-1.0..=1.0);
            }
        }
        let logp = log_softmax(&logits, 1.0);
        let row: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let z = match fixed_prefix.get(t) {
            Some(&z) => z,
            None => sample_categorical(&row, keyed_rng(seed, sample_index, t).gen::<f64>()),
        };
        tokens.push(z);
        logprob_old.push(logp[z]);
        probs.extend_from_slice(&row);
        embeddings.extend_from_slice(PolicyParams::embed_row(&params.token_embed, z, dim));
        walker.push(z);
    }
    Ok(RolloutRecord {
        grid: TokenGrid { shape, tokens },
        probs,
        logprob_old,
        embeddings,
        prompt_id,
        seed,
        sample_index,
    })
}

/// Re-generate `[start, start + count)` from noised logits, then continue
/// sampling to the end with the record's own keys.
///
/// Noise is uniform in `[-noise_scale, noise_scale]` per logit, keyed by
/// `noise_seed`. Positions before `start` are copied from the record.
pub fn perturb_and_resample(
    params: &PolicyParams,
    record: &RolloutRecord,
    start: usize,
    count: usize,
    noise_scale: f64,
    noise_seed: u64,
) -> Result<TokenGrid> {
    let n = record.grid.len();
    ensure!(
        start + count <= n,
        "perturbation range [{start}, {}) exceeds sequence length {n}",
        start + count
    );
    ensure!(noise_scale >= 0.0 && noise_scale.is_finite(), "noise_scale must be >= 0");
    let out = generate(
        params,
        record.grid.shape,
        record.prompt_id,
        record.seed,
        record.sample_index,
        &record.grid.tokens[..start],
        Some(Noise {
            seed: noise_seed,
            start,
            end: start + count,
            scale: noise_scale,
        }),
    )?;
    Ok(out.grid)
}

/// Teacher-forced forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub tokens: Vec<usize>,
    pub prompt_id: usize,
    /// Row-major `n x dim`.
    pub contexts: Vec<f64>,
    /// Row-major `n x vocab`.
    pub probs: Vec<f64>,
    pub logprobs: Vec<f64>,
}

/// Log-probabilities of the grid's tokens under `params`, with the cache
/// needed to back-propagate into every parameter block.
pub fn logprob_and_grad(params: &PolicyParams, grid: &TokenGrid, prompt_id: usize) -> Result<TeacherForced> {
    ensure!(
        grid.len() == params.dims.seq_len,
        "grid length {} does not match policy sequence length {}",
        grid.len(),
        params.dims.seq_len
    );
    check_tokens(params, &grid.tokens)?;
    let PolicyDims { vocab, dim, .. } = params.dims;
    let n = grid.len();
    let mut walker = ContextWalker::new(params, prompt_id)?;
    let mut contexts = Vec::with_capacity(n * dim);
    let mut probs = Vec::with_capacity(n * vocab);
    let mut logprobs = Vec::with_capacity(n);
    for (t, &z) in grid.tokens.iter().enumerate() {
        let c = walker.context(t);
        let logp = log_softmax(&walker.logits(&c), 1.0);
        probs.extend(logp.iter().map(|v| v.exp()));
        logprobs.push(logp[z]);
        contexts.extend_from_slice(&c);
        walker.push(z);
    }
    Ok(TeacherForced {
        tokens: grid.tokens.clone(),
        prompt_id,
        contexts,
        probs,
        logprobs,
    })
}

impl TeacherForced {
    /// Accumulate parameter gradients given `d loss / d logits` (`n x vocab`).
    pub fn backward_logits(&self, params: &PolicyParams, grad_logits: &[f64], grads: &mut PolicyParams) {
        let PolicyDims { vocab, dim, .. } = params.dims;
        let n = self.tokens.len();
        debug_assert_eq!(grad_logits.len(), n * vocab);
        let mut d_context = vec![0.0; n * dim];
        for t in 0..n {
            let g = &grad_logits[t * vocab..(t + 1) * vocab];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let c = &self.contexts[t * dim..(t + 1) * dim];
            for (b, gk) in grads.out_bias.iter_mut().zip(g) {
                *b += gk;
            }
            let dc = &mut d_context[t * dim..(t + 1) * dim];
            for a in 0..dim {
                let w_row = &params.out_proj[a * vocab..(a + 1) * vocab];
                let gw_row = &mut grads.out_proj[a * vocab..(a + 1) * vocab];
                let mut acc = 0.0;
                for k in 0..vocab {
                    gw_row[k] += c[a] * g[k];
                    acc += w_row[k] * g[k];
                }
                dc[a] = acc;
            }
            let prompt_row = &mut grads.prompt_embed[self.prompt_id * dim..(self.prompt_id + 1) * dim];
            for (p, d) in prompt_row.iter_mut().zip(dc.iter()) {
                *p += d;
            }
            for (p, d) in grads.pos_embed[t * dim..(t + 1) * dim].iter_mut().zip(dc.iter()) {
                *p += d;
            }
        }
        // token z_j feeds every later context with weight 1/t
        let mut suffix = vec![0.0; dim];
        for j in (0..n.saturating_sub(1)).rev() {
            let t = j + 1;
            let inv = 1.0 / t as f64;
            for (s, d) in suffix.iter_mut().zip(&d_context[t * dim..(t + 1) * dim]) {
                *s += d * inv;
            }
            let z = self.tokens[j];
            for (e, s) in grads.token_embed[z * dim..(z + 1) * dim].iter_mut().zip(&suffix) {
                *e += s;
            }
        }
    }

    /// Accumulate parameter gradients given `d loss / d logprob[t]` per position.
    pub fn backward_logprobs(&self, params: &PolicyParams, upstream: &[f64], grads: &mut PolicyParams) {
        let vocab = params.dims.vocab;
        let mut gl = vec![0.0; self.tokens.len() * vocab];
        for (t, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            for k in 0..vocab {
                gl[t * vocab + k] = -u * self.probs[t * vocab + k];
            }
            gl[t * vocab + self.tokens[t]] += u;
        }
        self.backward_logits(params, &gl, grads);
    }
}
