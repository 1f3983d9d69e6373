//! Minimal decoder-only transformer with exposed per-layer hidden states,
//! exact reverse-mode gradients, and seeded top-k / top-p sampling.
//!
//! Blocks are pre-norm residual (RMS norm, causal multi-head attention, GELU
//! MLP). The block outputs are the distillable hidden states; the embedding
//! output is layer 0 and never distilled. Losses inject gradients at any
//! subset of logit positions and per-layer hidden positions, and `backward`
//! propagates them to every parameter.

use crate::data::TokenizedSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

const NORM_EPS: f64 = 1e-6;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    OverlongSequence { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("prefix must be non-empty")]
    EmptyPrefix,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("checkpoint version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error("checkpoint tensor {name:?} has length {got}, expected {want}")]
    ShapeMismatch {
        name: String,
        got: usize,
        want: usize,
    },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture descriptor. `hidden_dim` must be divisible by `heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0
            || self.hidden_dim == 0
            || self.heads == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(ModelError::InvalidSpec("all dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidSpec(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// y = M^T x
    fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }

    /// M += y (outer) x
    fn outer_acc(&mut self, y: &[f64], x: &[f64]) {
        for (r, &yr) in y.iter().enumerate() {
            for (cell, &xc) in self.row_mut(r).iter_mut().zip(x) {
                *cell += yr * xc;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn_norm: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub mlp_norm: Vec<f64>,
    pub w_up: Mat,
    pub w_down: Mat,
}

/// All trainable tensors of one model, keyed by stable names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_embed: Mat,
    pub pos_embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Vec<f64>,
    pub lm_head: Mat,
}

impl Params {
    pub fn init(spec: &ModelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.hidden_dim;
        let h = spec.mlp_dim();
        let std = 0.02;
        let blocks = (0..spec.layers)
            .map(|_| BlockParams {
                attn_norm: vec![1.0; d],
                wq: Mat::randn(d, d, std, &mut rng),
                wk: Mat::randn(d, d, std, &mut rng),
                wv: Mat::randn(d, d, std, &mut rng),
                wo: Mat::randn(d, d, std, &mut rng),
                mlp_norm: vec![1.0; d],
                w_up: Mat::randn(h, d, std, &mut rng),
                w_down: Mat::randn(d, h, std, &mut rng),
            })
            .collect();
        Self {
            tok_embed: Mat::randn(spec.vocab_size, d, std, &mut rng),
            pos_embed: Mat::randn(spec.max_seq, d, std, &mut rng),
            blocks,
            final_norm: vec![1.0; d],
            lm_head: Mat::randn(spec.vocab_size, d, std, &mut rng),
        }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.hidden_dim;
        let h = spec.mlp_dim();
        Self {
            tok_embed: Mat::zeros(spec.vocab_size, d),
            pos_embed: Mat::zeros(spec.max_seq, d),
            blocks: (0..spec.layers)
                .map(|_| BlockParams {
                    attn_norm: vec![0.0; d],
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    mlp_norm: vec![0.0; d],
                    w_up: Mat::zeros(h, d),
                    w_down: Mat::zeros(d, h),
                })
                .collect(),
            final_norm: vec![0.0; d],
            lm_head: Mat::zeros(spec.vocab_size, d),
        }
    }

    /// Flat named views in a fixed order shared by all instances of a spec.
    pub fn named(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_embed".into(), &self.tok_embed.data),
            ("pos_embed".into(), &self.pos_embed.data),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.attn_norm"), &b.attn_norm));
            out.push((format!("block{i}.wq"), &b.wq.data));
            out.push((format!("block{i}.wk"), &b.wk.data));
            out.push((format!("block{i}.wv"), &b.wv.data));
            out.push((format!("block{i}.wo"), &b.wo.data));
            out.push((format!("block{i}.mlp_norm"), &b.mlp_norm));
            out.push((format!("block{i}.w_up"), &b.w_up.data));
            out.push((format!("block{i}.w_down"), &b.w_down.data));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head.data));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_embed".into(), &mut self.tok_embed.data),
            ("pos_embed".into(), &mut self.pos_embed.data),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.attn_norm"), &mut b.attn_norm));
            out.push((format!("block{i}.wq"), &mut b.wq.data));
            out.push((format!("block{i}.wk"), &mut b.wk.data));
            out.push((format!("block{i}.wv"), &mut b.wv.data));
            out.push((format!("block{i}.wo"), &mut b.wo.data));
            out.push((format!("block{i}.mlp_norm"), &mut b.mlp_norm));
            out.push((format!("block{i}.w_up"), &mut b.w_up.data));
            out.push((format!("block{i}.w_down"), &mut b.w_down.data));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head.data));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    /// self += other * c, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, c: f64) {
        let theirs = other.named();
        for ((_, mine), (_, them)) in self.named_mut().into_iter().zip(theirs) {
            for (m, t) in mine.iter_mut().zip(them.iter()) {
                *m += c * t;
            }
        }
    }

    pub fn l1_distance(&self, other: &Params) -> f64 {
        let theirs = other.named();
        self.named()
            .iter()
            .zip(theirs)
            .map(|((_, a), (_, b))| {
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            })
            .sum()
    }
}

/// Parameter container plus architecture; `frozen` marks teacher/snapshot
/// models whose tensors the optimizer must never touch.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub frozen: bool,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        Ok(Self {
            params: Params::init(&spec),
            spec,
            frozen: false,
        })
    }

    /// Deep, frozen copy; later updates to the source leave it untouched.
    pub fn snapshot(&self) -> Model {
        Model {
            spec: self.spec,
            params: self.params.clone(),
            frozen: true,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.spec.max_seq {
            return Err(ModelError::OverlongSequence {
                len: tokens.len(),
                max: self.spec.max_seq,
            });
        }
        for &t in tokens {
            if t as usize >= self.spec.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab: self.spec.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Teacher-forced forward over a tokenized sample. Logits are produced
    /// exactly at the positions that predict an output token; hidden states
    /// are returned for every layer and position.
    pub fn forward(&self, sample: &TokenizedSample) -> Result<ForwardTrace, ModelError> {
        let mask = prediction_mask(sample);
        let (trace, _) = self.run(&sample.tokens, &mask, false)?;
        Ok(trace)
    }

    /// Forward keeping the activation cache needed by [`Model::backward`].
    pub fn forward_cached(
        &self,
        sample: &TokenizedSample,
    ) -> Result<(ForwardTrace, Cache), ModelError> {
        let mask = prediction_mask(sample);
        let (trace, cache) = self.run(&sample.tokens, &mask, true)?;
        Ok((trace, cache.expect("cache requested")))
    }

    /// Logits of the next-token distribution after the last prefix token.
    pub fn logits_at_last(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let mut mask = vec![false; prefix.len()];
        *mask.last_mut().unwrap() = true;
        let (trace, _) = self.run(prefix, &mask, false)?;
        Ok(trace.logits.last().unwrap().clone().unwrap())
    }

    #[allow(clippy::needless_range_loop)]
    fn run(
        &self,
        tokens: &[u32],
        logit_mask: &[bool],
        want_cache: bool,
    ) -> Result<(ForwardTrace, Option<Cache>), ModelError> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let d = self.spec.hidden_dim;
        let heads = self.spec.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let embed: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                self.params
                    .tok_embed
                    .row(id as usize)
                    .iter()
                    .zip(self.params.pos_embed.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();

        let mut x = embed;
        let mut hidden = Vec::with_capacity(self.spec.layers);
        let mut layer_caches = Vec::new();

        for block in &self.params.blocks {
            let x_in = x;
            let mut normed1 = Vec::with_capacity(t_len);
            let mut rms_inv1 = Vec::with_capacity(t_len);
            for xi in &x_in {
                let (n, r) = rmsnorm(xi, &block.attn_norm);
                normed1.push(n);
                rms_inv1.push(r);
            }
            let q: Vec<Vec<f64>> = normed1.iter().map(|n| block.wq.matvec(n)).collect();
            let k: Vec<Vec<f64>> = normed1.iter().map(|n| block.wk.matvec(n)).collect();
            let v: Vec<Vec<f64>> = normed1.iter().map(|n| block.wv.matvec(n)).collect();

            // att[h][t] holds softmax weights over source positions 0..=t.
            let mut att: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_len); heads];
            let mut ctx: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
            for h in 0..heads {
                let lo = h * hd;
                let hi = lo + hd;
                for t in 0..t_len {
                    let qt = &q[t][lo..hi];
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| {
                            qt.iter()
                                .zip(&k[s][lo..hi])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let weights = crate::divergence::softmax(&scores);
                    for (s, &w) in weights.iter().enumerate() {
                        for (c, vv) in ctx[t][lo..hi].iter_mut().zip(&v[s][lo..hi]) {
                            *c += w * vv;
                        }
                    }
                    att[h].push(weights);
                }
            }
            let attn_out: Vec<Vec<f64>> = ctx.iter().map(|c| block.wo.matvec(c)).collect();
            let x_mid: Vec<Vec<f64>> = x_in
                .iter()
                .zip(&attn_out)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
                .collect();

            let mut normed2 = Vec::with_capacity(t_len);
            let mut rms_inv2 = Vec::with_capacity(t_len);
            for xi in &x_mid {
                let (n, r) = rmsnorm(xi, &block.mlp_norm);
                normed2.push(n);
                rms_inv2.push(r);
            }
            let mlp_pre: Vec<Vec<f64>> = normed2.iter().map(|n| block.w_up.matvec(n)).collect();
            let mlp_act: Vec<Vec<f64>> = mlp_pre
                .iter()
                .map(|u| u.iter().map(|&z| gelu(z)).collect())
                .collect();
            let x_out: Vec<Vec<f64>> = x_mid
                .iter()
                .zip(&mlp_act)
                .map(|(xm, act)| {
                    let down = block.w_down.matvec(act);
                    xm.iter().zip(&down).map(|(a, b)| a + b).collect()
                })
                .collect();

            hidden.push(x_out.clone());
            if want_cache {
                layer_caches.push(LayerCache {
                    x_in,
                    normed1,
                    rms_inv1,
                    q,
                    k,
                    v,
                    att,
                    ctx,
                    x_mid,
                    normed2,
                    rms_inv2,
                    mlp_pre,
                    mlp_act,
                });
            }
            x = x_out;
        }

        let mut final_normed = Vec::with_capacity(t_len);
        let mut final_rms_inv = Vec::with_capacity(t_len);
        for xi in &x {
            let (n, r) = rmsnorm(xi, &self.params.final_norm);
            final_normed.push(n);
            final_rms_inv.push(r);
        }
        let logits: Vec<Option<Vec<f64>>> = (0..t_len)
            .map(|t| logit_mask[t].then(|| self.params.lm_head.matvec(&final_normed[t])))
            .collect();

        let trace = ForwardTrace { hidden, logits };
        let cache = want_cache.then(|| Cache {
            tokens: tokens.to_vec(),
            layers: layer_caches,
            final_input: x,
            final_normed,
            final_rms_inv,
        });
        Ok((trace, cache))
    }

    /// Exact reverse-mode gradients of a scalar loss given its gradients
    /// w.r.t. the produced logits and the per-layer hidden states.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, cache: &Cache, upstream: &UpstreamGrads) -> Params {
        let t_len = cache.tokens.len();
        let d = self.spec.hidden_dim;
        let heads = self.spec.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut grads = Params::zeros(&self.spec);

        // Logits -> final norm input.
        let mut d_x: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            if let Some(d_logits) = &upstream.d_logits[t] {
                grads.lm_head.outer_acc(d_logits, &cache.final_normed[t]);
                let d_normed = self.params.lm_head.matvec_t(d_logits);
                rmsnorm_backward(
                    &cache.final_input[t],
                    &self.params.final_norm,
                    cache.final_rms_inv[t],
                    &d_normed,
                    &mut d_x[t],
                    &mut grads.final_norm,
                );
            }
        }

        for l in (0..self.spec.layers).rev() {
            // Injection at this block's output (the distilled hidden state).
            for t in 0..t_len {
                for (acc, &g) in d_x[t].iter_mut().zip(&upstream.d_hidden[l][t]) {
                    *acc += g;
                }
            }
            let lc = &cache.layers[l];
            let block = &self.params.blocks[l];
            let g = &mut grads.blocks[l];

            // MLP branch: x_out = x_mid + w_down * gelu(w_up * normed2).
            let mut d_x_mid: Vec<Vec<f64>> = d_x.clone();
            for t in 0..t_len {
                let d_out = &d_x[t];
                g.w_down.outer_acc(d_out, &lc.mlp_act[t]);
                let d_act = block.w_down.matvec_t(d_out);
                let d_pre: Vec<f64> = d_act
                    .iter()
                    .zip(&lc.mlp_pre[t])
                    .map(|(da, &z)| da * gelu_grad(z))
                    .collect();
                g.w_up.outer_acc(&d_pre, &lc.normed2[t]);
                let d_normed2 = block.w_up.matvec_t(&d_pre);
                rmsnorm_backward(
                    &lc.x_mid[t],
                    &block.mlp_norm,
                    lc.rms_inv2[t],
                    &d_normed2,
                    &mut d_x_mid[t],
                    &mut g.mlp_norm,
                );
            }

            // Attention branch: x_mid = x_in + wo * ctx.
            let mut d_ctx: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                g.wo.outer_acc(&d_x_mid[t], &lc.ctx[t]);
                d_ctx[t] = block.wo.matvec_t(&d_x_mid[t]);
            }
            let mut d_q: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
            let mut d_k: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
            let mut d_v: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
            for h in 0..heads {
                let lo = h * hd;
                let hi = lo + hd;
                for t in 0..t_len {
                    let weights = &lc.att[h][t];
                    let d_ctx_t = &d_ctx[t][lo..hi];
                    let mut d_weights = vec![0.0; t + 1];
                    for s in 0..=t {
                        d_weights[s] = d_ctx_t
                            .iter()
                            .zip(&lc.v[s][lo..hi])
                            .map(|(a, b)| a * b)
                            .sum();
                        for (dv, &dc) in d_v[s][lo..hi].iter_mut().zip(d_ctx_t) {
                            *dv += weights[s] * dc;
                        }
                    }
                    let d_scores = crate::divergence::softmax_backward(weights, &d_weights);
                    for s in 0..=t {
                        let ds = d_scores[s] * scale;
                        for (dq, &kk) in d_q[t][lo..hi].iter_mut().zip(&lc.k[s][lo..hi]) {
                            *dq += ds * kk;
                        }
                        for (dk, &qq) in d_k[s][lo..hi].iter_mut().zip(&lc.q[t][lo..hi]) {
                            *dk += ds * qq;
                        }
                    }
                }
            }
            let mut d_x_in: Vec<Vec<f64>> = d_x_mid;
            for t in 0..t_len {
                g.wq.outer_acc(&d_q[t], &lc.normed1[t]);
                g.wk.outer_acc(&d_k[t], &lc.normed1[t]);
                g.wv.outer_acc(&d_v[t], &lc.normed1[t]);
                let mut d_normed1 = block.wq.matvec_t(&d_q[t]);
                for (a, b) in d_normed1.iter_mut().zip(block.wk.matvec_t(&d_k[t])) {
                    *a += b;
                }
                for (a, b) in d_normed1.iter_mut().zip(block.wv.matvec_t(&d_v[t])) {
                    *a += b;
                }
                rmsnorm_backward(
                    &lc.x_in[t],
                    &block.attn_norm,
                    lc.rms_inv1[t],
                    &d_normed1,
                    &mut d_x_in[t],
                    &mut g.attn_norm,
                );
            }
            d_x = d_x_in;
        }

        for (t, &id) in cache.tokens.iter().enumerate() {
            for (cell, &g) in grads
                .tok_embed
                .row_mut(id as usize)
                .iter_mut()
                .zip(&d_x[t])
            {
                *cell += g;
            }
            for (cell, &g) in grads.pos_embed.row_mut(t).iter_mut().zip(&d_x[t]) {
                *cell += g;
            }
        }
        grads
    }
}

/// Per-layer, per-position hidden states plus logits where prediction was
/// requested.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// hidden[l][t]: output of block l+1 at position t.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// logits[t] is Some only where a next-token prediction is requested.
    pub logits: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn top_layer(&self) -> &Vec<Vec<f64>> {
        self.hidden.last().expect("at least one layer")
    }
}

/// Activation cache for one forward pass; consumed by [`Model::backward`].
pub struct Cache {
    pub tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    final_input: Vec<Vec<f64>>,
    final_normed: Vec<Vec<f64>>,
    final_rms_inv: Vec<f64>,
}

struct LayerCache {
    x_in: Vec<Vec<f64>>,
    normed1: Vec<Vec<f64>>,
    rms_inv1: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    att: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    normed2: Vec<Vec<f64>>,
    rms_inv2: Vec<f64>,
    mlp_pre: Vec<Vec<f64>>,
    mlp_act: Vec<Vec<f64>>,
}

/// Gradients injected by the loss: per-position logit gradients and
/// per-layer, per-position hidden-state gradients.
pub struct UpstreamGrads {
    pub d_logits: Vec<Option<Vec<f64>>>,
    pub d_hidden: Vec<Vec<Vec<f64>>>,
}

impl UpstreamGrads {
    pub fn zeros(spec: &ModelSpec, t_len: usize) -> Self {
        Self {
            d_logits: vec![None; t_len],
            d_hidden: vec![vec![vec![0.0; spec.hidden_dim]; t_len]; spec.layers],
        }
    }

    pub fn add_logit_grad(&mut self, position: usize, grad: &[f64]) {
        match &mut self.d_logits[position] {
            Some(existing) => {
                for (e, &g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            slot => *slot = Some(grad.to_vec()),
        }
    }

    pub fn add_hidden_grad(&mut self, layer: usize, position: usize, grad: &[f64]) {
        for (e, &g) in self.d_hidden[layer - 1][position].iter_mut().zip(grad) {
            *e += g;
        }
    }
}

fn prediction_mask(sample: &TokenizedSample) -> Vec<bool> {
    let mut mask = vec![false; sample.tokens.len()];
    for step in 0..sample.output_len() {
        if let Some(p) = sample.prediction_position(step) {
            mask[p] = true;
        }
    }
    mask
}

fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, f64) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (mean_sq + NORM_EPS).sqrt();
    (
        x.iter().zip(gain).map(|(v, g)| v * g * r).collect(),
        r,
    )
}

/// d_x += backward of rmsnorm; gain gradient accumulated into d_gain.
fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    r: f64,
    d_out: &[f64],
    d_x: &mut [f64],
    d_gain: &mut [f64],
) {
    let n = x.len() as f64;
    let mut dot = 0.0;
    for i in 0..x.len() {
        d_gain[i] += d_out[i] * x[i] * r;
        dot += d_out[i] * gain[i] * x[i];
    }
    let coef = r * r * r / n * dot;
    for i in 0..x.len() {
        d_x[i] += r * gain[i] * d_out[i] - coef * x[i];
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Decoding controls mirroring the inference protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_k: 5,
            top_p: 0.5,
        }
    }
}

/// Temperature-scaled, top-k then top-p filtered candidate set with
/// renormalized probabilities, sorted by descending probability (ties by
/// token id). The top-p rule keeps the smallest prefix of the sorted
/// distribution whose cumulative mass reaches top_p; the boundary is
/// inclusive with 1e-12 slack.
pub fn filter_candidates(
    logits: &[f64],
    params: &SamplingParams,
) -> Result<Vec<(u32, f64)>, ModelError> {
    if !(params.temperature.is_finite() && params.temperature > 0.0) {
        return Err(ModelError::InvalidTemperature(params.temperature));
    }
    if params.top_k == 0 {
        return Err(ModelError::InvalidTopK);
    }
    if !(params.top_p > 0.0 && params.top_p <= 1.0) {
        return Err(ModelError::InvalidTopP(params.top_p));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / params.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| {
        scaled[b]
            .partial_cmp(&scaled[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(params.top_k.min(scaled.len()));
    let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let probs = crate::divergence::softmax(&kept);
    let mut cum = 0.0;
    let mut cut = probs.len();
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if cum >= params.top_p - 1e-12 {
            cut = i + 1;
            break;
        }
    }
    let mass: f64 = probs[..cut].iter().sum();
    Ok(order[..cut]
        .iter()
        .zip(&probs[..cut])
        .map(|(&i, &p)| (i as u32, p / mass))
        .collect())
}

/// Draw the next token after `prefix` with temperature, top-k, and top-p
/// filtering. Deterministic given the seed.
pub fn sample_next(
    model: &Model,
    prefix: &[u32],
    params: &SamplingParams,
    seed: u64,
) -> Result<u32, ModelError> {
    let logits = model.logits_at_last(prefix)?;
    let candidates = filter_candidates(&logits, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dart: f64 = rng.gen();
    let mut cum = 0.0;
    for &(token, p) in &candidates {
        cum += p;
        if dart < cum {
            return Ok(token);
        }
    }
    Ok(candidates.last().expect("non-empty candidate set").0)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    spec: ModelSpec,
    tensors: BTreeMap<String, Vec<f64>>,
    projection: Option<crate::align::ProjectionBank>,
}

/// Write a model (and optionally its projection bank) as a versioned JSON
/// container with named parameter arrays.
pub fn save_checkpoint(
    model: &Model,
    bank: Option<&crate::align::ProjectionBank>,
    path: &Path,
) -> Result<(), ModelError> {
    let tensors: BTreeMap<String, Vec<f64>> = model
        .params
        .named()
        .into_iter()
        .map(|(n, v)| (n, v.clone()))
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        spec: model.spec,
        tensors,
        projection: bank.cloned(),
    };
    let writer = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(writer, &file)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(Model, Option<crate::align::ProjectionBank>), ModelError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: CheckpointFile = serde_json::from_reader(reader)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(file.version));
    }
    let mut model = Model::new(file.spec)?;
    for (name, tensor) in model.params.named_mut() {
        let stored = file
            .tensors
            .get(&name)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if stored.len() != tensor.len() {
            return Err(ModelError::ShapeMismatch {
                name,
                got: stored.len(),
                want: tensor.len(),
            });
        }
        tensor.copy_from_slice(stored);
    }
    Ok((model, file.projection))
}
