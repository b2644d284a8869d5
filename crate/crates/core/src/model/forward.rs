use rayon::prelude::*;

use super::{Block, MatrixRole, Sample, ToyVLM};
use crate::error::{Error, Result};
use crate::linalg::{axpy, matmul, matmul_nt, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Which positions a text token may attend to. `Blocked` hides the prefix
/// from every text position; it exists to isolate the projector in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefixAttention {
    #[default]
    Visible,
    Blocked,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

/// Everything one block computes for one sequence. The `*_in` matrices
/// are the inputs seen by the prunable weights.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Matrix,
    pub(crate) ln1: LnCache,
    /// Input to `wq`, `wk` and `wv`.
    pub attn_in: Matrix,
    pub(crate) q: Matrix,
    pub(crate) k: Matrix,
    pub(crate) v: Matrix,
    pub(crate) probs: Matrix,
    /// Input to `wo`.
    pub ctx: Matrix,
    /// Residual stream after attention.
    pub mid: Matrix,
    pub(crate) ln2: LnCache,
    /// Input to `w_up`.
    pub mlp_in: Matrix,
    pub(crate) up: Matrix,
    /// Input to `w_down`.
    pub mlp_act: Matrix,
    pub output: Matrix,
}

impl BlockCache {
    /// Token-major input matrix (`positions × in_dim`) for a role.
    pub fn input_to(&self, role: MatrixRole) -> &Matrix {
        match role {
            MatrixRole::Query | MatrixRole::Key | MatrixRole::Value => &self.attn_in,
            MatrixRole::Output => &self.ctx,
            MatrixRole::Up => &self.mlp_in,
            MatrixRole::Down => &self.mlp_act,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub n_prefix: usize,
    /// Embedded sequence: projected prefix rows, then text rows.
    pub embedded: Matrix,
    pub blocks: Vec<BlockCache>,
    pub(crate) lnf: LnCache,
    pub mode: PrefixAttention,
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = &mut xhat.as_mut_slice()[r * cols..(r + 1) * cols];
        let yr = &mut y.as_mut_slice()[r * cols..(r + 1) * cols];
        for c in 0..cols {
            xh[c] = (row[c] - mean) * rs;
            yr[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Backward through a layer norm: maps `dy` to `dx`.
pub(crate) fn layer_norm_backward(dy: &Matrix, gain: &[f64], cache: &LnCache) -> Matrix {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let n = cols as f64;
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
pub(crate) fn attends(i: usize, j: usize, n_prefix: usize, mode: PrefixAttention) -> bool {
    j <= i && !(mode == PrefixAttention::Blocked && i >= n_prefix && j < n_prefix)
}

/// Runs one pre-norm block over a `positions × d_model` sequence.
pub(crate) fn block_forward(block: &Block, h: &Matrix, n_prefix: usize, mode: PrefixAttention) -> BlockCache {
    let (s, d) = h.shape();
    let (attn_in, ln1) = layer_norm(h, &block.ln1_gain, &block.ln1_bias);
    let q = matmul_nt(&attn_in, &block.wq);
    let k = matmul_nt(&attn_in, &block.wk);
    let v = matmul_nt(&attn_in, &block.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = Matrix::zeros(s, s);
    let scores = matmul_nt(&q, &k);
    for i in 0..s {
        let sr = scores.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..s {
            if attends(i, j, n_prefix, mode) {
                max = max.max(sr[j] * scale);
            }
        }
        let pr = probs.row_mut(i);
        let mut z = 0.0;
        for j in 0..s {
            if attends(i, j, n_prefix, mode) {
                let e = (sr[j] * scale - max).exp();
                pr[j] = e;
                z += e;
            }
        }
        for p in pr.iter_mut() {
            *p /= z;
        }
    }
    let ctx = matmul(&probs, &v);
    let mut mid = matmul_nt(&ctx, &block.wo);
    mid.add_assign_scaled(h, 1.0);
    let (mlp_in, ln2) = layer_norm(&mid, &block.ln2_gain, &block.ln2_bias);
    let up = matmul_nt(&mlp_in, &block.w_up);
    let mlp_act = up.map(gelu);
    let mut output = matmul_nt(&mlp_act, &block.w_down);
    output.add_assign_scaled(&mid, 1.0);
    BlockCache {
        input: h.clone(),
        ln1,
        attn_in,
        q,
        k,
        v,
        probs,
        ctx,
        mid,
        ln2,
        mlp_in,
        up,
        mlp_act,
        output,
    }
}

/// Prefix rows are `W_p · v_j`; text rows are token plus position embeddings.
pub(crate) fn embed(model: &ToyVLM, sample: &Sample) -> Matrix {
    let cfg = &model.config;
    let p = cfg.n_prefix;
    let d = cfg.d_model;
    let mut x = Matrix::zeros(p + sample.tokens.len(), d);
    for j in 0..p {
        let v = &sample.vision[j * cfg.d_vision..(j + 1) * cfg.d_vision];
        let row = x.row_mut(j);
        for (r, out) in row.iter_mut().enumerate() {
            *out = crate::linalg::dot(model.projector.row(r), v);
        }
    }
    for (t, &tok) in sample.tokens.iter().enumerate() {
        let row = x.row_mut(p + t);
        row.copy_from_slice(model.embed.row(tok as usize));
        axpy(1.0, model.pos.row(t), row);
    }
    x
}

/// Final norm and head over the text rows of a hidden state.
pub(crate) fn head_logits(model: &ToyVLM, hidden: &Matrix) -> (Matrix, LnCache) {
    let (normed, lnf) = layer_norm(hidden, &model.lnf_gain, &model.lnf_bias);
    let p = model.config.n_prefix;
    let text_rows = hidden.rows() - p;
    let text = Matrix::from_vec(
        text_rows,
        normed.cols(),
        normed.as_slice()[p * normed.cols()..].to_vec(),
    )
    .expect("finite slice of finite matrix");
    (matmul_nt(&text, &model.head), lnf)
}

/// Sum of next-token cross-entropies for one sample's logits, plus the
/// number of scored positions.
pub(crate) fn ce_sum(logits: &Matrix, sample: &Sample) -> (f64, usize) {
    let targets = sample.targets();
    let total = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            max + z.ln() - row[y as usize]
        })
        .sum();
    (total, targets.len())
}

pub(crate) fn ce_sum_from_hidden(model: &ToyVLM, hidden: &Matrix, sample: &Sample) -> (f64, usize) {
    let (logits, _) = head_logits(model, hidden);
    ce_sum(&logits, sample)
}

pub fn forward(model: &ToyVLM, sample: &Sample) -> Result<(Matrix, ActivationCache)> {
    forward_with(model, sample, PrefixAttention::Visible)
}

/// Forward pass returning text-position logits (`tokens × vocab`) and the
/// activation cache needed for Hessians and backpropagation.
pub fn forward_with(model: &ToyVLM, sample: &Sample, mode: PrefixAttention) -> Result<(Matrix, ActivationCache)> {
    sample.validate(&model.config)?;
    let embedded = embed(model, sample);
    let p = model.config.n_prefix;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    let mut h = embedded.clone();
    for block in &model.blocks {
        let cache = block_forward(block, &h, p, mode);
        h = cache.output.clone();
        blocks.push(cache);
    }
    let (logits, lnf) = head_logits(model, &h);
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "forward" });
    }
    Ok((
        logits,
        ActivationCache {
            n_prefix: p,
            embedded,
            blocks,
            lnf,
            mode,
        },
    ))
}

fn sample_ce(model: &ToyVLM, sample: &Sample, mode: PrefixAttention) -> Result<(f64, usize)> {
    sample.validate(&model.config)?;
    let mut h = embed(model, sample);
    for block in &model.blocks {
        h = block_forward(block, &h, model.config.n_prefix, mode).output;
    }
    Ok(ce_sum_from_hidden(model, &h, sample))
}

/// Mean next-token cross-entropy over every scored text position of every
/// sample. Prefix positions carry no target and are excluded.
pub fn loss(model: &ToyVLM, batch: &[Sample]) -> Result<f64> {
    loss_with(model, batch, PrefixAttention::Visible)
}

pub fn loss_with(model: &ToyVLM, batch: &[Sample], mode: PrefixAttention) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss"));
    }
    let parts: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|s| sample_ce(model, s, mode))
        .collect::<Result<_>>()?;
    let (sum, count) = parts
        .iter()
        .fold((0.0, 0usize), |(s, c), &(ps, pc)| (s + ps, c + pc));
    let value = sum / count as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(value)
}
