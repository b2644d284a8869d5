//! Reverse-mode gradient of the mean cross-entropy with respect to the
//! projector only. Every other parameter is a constant, so the backward pass
//! carries activation gradients and never materialises weight gradients.

use rayon::prelude::*;

use super::forward::{ce_sum, forward_with, gelu_grad, layer_norm_backward, ActivationCache, BlockCache, PrefixAttention};
use super::{Block, Sample, ToyVLM};
use crate::error::{Error, Result};
use crate::linalg::{axpy, matmul, matmul_nt, matmul_tn, Matrix};

fn block_backward(block: &Block, cache: &BlockCache, d_out: Matrix) -> Matrix {
    let d_act = matmul(&d_out, &block.w_down);
    let mut d_up = d_act;
    for (g, &u) in d_up.as_mut_slice().iter_mut().zip(cache.up.as_slice()) {
        *g *= gelu_grad(u);
    }
    let d_mlp_in = matmul(&d_up, &block.w_up);
    let mut d_mid = d_out;
    d_mid.add_assign_scaled(&layer_norm_backward(&d_mlp_in, &block.ln2_gain, &cache.ln2), 1.0);

    let d_ctx = matmul(&d_mid, &block.wo);
    let d_probs = matmul_nt(&d_ctx, &cache.v);
    let d_v = matmul_tn(&cache.probs, &d_ctx);
    let s = cache.probs.rows();
    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let mut d_scores = Matrix::zeros(s, s);
    for i in 0..s {
        let p = cache.probs.row(i);
        let dp = d_probs.row(i);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let out = &mut d_scores.as_mut_slice()[i * s..(i + 1) * s];
        for j in 0..s {
            // masked positions have p == 0 and drop out here
            out[j] = p[j] * (dp[j] - inner) * scale;
        }
    }
    let d_q = matmul(&d_scores, &cache.k);
    let d_k = matmul_tn(&d_scores, &cache.q);
    let mut d_attn_in = matmul(&d_q, &block.wq);
    d_attn_in.add_assign_scaled(&matmul(&d_k, &block.wk), 1.0);
    d_attn_in.add_assign_scaled(&matmul(&d_v, &block.wv), 1.0);

    let mut d_in = d_mid;
    d_in.add_assign_scaled(&layer_norm_backward(&d_attn_in, &block.ln1_gain, &cache.ln1), 1.0);
    d_in
}

/// Gradient and value of the *summed* cross-entropy of one sample, and the
/// number of scored positions.
fn sample_grad(model: &ToyVLM, sample: &Sample, mode: PrefixAttention) -> Result<(Matrix, f64, usize)> {
    let (logits, cache) = forward_with(model, sample, mode)?;
    let (ce, _) = ce_sum(&logits, sample);
    let ActivationCache { n_prefix, blocks, lnf, .. } = cache;
    let targets = sample.targets();
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let out = &mut d_logits.as_mut_slice()[t * row.len()..(t + 1) * row.len()];
        for (o, &l) in out.iter_mut().zip(row) {
            *o = (l - max).exp() / z;
        }
        out[y as usize] -= 1.0;
    }
    let d_text = matmul(&d_logits, &model.head);
    let d = model.config.d_model;
    let s = n_prefix + sample.tokens.len();
    let mut d_normed = Matrix::zeros(s, d);
    d_normed.as_mut_slice()[n_prefix * d..].copy_from_slice(d_text.as_slice());
    let mut dh = layer_norm_backward(&d_normed, &model.lnf_gain, &lnf);
    for (block, bc) in model.blocks.iter().zip(&blocks).rev() {
        dh = block_backward(block, bc, dh);
    }
    let dv = model.config.d_vision;
    let mut grad = Matrix::zeros(d, dv);
    for j in 0..n_prefix {
        let v = &sample.vision[j * dv..(j + 1) * dv];
        let dx = dh.row(j);
        for r in 0..d {
            axpy(dx[r], v, grad.row_mut(r));
        }
    }
    Ok((grad, ce, targets.len()))
}

/// Exact gradient of [`loss`](super::loss) with respect to the projector.
pub fn grad_projector(model: &ToyVLM, batch: &[Sample]) -> Result<Matrix> {
    grad_projector_with(model, batch, PrefixAttention::Visible)
}

pub fn grad_projector_with(model: &ToyVLM, batch: &[Sample], mode: PrefixAttention) -> Result<Matrix> {
    Ok(loss_and_grad_with(model, batch, mode)?.1)
}

/// The loss (bit-identical to [`loss`](super::loss)) and its projector
/// gradient from one forward/backward sweep.
pub fn loss_and_grad_projector(model: &ToyVLM, batch: &[Sample]) -> Result<(f64, Matrix)> {
    loss_and_grad_with(model, batch, PrefixAttention::Visible)
}

fn loss_and_grad_with(model: &ToyVLM, batch: &[Sample], mode: PrefixAttention) -> Result<(f64, Matrix)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("grad_projector"));
    }
    let parts: Vec<(Matrix, f64, usize)> = batch
        .par_iter()
        .map(|s| sample_grad(model, s, mode))
        .collect::<Result<_>>()?;
    let mut total = Matrix::zeros(model.projector.rows(), model.projector.cols());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, ce, n) in &parts {
        total.add_assign_scaled(g, 1.0);
        sum += ce;
        count += n;
    }
    let grad = total.scale(1.0 / count as f64);
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "grad_projector" });
    }
    Ok((sum / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, loss, loss_with, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Sample {
                vision: (0..cfg.n_prefix * cfg.d_vision).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                tokens: (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect(),
            })
            .collect()
    }

    fn fd_entry(m: &ToyVLM, data: &[Sample], r: usize, c: usize, h: f64) -> f64 {
        let mut plus = m.clone();
        plus.projector.set(r, c, m.projector.get(r, c) + h);
        let mut minus = m.clone();
        minus.projector.set(r, c, m.projector.get(r, c) - h);
        (loss(&plus, data).unwrap() - loss(&minus, data).unwrap()) / (2.0 * h)
    }

    #[test]
    fn matches_central_differences_on_random_entries() {
        let cfg = ModelConfig { seq_len: 12, ..ModelConfig::default() };
        let m = init_model(cfg, 21).unwrap();
        let data = batch(&cfg, 3, 4);
        let g = grad_projector(&m, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let r = rng.gen_range(0..cfg.d_model);
            let c = rng.gen_range(0..cfg.d_vision);
            let fd = fd_entry(&m, &data, r, c, 1e-4);
            let rel = (g.get(r, c) - fd).abs() / fd.abs().max(1e-6);
            assert!(rel <= 1e-4, "({r},{c}) analytic {} fd {fd}", g.get(r, c));
        }
    }

    #[test]
    fn blocked_prefix_has_zero_gradient() {
        let cfg = ModelConfig { seq_len: 8, ..ModelConfig::default() };
        let m = init_model(cfg, 2).unwrap();
        let data = batch(&cfg, 2, 5);
        let g = grad_projector_with(&m, &data, PrefixAttention::Blocked).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        // and the loss really is independent of the projector
        let other = m.with_projector(m.projector.scale(3.0)).unwrap();
        assert_eq!(
            loss_with(&m, &data, PrefixAttention::Blocked).unwrap(),
            loss_with(&other, &data, PrefixAttention::Blocked).unwrap()
        );
    }

    #[test]
    fn union_gradient_is_size_weighted_mean() {
        let cfg = ModelConfig { seq_len: 10, ..ModelConfig::default() };
        let m = init_model(cfg, 8).unwrap();
        let a = batch(&cfg, 3, 1);
        let b = batch(&cfg, 5, 2);
        let ga = grad_projector(&m, &a).unwrap();
        let gb = grad_projector(&m, &b).unwrap();
        let union: Vec<_> = a.iter().chain(&b).cloned().collect();
        let gu = grad_projector(&m, &union).unwrap();
        for i in 0..gu.len() {
            let want = (3.0 * ga.as_slice()[i] + 5.0 * gb.as_slice()[i]) / 8.0;
            let got = gu.as_slice()[i];
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = init_model(ModelConfig::default(), 0).unwrap();
        assert!(grad_projector(&m, &[]).is_err());
    }
}
