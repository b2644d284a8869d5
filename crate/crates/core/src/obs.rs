//! Layer-wise Optimal Brain Surgeon pruning.
//!
//! Each prunable matrix `W` (`out × in`) sees token-major inputs `X`; the
//! layer Hessian is `H = XᵀX / n`. Columns are processed left to right in
//! blocks. At the start of a block every entry gets the score
//! `w² / [H_F⁻¹]_jj`, where `H_F` is `H` restricted to the not yet processed
//! columns, and the lowest-scoring entries of the block are removed. Each
//! removal at column `q` updates the remaining columns `j > q` by
//! `w_j -= (w_q / [H_F⁻¹]_qq) · [H_F⁻¹]_qj`. Both quantities are read off the
//! upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`): the trailing block of
//! `U` factors the inverse of every trailing principal block of `H`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, matmul_tn, spd_inverse_named, Matrix};
use crate::model::{block_forward, ce_sum_from_hidden, embed, MatrixRole, PrefixAttention, Sample, ToyVLM};
use crate::policy::Policy;

/// Accumulated `XᵀX` over calibration tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHessian {
    sum: Matrix,
    n_accumulated: usize,
}

impl LayerHessian {
    pub fn new(in_dim: usize) -> Self {
        LayerHessian {
            sum: Matrix::zeros(in_dim, in_dim),
            n_accumulated: 0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.sum.rows()
    }

    pub fn n_accumulated(&self) -> usize {
        self.n_accumulated
    }

    /// Adds a token-major batch (`n_tokens × in_dim`).
    pub fn add_tokens(&mut self, tokens: &Matrix) -> Result<()> {
        if tokens.cols() != self.in_dim() {
            return Err(Error::dims("LayerHessian::add_tokens", self.in_dim(), tokens.cols()));
        }
        let xtx = matmul_tn(tokens, tokens);
        self.sum.add_assign_scaled(&xtx, 1.0);
        self.n_accumulated += tokens.rows();
        Ok(())
    }

    /// The normalised Hessian `XᵀX / n`.
    pub fn matrix(&self) -> Matrix {
        if self.n_accumulated == 0 {
            return self.sum.clone();
        }
        self.sum.scale(1.0 / self.n_accumulated as f64)
    }
}

/// `H = inputs · inputsᵀ / n_tokens` for feature-major inputs
/// (`in_dim × n_tokens`).
pub fn accumulate_hessian(inputs: &Matrix) -> Result<LayerHessian> {
    if inputs.cols() == 0 {
        return Err(Error::EmptyBatch("accumulate_hessian"));
    }
    let mut h = LayerHessian::new(inputs.rows());
    h.add_tokens(&inputs.transpose())?;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// 1 where the weight survives, 0 where it was removed.
    pub mask: Matrix,
    /// Compensated weights; exactly zero wherever `mask` is zero.
    pub weight: Matrix,
    pub realized_ratio: f64,
}

/// `round(ratio · count)`, the exact zero count for a ratio.
pub fn target_zeros(ratio: f64, count: usize) -> usize {
    (ratio * count as f64).round() as usize
}

pub fn obs_prune_layer(
    w: &Matrix,
    hess: &LayerHessian,
    ratio: f64,
    blocksize: usize,
    damping: f64,
) -> Result<PruneResult> {
    obs_prune_named(w, hess, ratio, blocksize, damping, "layer")
}

pub(crate) fn obs_prune_named(
    w: &Matrix,
    hess: &LayerHessian,
    ratio: f64,
    blocksize: usize,
    damping: f64,
    layer: &str,
) -> Result<PruneResult> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if hess.in_dim() != w.cols() {
        return Err(Error::dims("obs_prune_layer", format!("hessian dim {}", w.cols()), hess.in_dim()));
    }
    if blocksize == 0 {
        return Err(Error::InvalidConfig("blocksize must be >= 1".into()));
    }
    let (rows, cols) = w.shape();
    let total = target_zeros(ratio, rows * cols);
    if total == 0 {
        return Ok(PruneResult {
            mask: Matrix::filled(rows, cols, 1.0),
            weight: w.clone(),
            realized_ratio: 0.0,
        });
    }

    let hinv = spd_inverse_named(&hess.matrix(), damping, layer)?;
    let u = cholesky(&hinv)
        .ok_or_else(|| Error::SingularHessian { layer: layer.to_string() })?
        .transpose();

    let mut weight = w.clone();
    let mut mask = Matrix::filled(rows, cols, 1.0);
    let mut removed = 0usize;
    let mut start = 0usize;
    while start < cols {
        let end = (start + blocksize).min(cols);
        // cumulative rounding keeps the layer total exact
        let count = target_zeros(ratio, rows * end) - removed;

        let cond_diag: Vec<f64> = (start..end)
            .map(|j| (start..=j).map(|k| u.get(k, j) * u.get(k, j)).sum())
            .collect();
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            for j in start..end {
                let wv = weight.get(r, j);
                scored.push((wv * wv / cond_diag[j - start], r, j));
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, r, j) in scored.iter().take(count) {
            mask.set(r, j, 0.0);
        }
        removed += count;

        for q in start..end {
            let uqq = u.get(q, q);
            let uq = &u.row(q)[q + 1..];
            for r in 0..rows {
                if mask.get(r, q) != 0.0 {
                    continue;
                }
                let err = weight.get(r, q) / uqq;
                let row = &mut weight.row_mut(r)[q + 1..];
                for (wj, &uqj) in row.iter_mut().zip(uq) {
                    *wj -= err * uqj;
                }
                weight.set(r, q, 0.0);
            }
        }
        start = end;
    }
    if !weight.is_finite() {
        return Err(Error::NonFinite { op: "obs_prune_layer" });
    }
    Ok(PruneResult {
        realized_ratio: mask.count_zeros() as f64 / (rows * cols) as f64,
        mask,
        weight,
    })
}

/// Where calibration inputs for block `i` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Forward through the already-pruned blocks `< i`.
    #[default]
    Sequential,
    /// Forward through the dense model.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    pub damping: f64,
    pub blocksize: usize,
    pub calibration: CalibrationMode,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            damping: 0.01,
            blocksize: 16,
            calibration: CalibrationMode::Sequential,
        }
    }
}

/// Masks for every prunable matrix, indexed `[block][role]` in
/// [`MatrixRole::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    pub blocks: Vec<Vec<Matrix>>,
}

impl LayerMasks {
    pub fn get(&self, block: usize, role: MatrixRole) -> &Matrix {
        let i = MatrixRole::ALL.iter().position(|&r| r == role).expect("known role");
        &self.blocks[block][i]
    }

    pub fn zeros(&self) -> usize {
        self.blocks.iter().flatten().map(Matrix::count_zeros).sum()
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().flatten().map(Matrix::len).sum()
    }

    /// Text bitmap dump: a `# block <b> <role> <rows>x<cols> zeros=<n>`
    /// header per matrix followed by one line of `0`/`1` per row.
    pub fn to_bitmap(&self) -> String {
        let mut out = String::new();
        for (b, masks) in self.blocks.iter().enumerate() {
            for (role, m) in MatrixRole::ALL.iter().zip(masks) {
                let _ = writeln!(
                    out,
                    "# block {b} {} {}x{} zeros={}",
                    role.name(),
                    m.rows(),
                    m.cols(),
                    m.count_zeros()
                );
                for r in 0..m.rows() {
                    out.extend(m.row(r).iter().map(|&v| if v == 0.0 { '0' } else { '1' }));
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn write_bitmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_bitmap().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub model: ToyVLM,
    pub masks: LayerMasks,
    /// Mean cross-entropy of the pruned model on the calibration batch,
    /// available when calibration activations track the pruned model.
    pub calib_loss: Option<f64>,
}

/// Prunes every block's six matrices at `policy`'s per-block ratio.
pub fn apply_policy(model: &ToyVLM, policy: &Policy, calib: &[Sample], opts: &PruneOptions) -> Result<PrunedModel> {
    if policy.n_blocks() != model.config.n_blocks {
        return Err(Error::InvalidPolicy(format!(
            "policy has {} ratios for {} blocks",
            policy.n_blocks(),
            model.config.n_blocks
        )));
    }
    apply_ratios(model, &policy.ratios(), calib, opts)
}

/// [`apply_policy`] for arbitrary per-block ratios in `[0, 1]`.
pub fn apply_ratios(model: &ToyVLM, ratios: &[f64], calib: &[Sample], opts: &PruneOptions) -> Result<PrunedModel> {
    if ratios.len() != model.config.n_blocks {
        return Err(Error::dims("apply_ratios", model.config.n_blocks, ratios.len()));
    }
    if calib.is_empty() {
        return Err(Error::EmptyBatch("apply_policy"));
    }
    for s in calib {
        s.validate(&model.config)?;
    }
    let p = model.config.n_prefix;
    let mut pruned = model.clone();
    let mut states: Vec<Matrix> = calib.par_iter().map(|s| embed(model, s)).collect();
    let mut masks = Vec::with_capacity(ratios.len());

    for (b, &ratio) in ratios.iter().enumerate() {
        let dense = &model.blocks[b];
        let caches: Vec<_> = states
            .par_iter()
            .map(|h| block_forward(dense, h, p, PrefixAttention::Visible))
            .collect();
        let d = model.config.d_model;
        let mut hess_attn = LayerHessian::new(d);
        let mut hess_ctx = LayerHessian::new(d);
        let mut hess_mlp = LayerHessian::new(d);
        let mut hess_act = LayerHessian::new(model.config.d_ff);
        for c in &caches {
            hess_attn.add_tokens(&c.attn_in)?;
            hess_ctx.add_tokens(&c.ctx)?;
            hess_mlp.add_tokens(&c.mlp_in)?;
            hess_act.add_tokens(&c.mlp_act)?;
        }
        let hessian_for = |role: MatrixRole| match role {
            MatrixRole::Query | MatrixRole::Key | MatrixRole::Value => &hess_attn,
            MatrixRole::Output => &hess_ctx,
            MatrixRole::Up => &hess_mlp,
            MatrixRole::Down => &hess_act,
        };
        let results: Vec<PruneResult> = MatrixRole::ALL
            .par_iter()
            .map(|&role| {
                let name = format!("block {b} {}", role.name());
                obs_prune_named(dense.weight(role), hessian_for(role), ratio, opts.blocksize, opts.damping, &name)
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_block(b))?;

        let mut block_masks = Vec::with_capacity(6);
        for (role, res) in MatrixRole::ALL.iter().zip(results) {
            *pruned.blocks[b].weight_mut(*role) = res.weight;
            block_masks.push(res.mask);
        }
        masks.push(block_masks);

        states = match opts.calibration {
            CalibrationMode::Sequential => {
                let block = &pruned.blocks[b];
                states
                    .par_iter()
                    .map(|h| block_forward(block, h, p, PrefixAttention::Visible).output)
                    .collect()
            }
            CalibrationMode::Dense => caches.into_iter().map(|c| c.output).collect(),
        };
    }

    let calib_loss = match opts.calibration {
        CalibrationMode::Sequential => {
            let (sum, n) = states
                .iter()
                .zip(calib)
                .map(|(h, s)| ce_sum_from_hidden(&pruned, h, s))
                .fold((0.0, 0usize), |(a, b), (s, n)| (a + s, b + n));
            Some(sum / n as f64)
        }
        CalibrationMode::Dense => None,
    };
    Ok(PrunedModel {
        model: pruned,
        masks: LayerMasks { blocks: masks },
        calib_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_norm, matmul_nt};
    use crate::model::{init_model, loss, ModelConfig};
    use crate::policy::RatioGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn hessian_from(x_tokens: &Matrix) -> LayerHessian {
        let mut h = LayerHessian::new(x_tokens.cols());
        h.add_tokens(x_tokens).unwrap();
        h
    }

    #[test]
    fn hessian_examples() {
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let h = accumulate_hessian(&x).unwrap().matrix();
        assert_eq!(h, matmul_nt(&x, &x));
        let h = accumulate_hessian(&Matrix::identity(4)).unwrap().matrix();
        assert_eq!(h, Matrix::identity(4).scale(0.25));
        assert!(accumulate_hessian(&Matrix::zeros(3, 0)).is_err());
    }

    #[test]
    fn ratio_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(5, 7, &mut rng);
        let h = hessian_from(&random(20, 7, &mut rng));
        let res = obs_prune_layer(&w, &h, 0.0, 4, 0.01).unwrap();
        assert_eq!(res.weight.as_slice(), w.as_slice());
        assert_eq!(res.mask.count_zeros(), 0);
    }

    #[test]
    fn identity_hessian_is_blockwise_magnitude_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(8, 8, &mut rng);
        let h = accumulate_hessian(&Matrix::identity(8)).unwrap();
        let res = obs_prune_layer(&w, &h, 0.5, 4, 0.01).unwrap();
        // plain magnitude pruner: per column block keep the largest |w|
        let mut want = Matrix::filled(8, 8, 1.0);
        for start in [0usize, 4] {
            let cum = |c: usize| (0.5 * (8 * c) as f64).round() as usize;
            let count = cum(start + 4) - cum(start);
            let mut entries: Vec<(f64, usize, usize)> = (0..8)
                .flat_map(|r| (start..start + 4).map(move |c| (r, c)))
                .map(|(r, c)| (w.get(r, c).abs(), r, c))
                .collect();
            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(_, r, c) in entries.iter().take(count) {
                want.set(r, c, 0.0);
            }
        }
        assert_eq!(res.mask, want);
        for i in 0..64 {
            let m = res.mask.as_slice()[i];
            assert_eq!(res.weight.as_slice()[i], if m == 0.0 { 0.0 } else { w.as_slice()[i] });
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Matrix::zeros(3, 4);
        let h = LayerHessian::new(4);
        assert!(matches!(obs_prune_layer(&w, &h, 1.5, 4, 0.01), Err(Error::InvalidRatio(_))));
        assert!(matches!(obs_prune_layer(&w, &h, -0.1, 4, 0.01), Err(Error::InvalidRatio(_))));
        assert!(matches!(obs_prune_layer(&w, &LayerHessian::new(3), 0.5, 4, 0.01), Err(Error::DimensionMismatch { .. })));
        // an all-zero Hessian stays singular after relative damping
        assert!(matches!(obs_prune_layer(&w, &h, 0.5, 4, 0.01), Err(Error::SingularHessian { .. })));
    }

    #[test]
    fn mask_only_never_increases_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(6, 9, &mut rng);
        let h = hessian_from(&random(30, 9, &mut rng));
        let res = obs_prune_layer(&w, &h, 0.45, 4, 0.01).unwrap();
        let masked = w.hadamard(&res.mask).unwrap();
        assert!(frobenius_norm(&masked) <= frobenius_norm(&w));
    }

    #[test]
    fn reprune_keeps_existing_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(6, 10, &mut rng);
        let h = hessian_from(&random(40, 10, &mut rng));
        let first = obs_prune_layer(&w, &h, 0.4, 3, 0.01).unwrap();
        let second = obs_prune_layer(&first.weight, &h, 0.4, 3, 0.01).unwrap();
        for i in 0..w.len() {
            if first.mask.as_slice()[i] == 0.0 {
                assert_eq!(second.mask.as_slice()[i], 0.0);
            }
        }
        assert_eq!(second.mask.count_zeros(), first.mask.count_zeros());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn exact_zero_count(seed in 0u64..10_000, rows in 1usize..12, cols in 1usize..20, step in 0usize..=20, bs in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ratio = step as f64 * 0.05;
            let w = random(rows, cols, &mut rng);
            let h = hessian_from(&random(2 * cols + 3, cols, &mut rng));
            let res = obs_prune_layer(&w, &h, ratio, bs, 0.01).unwrap();
            prop_assert_eq!(res.mask.count_zeros(), target_zeros(ratio, rows * cols));
            for i in 0..w.len() {
                if res.mask.as_slice()[i] == 0.0 {
                    prop_assert_eq!(res.weight.as_slice()[i], 0.0);
                }
            }
            let again = obs_prune_layer(&w, &h, ratio, bs, 0.01).unwrap();
            prop_assert_eq!(again, res);
        }
    }

    fn small_model() -> (ToyVLM, Vec<Sample>) {
        let cfg = ModelConfig { n_blocks: 2, seq_len: 12, ..ModelConfig::default() };
        let m = init_model(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = (0..6)
            .map(|_| Sample {
                vision: (0..cfg.d_vision).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                tokens: (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect(),
            })
            .collect();
        (m, data)
    }

    #[test]
    fn zero_policy_leaves_model_unchanged() {
        let (m, data) = small_model();
        let out = apply_ratios(&m, &[0.0, 0.0], &data, &PruneOptions::default()).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.masks.zeros(), 0);
    }

    #[test]
    fn realized_sparsity_matches_policy() {
        let (m, data) = small_model();
        let grid = RatioGrid::new(0.5).unwrap();
        let policy = Policy::from_steps(grid, vec![2, -2]).unwrap();
        let out = apply_policy(&m, &policy, &data, &PruneOptions::default()).unwrap();
        let mean = policy.ratios().iter().sum::<f64>() / 2.0;
        let numel = m.config.prunable_params() as f64;
        assert!((out.model.prunable_sparsity() - mean).abs() <= 1.0 / numel * 12.0);
        assert_eq!(out.masks.total(), m.config.prunable_params());
        for (b, &ratio) in policy.ratios().iter().enumerate() {
            for role in MatrixRole::ALL {
                let w = out.model.blocks[b].weight(role);
                assert_eq!(w.count_zeros(), target_zeros(ratio, w.len()));
                assert_eq!(out.masks.get(b, role).count_zeros(), w.count_zeros());
            }
        }
        // untouched parameters
        assert_eq!(out.model.projector, m.projector);
        assert_eq!(out.model.embed, m.embed);
        assert_eq!(out.model.head, m.head);
    }

    #[test]
    fn calib_loss_matches_full_forward() {
        let (m, data) = small_model();
        let out = apply_ratios(&m, &[0.4, 0.6], &data, &PruneOptions::default()).unwrap();
        assert_eq!(out.calib_loss.unwrap(), loss(&out.model, &data).unwrap());
    }

    #[test]
    fn sequential_and_dense_calibration_differ() {
        let (m, data) = small_model();
        let seq = apply_ratios(&m, &[0.5, 0.5], &data, &PruneOptions::default()).unwrap();
        let dense = apply_ratios(
            &m,
            &[0.5, 0.5],
            &data,
            &PruneOptions { calibration: CalibrationMode::Dense, ..PruneOptions::default() },
        )
        .unwrap();
        // block 0 sees identical inputs either way
        assert_eq!(seq.masks.blocks[0], dense.masks.blocks[0]);
        assert_ne!(seq.masks.blocks[1], dense.masks.blocks[1]);
    }

    #[test]
    fn bitmap_dump_names_layers() {
        let (m, data) = small_model();
        let out = apply_ratios(&m, &[0.5, 0.0], &data, &PruneOptions::default()).unwrap();
        let dump = out.masks.to_bitmap();
        assert!(dump.starts_with("# block 0 wq 32x32 zeros=512\n"));
        assert!(dump.contains("# block 1 w_down 32x64 zeros=0\n"));
        assert_eq!(dump.lines().filter(|l| !l.starts_with('#')).count(), 2 * (4 * 32 + 64 + 32));
    }
}
