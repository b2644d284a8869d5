//! Independent reference computations used to check the fast paths: a
//! brute-force search over single removals, central finite differences for
//! the projector gradient, and eigenvalue and inverse checks backed by
//! nalgebra rather than the in-crate kernels. [`suite`] bundles the
//! self-checks that the CLI's `verify` command and the acceptance tests run.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use crate::calib::{make_teacher, sample_dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{grad_projector, init_model, loss, ModelConfig, Sample, ToyVLM};
use crate::obs::{accumulate_hessian, obs_prune_layer, target_zeros};
use crate::policy::{sample_policy, Policy, RatioGrid};
use crate::seed::rng_for;
use crate::space::{importance_weights, importance_weights_from_ratios, softmax_neg};

pub fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
    Matrix::from_vec(m.nrows(), m.ncols(), data).expect("finite nalgebra matrix")
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(to_nalgebra(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Inverse via nalgebra's LU decomposition.
pub fn reference_inverse(m: &Matrix) -> Option<Matrix> {
    to_nalgebra(m).try_inverse().map(|inv| from_nalgebra(&inv))
}

/// One candidate removal with its best achievable reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Removal {
    pub row: usize,
    pub col: usize,
    /// `‖W X − W̃ X‖²_F` after least-squares compensation of the row.
    pub error: f64,
}

/// Every single-weight removal of `w` (inputs `x`, `in_dim × n_tokens`)
/// with the remaining entries of that row refitted by least squares to
/// reproduce the row's original output, sorted by `(error, row, col)`.
pub fn all_single_removals(w: &Matrix, x: &Matrix) -> Result<Vec<Removal>> {
    if w.cols() != x.rows() {
        return Err(Error::dims("all_single_removals", w.cols(), x.rows()));
    }
    let xn = to_nalgebra(x);
    let mut out = Vec::with_capacity(w.len());
    for r in 0..w.rows() {
        let wr = DMatrix::from_row_slice(1, w.cols(), w.row(r));
        let target = (&wr * &xn).transpose();
        for q in 0..w.cols() {
            let keep: Vec<usize> = (0..w.cols()).filter(|&c| c != q).collect();
            let design = xn.select_rows(keep.iter()).transpose();
            let fitted = if keep.is_empty() {
                DMatrix::zeros(target.nrows(), 1)
            } else {
                let coef = design
                    .clone()
                    .svd(true, true)
                    .solve(&target, 1e-14)
                    .map_err(|e| Error::InvalidConfig(format!("least squares failed: {e}")))?;
                &design * coef
            };
            let resid = &target - fitted;
            out.push(Removal {
                row: r,
                col: q,
                error: resid.norm_squared(),
            });
        }
    }
    out.sort_by(|a, b| a.error.total_cmp(&b.error).then(a.row.cmp(&b.row)).then(a.col.cmp(&b.col)));
    Ok(out)
}

/// Central-difference gradient of the mean loss with respect to every
/// projector entry.
pub fn finite_difference_projector_grad(model: &ToyVLM, batch: &[Sample], h: f64) -> Result<Matrix> {
    let (rows, cols) = model.projector.shape();
    let mut grad = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let at = |delta: f64| -> Result<f64> {
                let mut p = model.projector.clone();
                p.set(r, c, p.get(r, c) + delta);
                loss(&model.with_projector(p)?, batch)
            };
            grad.set(r, c, (at(h)? - at(-h)?) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Largest relative error, `|a − b| / max(|b|, floor)`, over all entries.
pub fn max_relative_error(got: &Matrix, want: &Matrix, floor: f64) -> f64 {
    got.as_slice()
        .iter()
        .zip(want.as_slice())
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Check { name, pass, detail }
    }
}

const C1_INSTANCES: usize = 20;
const C1_MAX_SECS: f64 = 5.0;
const C2_PAIRS: usize = 100;
const C3_FD_STEP: f64 = 1e-4;
const C3_MAX_REL_ERR: f64 = 1e-4;
// entries smaller than this are compared absolutely
const C3_REL_FLOOR: f64 = 1e-6;
const C4_SUM_TOL: f64 = 1e-12;
const C4_HAND_TOL: f64 = 1e-6;

/// Every self-check, in order.
pub fn suite() -> Vec<Check> {
    vec![obs_optimality(), exact_sparsity(), gradient_check(), importance_weight_checks()]
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Single-removal selection against brute force on 20 random 6×6 layers.
pub fn obs_optimality() -> Check {
    let t = Instant::now();
    let mut agree = 0;
    for i in 0..C1_INSTANCES {
        let mut rng = rng_for(1, "acceptance.obs", i as u64);
        let w = random_matrix(6, 6, &mut rng);
        let x = random_matrix(6, 16, &mut rng);
        let best = all_single_removals(&w, &x).unwrap()[0];
        let res = obs_prune_layer(&w, &accumulate_hessian(&x).unwrap(), 1.0 / 36.0, 36, 0.0).unwrap();
        if res.mask.count_zeros() == 1 && res.mask.get(best.row, best.col) == 0.0 {
            agree += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        "obs-optimality",
        agree == C1_INSTANCES && secs < C1_MAX_SECS,
        format!("{agree}/{C1_INSTANCES} agree with brute force in {secs:.3}s"),
    )
}

/// Zero counts on 100 random shapes at grid ratios, with zero tolerance.
pub fn exact_sparsity() -> Check {
    let mut exact = 0;
    for i in 0..C2_PAIRS {
        let mut rng = rng_for(2, "acceptance.sparsity", i as u64);
        let rows = rng.gen_range(1..=40);
        let cols = rng.gen_range(1..=40);
        let grid = RatioGrid::new(rng.gen_range(1..=9) as f64 / 10.0).unwrap();
        let ratio = grid.ratio(rng.gen_range(-2..=2));
        let w = random_matrix(rows, cols, &mut rng);
        let x = random_matrix(cols, 2 * cols + 4, &mut rng);
        let blocksize = rng.gen_range(1..=16);
        let res = obs_prune_layer(&w, &accumulate_hessian(&x).unwrap(), ratio, blocksize, 0.01).unwrap();
        let zeros_ok = res.mask.count_zeros() == target_zeros(ratio, rows * cols);
        let weights_ok = (0..rows).all(|r| (0..cols).all(|c| res.mask.get(r, c) != 0.0 || res.weight.get(r, c) == 0.0));
        if zeros_ok && weights_ok {
            exact += 1;
        }
    }
    Check::new("exact-sparsity", exact == C2_PAIRS, format!("{exact}/{C2_PAIRS} exact zero counts"))
}

/// Analytic projector gradient against central differences on every entry.
pub fn gradient_check() -> Check {
    let cfg = ModelConfig {
        d_vision: 4,
        n_blocks: 2,
        seq_len: 12,
        ..ModelConfig::default()
    };
    let teacher = make_teacher(cfg, 3).unwrap();
    let batch = sample_dataset(
        &teacher,
        &DatasetSpec {
            n_samples: 4,
            seq_len: 12,
            seed: 3,
            split: Split::Proxy,
        },
    )
    .unwrap();
    let model = init_model(cfg, 3).unwrap();
    let analytic = grad_projector(&model, &batch).unwrap();
    let numeric = finite_difference_projector_grad(&model, &batch, C3_FD_STEP).unwrap();
    let err = max_relative_error(&analytic, &numeric, C3_REL_FLOOR);
    Check::new(
        "projector-gradient",
        err <= C3_MAX_REL_ERR,
        format!("max relative error {err:.2e} over {} entries", analytic.len()),
    )
}

/// Importance weights: normalisation, uniform case, a hand-worked case and
/// exact shift invariance.
pub fn importance_weight_checks() -> Check {
    let grid = RatioGrid::new(0.5).unwrap();
    let mut failures = Vec::new();

    let ps: Vec<Policy> = (0..16).map(|i| sample_policy(grid, 8, &mut rng_for(4, "acceptance.weights", i))).collect();
    let w = importance_weights(&ps, 5).unwrap();
    let sum_err = (w.weights.iter().sum::<f64>() - 1.0).abs();
    if sum_err > C4_SUM_TOL {
        failures.push(format!("sum off by {sum_err:.1e}"));
    }

    let same = vec![ps[0].clone(); 6];
    if importance_weights(&same, 5).unwrap().weights.iter().any(|&c| c != 1.0 / 6.0) {
        failures.push("identical candidates not uniform".to_string());
    }

    // d = (0.0125, 0.005, 0.0125) worked out by hand
    let hand = [0.332_499, 0.335_002, 0.332_499];
    let three = importance_weights_from_ratios(&[[0.0], [0.05], [0.10]], 2).unwrap();
    if three.weights.iter().zip(hand).any(|(a, b)| (a - b).abs() > C4_HAND_TOL) {
        failures.push(format!("three-candidate weights {:?}", three.weights));
    }

    // translating every candidate by the same offset leaves distances, and
    // so the weights, bit-identical
    let base: Vec<Policy> = [[-1i8, 0, 1, 0], [0, 0, 0, 0], [1, -1, 0, 0], [0, 1, -1, 0]]
        .iter()
        .map(|s| Policy::from_steps(grid, s.to_vec()).unwrap())
        .collect();
    let moved: Vec<Policy> = base
        .iter()
        .map(|p| {
            let mut s = p.steps().to_vec();
            s[2] -= 1;
            s[3] += 1;
            Policy::from_steps(grid, s).unwrap()
        })
        .collect();
    if importance_weights(&base, 2).unwrap().weights != importance_weights(&moved, 2).unwrap().weights {
        failures.push("weights changed under translation".to_string());
    }
    let d = [0.25, 0.5, 0.125, 1.0];
    let shifted: Vec<f64> = d.iter().map(|x| x + 3.0).collect();
    if softmax_neg(&d) != softmax_neg(&shifted) {
        failures.push("softmax changed under a constant shift".to_string());
    }

    let detail = if failures.is_empty() {
        format!("sum error {sum_err:.1e}, uniform, hand case {:.6?}, shift exact", three.weights)
    } else {
        failures.join("; ")
    };
    Check::new("importance-weights", failures.is_empty(), detail)
}
