//! Search-space evolution: importance weights over candidate policies and
//! gradient descent on the projector against the weighted proxy loss.
//!
//! Candidate `m` gets weight `c_m = softmax(-d_m)`, where `d_m` sums the
//! squared Euclidean distances from its ratio vector to its nearest other
//! candidates. The projector then descends `Σ_m c_m L_m`, the weighted loss
//! of the candidates' pruned models. The weighted loss is minimised.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{loss, loss_and_grad_projector, Sample, ToyVLM};
use crate::policy::{Policy, GRID_STEP_CENTS};

pub const DEFAULT_NEIGHBORHOOD: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    pub neighborhood_size: usize,
}

impl ImportanceWeights {
    /// Equal weights `1/M`, used when importance weighting is ablated.
    pub fn uniform(m: usize, neighborhood_size: usize) -> Self {
        ImportanceWeights {
            weights: vec![1.0 / m as f64; m],
            neighborhood_size,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `softmax(-d)`, shifted by `min d` for stability.
pub fn softmax_neg(d: &[f64]) -> Vec<f64> {
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|&x| (min - x).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Summed squared distance from each point to its `min(k, M-1)` nearest
/// other points; ties go to the lower index.
fn neighborhood_sums<T, F>(n: usize, k: usize, dist: F) -> Vec<T>
where
    T: Copy + PartialOrd + std::iter::Sum<T>,
    F: Fn(usize, usize) -> T,
{
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .map(|m| {
            let mut others: Vec<(T, usize)> = (0..n).filter(|&o| o != m).map(|o| (dist(m, o), o)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
            others[..k].iter().map(|&(d, _)| d).sum()
        })
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("importance weights need at least one candidate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("neighborhood size must be >= 1".into()));
    }
    Ok(())
}

/// Weights for grid policies. Distances are computed in integer grid steps
/// and scaled once, so they carry no rounding error.
pub fn importance_weights(candidates: &[Policy], neighborhood_size: usize) -> Result<ImportanceWeights> {
    check_k(candidates.len(), neighborhood_size)?;
    let n = candidates[0].n_blocks();
    if let Some(bad) = candidates.iter().find(|p| p.n_blocks() != n || p.grid() != candidates[0].grid()) {
        return Err(Error::dims("importance_weights", format!("{n} blocks"), format!("{} blocks", bad.n_blocks())));
    }
    let sums: Vec<i64> = neighborhood_sums(candidates.len(), neighborhood_size, |a, b| {
        candidates[a]
            .steps()
            .iter()
            .zip(candidates[b].steps())
            .map(|(&x, &y)| ((x - y) as i64).pow(2))
            .sum::<i64>()
    });
    let unit = (GRID_STEP_CENTS as f64 / 100.0).powi(2);
    let min = *sums.iter().min().expect("non-empty");
    // subtracting in integers first keeps the shift invariance exact
    let d: Vec<f64> = sums.iter().map(|&s| (s - min) as f64 * unit).collect();
    Ok(ImportanceWeights {
        weights: softmax_neg(&d),
        neighborhood_size,
    })
}

/// Weights for arbitrary real ratio vectors.
pub fn importance_weights_from_ratios<P: AsRef<[f64]>>(candidates: &[P], neighborhood_size: usize) -> Result<ImportanceWeights> {
    check_k(candidates.len(), neighborhood_size)?;
    let n = candidates[0].as_ref().len();
    if let Some(bad) = candidates.iter().find(|p| p.as_ref().len() != n) {
        return Err(Error::dims("importance_weights", format!("{n} ratios"), format!("{} ratios", bad.as_ref().len())));
    }
    let sums = neighborhood_sums(candidates.len(), neighborhood_size, |a, b| {
        candidates[a]
            .as_ref()
            .iter()
            .zip(candidates[b].as_ref())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    });
    Ok(ImportanceWeights {
        weights: softmax_neg(&sums),
        neighborhood_size,
    })
}

fn check_candidates(model: &ToyVLM, candidates: &[ToyVLM], weights: &ImportanceWeights) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("projector evolution needs at least one candidate".into()));
    }
    if weights.len() != candidates.len() {
        return Err(Error::dims("evolve_projector", format!("{} weights", candidates.len()), format!("{} weights", weights.len())));
    }
    if let Some(c) = candidates.iter().find(|c| c.config != model.config) {
        return Err(Error::dims("evolve_projector", format!("{:?}", model.config), format!("{:?}", c.config)));
    }
    Ok(())
}

/// `Σ_m c_m L_m` and its projector gradient, with every candidate's
/// projector replaced by `projector`. Per-candidate work runs concurrently;
/// the reduction is in candidate order.
pub fn weighted_objective_and_gradient(
    projector: &Matrix,
    candidates: &[ToyVLM],
    weights: &ImportanceWeights,
    proxy: &[Sample],
) -> Result<(f64, Matrix)> {
    let parts: Vec<(f64, Matrix)> = candidates
        .par_iter()
        .map(|c| loss_and_grad_projector(&c.with_projector(projector.clone())?, proxy))
        .collect::<Result<_>>()?;
    let mut grad = Matrix::zeros(projector.rows(), projector.cols());
    let mut objective = 0.0;
    for ((l, g), &c) in parts.iter().zip(&weights.weights) {
        objective += c * l;
        grad.add_assign_scaled(g, c);
    }
    Ok((objective, grad))
}

pub fn weighted_projector_gradient(
    projector: &Matrix,
    candidates: &[ToyVLM],
    weights: &ImportanceWeights,
    proxy: &[Sample],
) -> Result<Matrix> {
    Ok(weighted_objective_and_gradient(projector, candidates, weights, proxy)?.1)
}

pub fn weighted_objective(projector: &Matrix, candidates: &[ToyVLM], weights: &ImportanceWeights, proxy: &[Sample]) -> Result<f64> {
    let losses: Vec<f64> = candidates
        .par_iter()
        .map(|c| loss(&c.with_projector(projector.clone())?, proxy))
        .collect::<Result<_>>()?;
    Ok(losses.iter().zip(&weights.weights).map(|(l, c)| c * l).sum())
}

/// `steps` full-batch gradient-descent updates of `model`'s projector on the
/// weighted loss of the pruned `candidates`. Only the projector of the
/// returned model differs from `model`.
pub fn evolve_projector(
    model: &ToyVLM,
    candidates: &[ToyVLM],
    weights: &ImportanceWeights,
    proxy: &[Sample],
    lr: f64,
    steps: usize,
) -> Result<ToyVLM> {
    Ok(evolve_projector_traced(model, candidates, weights, proxy, lr, steps)?.0)
}

/// As [`evolve_projector`], also returning the weighted objective before
/// each step (the final objective is not evaluated).
pub fn evolve_projector_traced(
    model: &ToyVLM,
    candidates: &[ToyVLM],
    weights: &ImportanceWeights,
    proxy: &[Sample],
    lr: f64,
    steps: usize,
) -> Result<(ToyVLM, Vec<f64>)> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be finite and > 0")));
    }
    check_candidates(model, candidates, weights)?;
    let mut projector = model.projector.clone();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (objective, grad) = weighted_objective_and_gradient(&projector, candidates, weights, proxy)?;
        projector.add_assign_scaled(&grad, -lr);
        if !projector.is_finite() {
            return Err(Error::NonFinite { op: "evolve_projector" });
        }
        trace.push(objective);
    }
    Ok((model.with_projector(projector)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{make_teacher, sample_dataset, DatasetSpec, Split};
    use crate::fitness::rademacher_proxy;
    use crate::model::{grad_projector, init_model, ModelConfig};
    use crate::obs::{apply_policy, PruneOptions};
    use crate::policy::{sample_policy, RatioGrid};
    use crate::seed::rng_for;

    fn grid() -> RatioGrid {
        RatioGrid::new(0.5).unwrap()
    }

    #[test]
    fn three_collinear_candidates() {
        let ps: Vec<Policy> = [-1, 0, 1]
            .iter()
            .map(|&s| Policy::from_steps(grid(), vec![s, 0, 0, 0, 0]).unwrap())
            .collect();
        // single block ratios (0.45, 0.5, 0.55) are infeasible alone, so the
        // offsets ride on a five-block policy; distances are unchanged
        let w = importance_weights(&ps, 2).unwrap();
        // d = (0.0125, 0.005, 0.0125)
        let (e, m) = ((-0.0125f64).exp(), (-0.005f64).exp());
        let z = 2.0 * e + m;
        let want = [e / z, m / z, e / z];
        for (a, b) in w.weights.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", w.weights);
        }
        assert!((w.weights[1] - 0.335002).abs() < 1e-6);
        assert!(w.weights[1] > w.weights[0] && w.weights[1] > w.weights[2]);
        let r = importance_weights_from_ratios(&[[0.0], [0.05], [0.10]], 2).unwrap();
        for (a, b) in r.weights.iter().zip(&w.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(importance_weights(&[Policy::uniform(grid(), 4)], 5).unwrap().weights, vec![1.0]);
        let same = vec![Policy::from_steps(grid(), vec![1, -1, 0, 0]).unwrap(); 7];
        for w in importance_weights(&same, 5).unwrap().weights {
            assert_eq!(w, 1.0 / 7.0);
        }
        assert!(importance_weights(&[], 5).is_err());
        assert!(importance_weights(&same, 0).is_err());
    }

    #[test]
    fn weights_sum_to_one_and_shift_invariant() {
        let ps: Vec<Policy> = (0..16).map(|i| sample_policy(grid(), 8, &mut rng_for(3, "t", i))).collect();
        let w = importance_weights(&ps, 5).unwrap();
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w.weights.iter().all(|&c| c > 0.0));
        let d = [0.25, 0.5, 0.125, 1.0];
        let shifted: Vec<f64> = d.iter().map(|x| x + 3.0).collect();
        assert_eq!(softmax_neg(&d), softmax_neg(&shifted));
    }

    struct Fixture {
        model: ToyVLM,
        candidates: Vec<ToyVLM>,
        proxy: Vec<Sample>,
    }

    fn fixture(seed: u64, n_candidates: usize) -> Fixture {
        let cfg = ModelConfig { n_blocks: 2, seq_len: 12, ..ModelConfig::default() };
        let teacher = make_teacher(cfg, seed).unwrap();
        let proxy = sample_dataset(&teacher, &DatasetSpec { n_samples: 6, seq_len: 12, seed, split: Split::Proxy }).unwrap();
        let model = init_model(cfg, seed).unwrap();
        let candidates = (0..n_candidates)
            .map(|i| {
                let p = sample_policy(grid(), 2, &mut rng_for(seed, "cand", i as u64));
                apply_policy(&model, &p, &proxy, &PruneOptions::default()).unwrap().model
            })
            .collect();
        Fixture { model, candidates, proxy }
    }

    #[test]
    fn zero_steps_is_identity() {
        let f = fixture(0, 2);
        let w = ImportanceWeights::uniform(2, 5);
        let out = evolve_projector(&f.model, &f.candidates, &w, &f.proxy, 1e-2, 0).unwrap();
        assert_eq!(out, f.model);
        assert!(evolve_projector(&f.model, &f.candidates, &w, &f.proxy, 0.0, 1).is_err());
    }

    #[test]
    fn single_candidate_loss_decreases() {
        for seed in 0..10 {
            let f = fixture(seed, 1);
            let w = ImportanceWeights::uniform(1, 5);
            let before = loss(&f.candidates[0], &f.proxy).unwrap();
            let out = evolve_projector(&f.model, &f.candidates, &w, &f.proxy, 1e-3, 1).unwrap();
            let after = loss(&f.candidates[0].with_projector(out.projector.clone()).unwrap(), &f.proxy).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn only_projector_changes() {
        let f = fixture(1, 3);
        let w = ImportanceWeights { weights: vec![0.2, 0.3, 0.5], neighborhood_size: 5 };
        let out = evolve_projector(&f.model, &f.candidates, &w, &f.proxy, 1e-2, 2).unwrap();
        assert_ne!(out.projector, f.model.projector);
        assert_eq!(out.with_projector(f.model.projector.clone()).unwrap(), f.model);
        assert_eq!(rademacher_proxy(&out), rademacher_proxy(&f.model));
    }

    #[test]
    fn weighted_gradient_is_convex_combination() {
        let f = fixture(2, 3);
        let w = ImportanceWeights { weights: vec![0.6, 0.3, 0.1], neighborhood_size: 5 };
        let g = weighted_projector_gradient(&f.model.projector, &f.candidates, &w, &f.proxy).unwrap();
        let mut want = Matrix::zeros(g.rows(), g.cols());
        for (c, m) in w.weights.iter().zip(&f.candidates) {
            want.add_assign_scaled(&grad_projector(m, &f.proxy).unwrap(), *c);
        }
        for (a, b) in g.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn objective_trend_is_monotone() {
        let mut ok = 0;
        for seed in 0..10 {
            let f = fixture(seed, 3);
            let w = ImportanceWeights::uniform(3, 5);
            let (out, mut trace) = evolve_projector_traced(&f.model, &f.candidates, &w, &f.proxy, 1e-2, 8).unwrap();
            trace.push(weighted_objective(&out.projector, &f.candidates, &w, &f.proxy).unwrap());
            if trace.windows(2).all(|p| p[1] <= p[0]) {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10 monotone");
    }
}
