//! Constrained evolutionary search over per-block pruning ratios.
//!
//! A policy assigns each block a ratio from the five-point grid
//! `{p₀ − 0.10, p₀ − 0.05, p₀, p₀ + 0.05, p₀ + 0.10}` and must keep its mean
//! within `p₀ ± 0.01`. Ratios are stored as integer grid steps in `-2..=2`,
//! which makes the mean constraint the exact integer test
//! `5 · |Σ steps| ≤ n_blocks`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{fitness_from_loss, FitnessRecord};
use crate::linalg::Matrix;
use crate::model::{Sample, ToyVLM};
use crate::obs::{apply_policy, LayerMasks, PruneOptions};
use crate::seed::{derive_seed, rng_for, Rng};

pub const GRID_STEP_CENTS: i32 = 5;
pub const MAX_STEP: i8 = 2;

/// The ratio grid around a centre `p₀`, held in hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatioGrid {
    center_cents: i32,
}

impl RatioGrid {
    /// `p0` must be a multiple of 0.01 in `[0.1, 0.9]` so every grid point
    /// lies in `[0, 1]`.
    pub fn new(p0: f64) -> Result<Self> {
        let cents = (p0 * 100.0).round();
        if !p0.is_finite() || (p0 * 100.0 - cents).abs() > 1e-6 || !(10.0..=90.0).contains(&cents) {
            return Err(Error::InvalidConfig(format!(
                "p0 {p0} must be a multiple of 0.01 in [0.1, 0.9]"
            )));
        }
        Ok(RatioGrid {
            center_cents: cents as i32,
        })
    }

    pub fn p0(&self) -> f64 {
        self.center_cents as f64 / 100.0
    }

    pub fn ratio(&self, step: i8) -> f64 {
        (self.center_cents + GRID_STEP_CENTS * step as i32) as f64 / 100.0
    }

    pub fn points(&self) -> [f64; 5] {
        [-2, -1, 0, 1, 2].map(|s| self.ratio(s))
    }

    /// Grid step for a ratio, if it is (numerically) a grid point.
    pub fn step_of(&self, ratio: f64) -> Option<i8> {
        let steps = (ratio * 100.0 - self.center_cents as f64) / GRID_STEP_CENTS as f64;
        let s = steps.round();
        if (steps - s).abs() > 1e-6 || s.abs() > MAX_STEP as f64 {
            return None;
        }
        Some(s as i8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct Policy {
    grid: RatioGrid,
    steps: Vec<i8>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    p0: f64,
    ratios: Vec<f64>,
}

impl From<Policy> for PolicyRepr {
    fn from(p: Policy) -> Self {
        PolicyRepr {
            p0: p.grid.p0(),
            ratios: p.ratios(),
        }
    }
}

impl TryFrom<PolicyRepr> for Policy {
    type Error = Error;

    fn try_from(r: PolicyRepr) -> Result<Self> {
        Policy::from_ratios(r.p0, &r.ratios)
    }
}

fn feasible(steps: &[i8]) -> bool {
    let sum: i32 = steps.iter().map(|&s| s as i32).sum();
    GRID_STEP_CENTS * sum.abs() <= steps.len() as i32
}

impl Policy {
    pub fn uniform(grid: RatioGrid, n_blocks: usize) -> Self {
        Policy {
            grid,
            steps: vec![0; n_blocks],
        }
    }

    /// A policy from grid steps; rejects off-grid steps and infeasible means.
    pub fn from_steps(grid: RatioGrid, steps: Vec<i8>) -> Result<Self> {
        let p = Policy { grid, steps };
        p.check()?;
        Ok(p)
    }

    pub fn from_ratios(p0: f64, ratios: &[f64]) -> Result<Self> {
        let grid = RatioGrid::new(p0)?;
        let steps = ratios
            .iter()
            .map(|&r| {
                grid.step_of(r)
                    .ok_or_else(|| Error::InvalidPolicy(format!("ratio {r} is not on the grid around {p0}")))
            })
            .collect::<Result<_>>()?;
        Policy::from_steps(grid, steps)
    }

    pub fn grid(&self) -> RatioGrid {
        self.grid
    }

    pub fn steps(&self) -> &[i8] {
        &self.steps
    }

    pub fn n_blocks(&self) -> usize {
        self.steps.len()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| self.grid.ratio(s)).collect()
    }

    pub fn mean_ratio(&self) -> f64 {
        self.ratios().iter().sum::<f64>() / self.n_blocks() as f64
    }

    /// Verifies every invariant: non-empty, on-grid, mean within `p₀ ± 0.01`.
    pub fn check(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidPolicy("policy has no blocks".into()));
        }
        if self.steps.iter().any(|s| s.abs() > MAX_STEP) {
            return Err(Error::InvalidPolicy(format!("steps {:?} leave the grid", self.steps)));
        }
        if !feasible(&self.steps) {
            return Err(Error::InvalidPolicy(format!(
                "mean ratio {:.4} outside {:.2} ± 0.01",
                self.mean_ratio(),
                self.grid.p0()
            )));
        }
        Ok(())
    }
}

/// Moves uniformly chosen ratios one grid step toward `p₀` until the mean
/// constraint holds. Each move shifts the mean by `0.05 / n_blocks` toward
/// `p₀`, so this terminates.
pub fn repair(mut policy: Policy, rng: &mut Rng) -> Policy {
    loop {
        let sum: i32 = policy.steps.iter().map(|&s| s as i32).sum();
        if GRID_STEP_CENTS * sum.abs() <= policy.steps.len() as i32 {
            return policy;
        }
        let movable: Vec<usize> = (0..policy.steps.len())
            .filter(|&i| (sum > 0 && policy.steps[i] > 0) || (sum < 0 && policy.steps[i] < 0))
            .collect();
        let &i = movable.choose(rng).expect("a non-zero sum has an entry of its sign");
        policy.steps[i] -= sum.signum() as i8;
    }
}

pub fn sample_policy(grid: RatioGrid, n_blocks: usize, rng: &mut Rng) -> Policy {
    let steps = (0..n_blocks).map(|_| rng.gen_range(-MAX_STEP..=MAX_STEP)).collect();
    repair(Policy { grid, steps }, rng)
}

/// Shifts each gene one grid step up or down with probability `rate`,
/// clamped to the grid ends, then repairs.
pub fn mutate(policy: &Policy, rate: f64, rng: &mut Rng) -> Policy {
    let mut out = policy.clone();
    if rate <= 0.0 {
        return out;
    }
    for s in &mut out.steps {
        if rng.gen::<f64>() < rate {
            let delta = if rng.gen::<bool>() { 1 } else { -1 };
            *s = (*s + delta).clamp(-MAX_STEP, MAX_STEP);
        }
    }
    repair(out, rng)
}

/// Uniform crossover followed by repair.
pub fn crossover(a: &Policy, b: &Policy, rng: &mut Rng) -> Policy {
    debug_assert_eq!(a.n_blocks(), b.n_blocks());
    let steps = a
        .steps
        .iter()
        .zip(&b.steps)
        .map(|(&x, &y)| if rng.gen::<bool>() { x } else { y })
        .collect();
    repair(Policy { grid: a.grid, steps }, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Policy>,
    pub generation: usize,
}

impl Population {
    /// Generation zero: `n_pop` independently sampled feasible policies.
    pub fn sample(grid: RatioGrid, n_blocks: usize, n_pop: usize, master_seed: u64) -> Self {
        let members = (0..n_pop)
            .map(|i| sample_policy(grid, n_blocks, &mut rng_for(master_seed, "population.init", i as u64)))
            .collect();
        Population {
            members,
            generation: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub eta: f64,
    pub k_elite: usize,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub prune: PruneOptions,
    pub master_seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            eta: 0.1,
            k_elite: 4,
            mutation_rate: 0.2,
            tournament_size: 2,
            prune: PruneOptions::default(),
            master_seed: 0,
        }
    }
}

/// A scored candidate together with its pruned model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: FitnessRecord,
    pub pruned: ToyVLM,
    pub masks: LayerMasks,
}

/// Prunes `model` with `policy` (OBS, calibrated on `proxy`) and scores it.
pub fn evaluate_policy(model: &ToyVLM, policy: &Policy, proxy: &[Sample], params: &SearchParams) -> Result<Evaluation> {
    policy.check()?;
    let pruned = apply_policy(model, policy, proxy, &params.prune)?;
    let proxy_loss = match pruned.calib_loss {
        Some(l) => l,
        None => crate::model::loss(&pruned.model, proxy)?,
    };
    let record = fitness_from_loss(&pruned.model, policy, proxy_loss, params.eta, params.master_seed)?;
    Ok(Evaluation {
        record,
        pruned: pruned.model,
        masks: pruned.masks,
    })
}

/// Evaluations keyed by policy, valid for one projector value. Looking up
/// with a different projector clears the cache.
#[derive(Debug, Default)]
pub struct EvalCache {
    projector: Option<Matrix>,
    entries: HashMap<Policy, Evaluation>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn sync(&mut self, model: &ToyVLM) {
        if self.projector.as_ref() != Some(&model.projector) {
            self.entries.clear();
            self.projector = Some(model.projector.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Stores an evaluation made against `model`'s projector.
    pub fn insert(&mut self, model: &ToyVLM, eval: Evaluation) {
        self.sync(model);
        self.entries.insert(eval.record.policy.clone(), eval);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Evaluates every policy not yet cached (concurrently) and returns the
    /// evaluations in input order.
    pub fn evaluate_all(
        &mut self,
        model: &ToyVLM,
        policies: &[Policy],
        proxy: &[Sample],
        params: &SearchParams,
    ) -> std::result::Result<Vec<Evaluation>, (usize, Error)> {
        self.sync(model);
        let mut pending: Vec<(usize, &Policy)> = Vec::new();
        for (i, p) in policies.iter().enumerate() {
            if !self.entries.contains_key(p) && !pending.iter().any(|(_, q)| *q == p) {
                pending.push((i, p));
            }
        }
        let fresh: Vec<(usize, Result<Evaluation>)> = pending
            .par_iter()
            .map(|&(i, p)| (i, evaluate_policy(model, p, proxy, params)))
            .collect();
        for (i, res) in fresh {
            let eval = res.map_err(|e| (i, e))?;
            self.entries.insert(policies[i].clone(), eval);
        }
        Ok(policies.iter().map(|p| self.entries[p].clone()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub next: Population,
    /// One record per member, in member order.
    pub records: Vec<FitnessRecord>,
    /// The `k_elite` best evaluations, best first.
    pub elites: Vec<Evaluation>,
}

fn tournament(n_elites: usize, size: usize, rng: &mut Rng) -> usize {
    // elites are sorted best first, so the smallest drawn index wins
    (0..size.max(1)).map(|_| rng.gen_range(0..n_elites)).min().expect("size >= 1")
}

/// One generation: prune and score every member, keep the `k_elite` lowest
/// fitness members unchanged, and fill the remaining slots with mutated
/// crossovers of tournament-selected elites.
pub fn evolve_round(
    pop: &Population,
    model: &ToyVLM,
    proxy: &[Sample],
    params: &SearchParams,
    cache: &mut EvalCache,
) -> Result<RoundOutcome> {
    if pop.members.is_empty() {
        return Err(Error::InvalidConfig("population is empty".into()));
    }
    if params.k_elite == 0 || params.k_elite > pop.members.len() {
        return Err(Error::InvalidConfig(format!(
            "k_elite {} must be in 1..={}",
            params.k_elite,
            pop.members.len()
        )));
    }
    let mut evals = cache
        .evaluate_all(model, &pop.members, proxy, params)
        .map_err(|(member, e)| Error::Candidate {
            round: pop.generation,
            member,
            policy: pop.members[member].ratios(),
            source: Box::new(e),
        })?;

    let round_seed = derive_seed(params.master_seed, "population.evaluate", pop.generation as u64);
    for (i, e) in evals.iter_mut().enumerate() {
        e.record.eval_seed = derive_seed(round_seed, "member", i as u64);
    }

    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&a, &b| evals[a].record.fitness.total_cmp(&evals[b].record.fitness).then(a.cmp(&b)));
    let elites: Vec<Evaluation> = order[..params.k_elite].iter().map(|&i| evals[i].clone()).collect();

    let mut members: Vec<Policy> = elites.iter().map(|e| e.record.policy.clone()).collect();
    let gen_seed = derive_seed(params.master_seed, "population.reproduce", pop.generation as u64);
    for c in members.len()..pop.members.len() {
        let mut rng = rng_for(gen_seed, "child", c as u64);
        let a = tournament(elites.len(), params.tournament_size, &mut rng);
        let b = tournament(elites.len(), params.tournament_size, &mut rng);
        let child = crossover(&members[a], &members[b], &mut rng);
        members.push(mutate(&child, params.mutation_rate, &mut rng));
    }

    Ok(RoundOutcome {
        next: Population {
            members,
            generation: pop.generation + 1,
        },
        records: evals.into_iter().map(|e| e.record).collect(),
        elites,
    })
}
