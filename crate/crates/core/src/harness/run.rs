use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Arm, ExperimentConfig, SubjectMode};
use crate::calib::{make_teacher, sample_dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::fitness::FitnessRecord;
use crate::linalg::Matrix;
use crate::model::{init_model, loss, Sample, ToyVLM};
use crate::obs::{apply_policy, LayerMasks};
use crate::policy::{evaluate_policy, evolve_round, EvalCache, Policy, Population};
use crate::seed::derive_seed;
use crate::space::{evolve_projector, importance_weights, ImportanceWeights};

/// The subject model and the two data splits of one seeded task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub subject: ToyVLM,
    pub proxy: Vec<Sample>,
    pub holdout: Vec<Sample>,
}

/// Builds the teacher, draws both splits from it and constructs the subject
/// model, all from `config.master_seed`.
pub fn make_task(config: &ExperimentConfig) -> Result<TaskData> {
    config.validate()?;
    let seed = config.master_seed;
    let teacher = make_teacher(config.model, seed)?;
    let proxy = sample_dataset(
        &teacher,
        &DatasetSpec {
            n_samples: config.n_proxy,
            seq_len: config.proxy_len,
            seed,
            split: Split::Proxy,
        },
    )?;
    let holdout = sample_dataset(
        &teacher,
        &DatasetSpec {
            n_samples: config.n_holdout,
            seq_len: config.holdout_len,
            seed,
            split: Split::Holdout,
        },
    )?;
    let fresh = || init_model(config.model, derive_seed(seed, "subject", 0));
    let subject = match config.subject {
        SubjectMode::Teacher => teacher,
        SubjectMode::TeacherBody => teacher.with_projector(fresh()?.projector)?,
        SubjectMode::Independent => fresh()?,
    };
    Ok(TaskData { subject, proxy, holdout })
}

/// One line of the results log: a single fitness evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub round: usize,
    pub member: usize,
    pub policy: Policy,
    pub proxy_loss: f64,
    pub gen_proxy: f64,
    pub fitness: f64,
    pub eval_seed: u64,
}

impl LogRecord {
    fn new(round: usize, member: usize, r: FitnessRecord) -> Self {
        LogRecord {
            round,
            member,
            policy: r.policy,
            proxy_loss: r.proxy_loss,
            gen_proxy: r.gen_proxy,
            fitness: r.fitness,
            eval_seed: r.eval_seed,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialise")
    }
}

/// Wall-clock seconds per phase. `total` is measured independently of the
/// phases, from the start of the run to the end.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub data: f64,
    pub evaluate: f64,
    pub evolve: f64,
    pub holdout: f64,
    pub io: f64,
    pub total: f64,
}

impl PhaseTimes {
    pub fn accounted(&self) -> f64 {
        self.data + self.evaluate + self.evolve + self.holdout + self.io
    }
}

/// Everything needed to continue a run after round `next_round - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub arm: Arm,
    pub next_round: usize,
    pub population: Population,
    pub projector: Matrix,
    pub round_best: Vec<f64>,
    /// Learning rate of each round's accepted projector update; 0 when the
    /// update was rejected or the arm does not evolve.
    pub evo_lr: Vec<f64>,
    pub best: Option<(Policy, f64)>,
    /// Results-log lines written so far.
    pub log_lines: usize,
}

impl SearchState {
    pub fn initial(config: &ExperimentConfig, arm: Arm, task: &TaskData) -> Result<Self> {
        let grid = config.grid()?;
        let n = config.model.n_blocks;
        let population = if arm.searches() {
            Population::sample(grid, n, config.n_pop, config.master_seed)
        } else {
            Population {
                members: vec![Policy::uniform(grid, n)],
                generation: 0,
            }
        };
        Ok(SearchState {
            arm,
            next_round: 0,
            population,
            projector: task.subject.projector.clone(),
            round_best: Vec::new(),
            evo_lr: Vec::new(),
            best: None,
            log_lines: 0,
        })
    }

    fn rounds(config: &ExperimentConfig, arm: Arm) -> usize {
        if arm.searches() {
            config.rounds
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub master_seed: u64,
    pub p0: f64,
    pub n_proxy: usize,
    pub proxy_len: usize,
    pub best_policy: Policy,
    pub best_fitness: f64,
    pub round_best: Vec<f64>,
    pub evo_lr: Vec<f64>,
    pub records: Vec<LogRecord>,
    /// Loss on the holdout split of the best policy applied to the final model.
    pub holdout_loss: f64,
    /// Holdout loss of `[p₀; n_blocks]` applied to the unevolved subject.
    pub uniform_holdout_loss: f64,
    /// Realised fraction of zeroed prunable weights in the final model.
    pub sparsity: f64,
    pub timing: PhaseTimes,
    #[serde(skip)]
    pub final_model: Option<ToyVLM>,
    #[serde(skip)]
    pub final_masks: Option<LayerMasks>,
}

impl RunResult {
    /// Equality of everything except wall-clock timing.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let strip = |r: &RunResult| {
            let mut v = serde_json::to_value(r).expect("serialisable");
            v.as_object_mut().expect("object").remove("timing");
            v
        };
        strip(self) == strip(other) && self.final_model == other.final_model && self.final_masks == other.final_masks
    }
}

pub(crate) type Observer<'a> = dyn FnMut(&SearchState, &[LogRecord]) -> Result<()> + 'a;

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs `arm` on an already-built task, continuing from `state` (with
/// `prior` holding the records already logged), and reports each completed
/// round to `observer`.
pub(crate) fn execute(
    config: &ExperimentConfig,
    arm: Arm,
    task: &TaskData,
    mut state: SearchState,
    prior: Vec<LogRecord>,
    observer: &mut Observer<'_>,
    mut timing: PhaseTimes,
    started: Instant,
) -> Result<RunResult> {
    config.validate()?;
    let params = config.search_params(arm);
    let mut model = task.subject.with_projector(state.projector.clone())?;
    let mut cache = EvalCache::new();
    let mut records = prior;

    for round in state.next_round..SearchState::rounds(config, arm) {
        let t = Instant::now();
        let (round_records, next, elites) = if arm.searches() {
            let out = evolve_round(&state.population, &model, &task.proxy, &params, &mut cache)?;
            (out.records, out.next, out.elites)
        } else {
            let policy = &state.population.members[0];
            let mut eval = evaluate_policy(&model, policy, &task.proxy, &params).map_err(|e| Error::Candidate {
                round,
                member: 0,
                policy: policy.ratios(),
                source: Box::new(e),
            })?;
            eval.record.eval_seed = derive_seed(derive_seed(config.master_seed, "population.evaluate", 0), "member", 0);
            (vec![eval.record.clone()], state.population.clone(), vec![eval])
        };
        timing.evaluate += secs(t);

        let best = &elites[0];
        let mut accepted_lr = 0.0;
        if arm.evolves() {
            let t = Instant::now();
            let stage = |e| Error::Round {
                round,
                stage: "projector evolution",
                source: Box::new(e),
            };
            let candidates: Vec<ToyVLM> = elites.iter().map(|e| e.pruned.clone()).collect();
            let weights = if arm.importance_weighted() {
                let policies: Vec<Policy> = elites.iter().map(|e| e.record.policy.clone()).collect();
                importance_weights(&policies, config.neighborhood).map_err(stage)?
            } else {
                ImportanceWeights::uniform(candidates.len(), config.neighborhood)
            };
            let mut lr = config.lr;
            for _ in 0..=config.evo_retries {
                let evolved = evolve_projector(&model, &candidates, &weights, &task.proxy, lr, config.evo_steps).map_err(stage)?;
                let check = evaluate_policy(&evolved, &best.record.policy, &task.proxy, &params).map_err(stage)?;
                // keep the update only if the round's best stays at least as good
                if check.record.fitness <= best.record.fitness {
                    model = evolved;
                    cache.insert(&model, check);
                    accepted_lr = lr;
                    break;
                }
                lr *= 0.5;
            }
            timing.evolve += secs(t);
        }

        let logged: Vec<LogRecord> = round_records
            .into_iter()
            .enumerate()
            .map(|(m, r)| LogRecord::new(round, m, r))
            .collect();
        state.round_best.push(best.record.fitness);
        state.evo_lr.push(accepted_lr);
        state.best = Some((best.record.policy.clone(), best.record.fitness));
        state.population = next;
        state.projector = model.projector.clone();
        state.next_round = round + 1;
        state.log_lines += logged.len();

        let t = Instant::now();
        observer(&state, &logged)?;
        timing.io += secs(t);
        records.extend(logged);
    }

    let t = Instant::now();
    let (best_policy, best_fitness) = state
        .best
        .clone()
        .ok_or_else(|| Error::InvalidConfig("run finished without evaluating a policy".into()))?;
    let opts = config.prune_options();
    let final_pruned = apply_policy(&model, &best_policy, &task.proxy, &opts)?;
    let holdout_loss = loss(&final_pruned.model, &task.holdout)?;
    let uniform = Policy::uniform(config.grid()?, config.model.n_blocks);
    let uniform_holdout_loss = if arm == Arm::Uniform {
        holdout_loss
    } else {
        loss(&apply_policy(&task.subject, &uniform, &task.proxy, &opts)?.model, &task.holdout)?
    };
    timing.holdout += secs(t);
    timing.total = secs(started);

    Ok(RunResult {
        arm,
        master_seed: config.master_seed,
        p0: config.p0,
        n_proxy: config.n_proxy,
        proxy_len: config.proxy_len,
        best_policy,
        best_fitness,
        round_best: state.round_best,
        evo_lr: state.evo_lr,
        records,
        holdout_loss,
        uniform_holdout_loss,
        sparsity: final_pruned.masks.zeros() as f64 / final_pruned.masks.total() as f64,
        timing,
        final_model: Some(final_pruned.model),
        final_masks: Some(final_pruned.masks),
    })
}

/// Runs `arm` in memory on a prepared task.
pub fn run_arm_with_task(config: &ExperimentConfig, arm: Arm, task: &TaskData) -> Result<RunResult> {
    let started = Instant::now();
    let state = SearchState::initial(config, arm, task)?;
    execute(config, arm, task, state, Vec::new(), &mut |_, _| Ok(()), PhaseTimes::default(), started)
}

/// Builds the task for `config` and runs `arm` in memory.
pub fn run_arm(config: &ExperimentConfig, arm: Arm) -> Result<RunResult> {
    let started = Instant::now();
    let task = make_task(config)?;
    let timing = PhaseTimes {
        data: secs(started),
        ..PhaseTimes::default()
    };
    let state = SearchState::initial(config, arm, &task)?;
    execute(config, arm, &task, state, Vec::new(), &mut |_, _| Ok(()), timing, started)
}

pub fn run_search(config: &ExperimentConfig) -> Result<RunResult> {
    run_arm(config, Arm::Full)
}

pub fn run_uniform(config: &ExperimentConfig) -> Result<RunResult> {
    run_arm(config, Arm::Uniform)
}

pub fn run_auto_no_gen(config: &ExperimentConfig) -> Result<RunResult> {
    run_arm(config, Arm::NoGen)
}

pub fn run_no_evo(config: &ExperimentConfig) -> Result<RunResult> {
    run_arm(config, Arm::NoEvo)
}

pub fn run_evo_no_ub(config: &ExperimentConfig) -> Result<RunResult> {
    run_arm(config, Arm::EvoNoUb)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub n: usize,
    pub s: usize,
    pub result: RunResult,
}

/// The full pipeline for every `(n, s)` pair of proxy-set size and
/// sequence length. The proxy set is drawn once at the largest size and
/// sliced, which is exact because datasets are prefix-stable.
pub fn run_ablation_grid(config: &ExperimentConfig, n_values: &[usize], s_values: &[usize]) -> Result<Vec<GridRow>> {
    if n_values.is_empty() || s_values.is_empty() {
        return Err(Error::InvalidConfig("ablation grid needs at least one n and one s".into()));
    }
    let base = ExperimentConfig {
        n_proxy: *n_values.iter().max().expect("non-empty"),
        proxy_len: *s_values.iter().max().expect("non-empty"),
        ..config.clone()
    };
    let task = make_task(&base)?;
    let mut rows = Vec::with_capacity(n_values.len() * s_values.len());
    for &n in n_values {
        for &s in s_values {
            let cell = ExperimentConfig {
                n_proxy: n,
                proxy_len: s,
                ..config.clone()
            };
            cell.validate()?;
            let cell_task = TaskData {
                subject: task.subject.clone(),
                proxy: task.proxy[..n].iter().map(|x| x.truncated(s)).collect(),
                holdout: task.holdout.clone(),
            };
            rows.push(GridRow {
                n,
                s,
                result: run_arm_with_task(&cell, Arm::Full, &cell_task)?,
            });
        }
    }
    Ok(rows)
}
