//! Experiment orchestration: configuration, the search loop with projector
//! evolution, baseline and ablation arms, and on-disk run directories.

mod run;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::obs::{CalibrationMode, PruneOptions};
use crate::policy::{RatioGrid, SearchParams};

pub use run::{
    make_task, run_ablation_grid, run_arm, run_arm_with_task, run_auto_no_gen, run_evo_no_ub, run_no_evo, run_search,
    run_uniform, GridRow, LogRecord, PhaseTimes, RunResult, SearchState, TaskData,
};
pub use store::{
    read_log, report_csv, verify_log, LogCheck, OpenMode, RunDir, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, MASKS_FILE,
    SUMMARY_FILE,
};

/// Which subject model the pipeline prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectMode {
    /// The teacher's language blocks with an independently drawn projector:
    /// a trained language model whose vision alignment is still poor.
    #[default]
    TeacherBody,
    /// The teacher itself, projector included.
    Teacher,
    /// A fresh random model unrelated to the teacher.
    Independent,
}

/// The pipeline variants compared in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Search with the norm term, plus importance-weighted projector evolution.
    Full,
    /// `[p₀; n_blocks]`, no search, no evolution.
    Uniform,
    /// Full pipeline with `eta = 0`.
    NoGen,
    /// Search only; the projector is never updated.
    NoEvo,
    /// Evolution with equal candidate weights instead of importance weights.
    EvoNoUb,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::Uniform, Arm::NoGen, Arm::NoEvo, Arm::EvoNoUb];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::Uniform => "uniform",
            Arm::NoGen => "no-gen",
            Arm::NoEvo => "no-evo",
            Arm::EvoNoUb => "evo-no-ub",
        }
    }

    pub fn searches(self) -> bool {
        self != Arm::Uniform
    }

    pub fn evolves(self) -> bool {
        matches!(self, Arm::Full | Arm::NoGen | Arm::EvoNoUb)
    }

    pub fn importance_weighted(self) -> bool {
        self != Arm::EvoNoUb
    }

    pub fn eta(self, configured: f64) -> f64 {
        if self == Arm::NoGen {
            0.0
        } else {
            configured
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm {s:?}")))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub p0: f64,
    pub n_pop: usize,
    pub k_elite: usize,
    pub rounds: usize,
    pub eta: f64,
    pub n_proxy: usize,
    pub proxy_len: usize,
    pub n_holdout: usize,
    pub holdout_len: usize,
    pub lr: f64,
    pub evo_steps: usize,
    /// Learning-rate halvings tried when an update would worsen the best
    /// elite's fitness; the update is dropped after the last one.
    pub evo_retries: usize,
    pub neighborhood: usize,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub damping: f64,
    pub blocksize: usize,
    pub calibration: CalibrationMode,
    pub subject: SubjectMode,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            master_seed: 0,
            p0: 0.5,
            n_pop: 16,
            k_elite: 4,
            rounds: 10,
            eta: 0.1,
            n_proxy: 64,
            proxy_len: 256.min(model.seq_len),
            n_holdout: 256,
            holdout_len: model.seq_len,
            lr: 1.0,
            evo_steps: 8,
            evo_retries: 3,
            neighborhood: 5,
            mutation_rate: 0.2,
            tournament_size: 2,
            damping: 0.01,
            blocksize: 16,
            calibration: CalibrationMode::Sequential,
            subject: SubjectMode::TeacherBody,
            model,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        RatioGrid::new(self.p0)?;
        let counts = [
            ("n_pop", self.n_pop),
            ("k_elite", self.k_elite),
            ("rounds", self.rounds),
            ("n_proxy", self.n_proxy),
            ("n_holdout", self.n_holdout),
            ("evo_steps", self.evo_steps),
            ("neighborhood", self.neighborhood),
            ("tournament_size", self.tournament_size),
            ("blocksize", self.blocksize),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.k_elite > self.n_pop {
            return Err(Error::InvalidConfig(format!("k_elite {} exceeds n_pop {}", self.k_elite, self.n_pop)));
        }
        for (name, len) in [("proxy_len", self.proxy_len), ("holdout_len", self.holdout_len)] {
            if len < 2 || len > self.model.seq_len {
                return Err(Error::InvalidConfig(format!("{name} {len} must be in 2..={}", self.model.seq_len)));
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("eta {} must be finite and >= 0", self.eta)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr {} must be finite and > 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::InvalidConfig(format!("mutation_rate {} must be in [0, 1]", self.mutation_rate)));
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::InvalidConfig(format!("damping {} must be finite and >= 0", self.damping)));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<RatioGrid> {
        RatioGrid::new(self.p0)
    }

    pub fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            damping: self.damping,
            blocksize: self.blocksize,
            calibration: self.calibration,
        }
    }

    pub fn search_params(&self, arm: Arm) -> SearchParams {
        SearchParams {
            eta: arm.eta(self.eta),
            k_elite: self.k_elite,
            mutation_rate: self.mutation_rate,
            tournament_size: self.tournament_size,
            prune: self.prune_options(),
            master_seed: self.master_seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
