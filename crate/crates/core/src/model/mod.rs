//! The desk-scale vision-language model: a linear projector that maps a
//! vision feature to prefix token(s), followed by pre-norm causal
//! transformer blocks with single-head attention and a GELU MLP.
//!
//! Only the six per-block weight matrices ([`MatrixRole`]) are prunable.
//! The projector is the only parameter that is ever trained.

mod backward;
mod checkpoint;
mod forward;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::rng_for;

pub use backward::{grad_projector, grad_projector_with, loss_and_grad_projector};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{forward, forward_with, loss, loss_with, ActivationCache, BlockCache, PrefixAttention};
pub(crate) use forward::{block_forward, ce_sum_from_hidden, embed, gelu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_vision: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_prefix: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vision: 16,
            d_model: 32,
            n_blocks: 4,
            d_ff: 64,
            vocab_size: 64,
            seq_len: 32,
            n_prefix: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_vision", self.d_vision),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff),
            ("n_prefix", self.n_prefix),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size does not fit token ids".into()));
        }
        Ok(())
    }

    /// Total positions: prefix tokens plus the longest text sequence.
    pub fn max_positions(&self) -> usize {
        self.n_prefix + self.seq_len
    }

    pub fn prunable_params(&self) -> usize {
        let d = self.d_model;
        self.n_blocks * (4 * d * d + 2 * d * self.d_ff)
    }
}

/// The six prunable weight matrices of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixRole {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 6] = [
        MatrixRole::Query,
        MatrixRole::Key,
        MatrixRole::Value,
        MatrixRole::Output,
        MatrixRole::Up,
        MatrixRole::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixRole::Query => "wq",
            MatrixRole::Key => "wk",
            MatrixRole::Value => "wv",
            MatrixRole::Output => "wo",
            MatrixRole::Up => "w_up",
            MatrixRole::Down => "w_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Block {
    pub fn weight(&self, role: MatrixRole) -> &Matrix {
        match role {
            MatrixRole::Query => &self.wq,
            MatrixRole::Key => &self.wk,
            MatrixRole::Value => &self.wv,
            MatrixRole::Output => &self.wo,
            MatrixRole::Up => &self.w_up,
            MatrixRole::Down => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, role: MatrixRole) -> &mut Matrix {
        match role {
            MatrixRole::Query => &mut self.wq,
            MatrixRole::Key => &mut self.wk,
            MatrixRole::Value => &mut self.wv,
            MatrixRole::Output => &mut self.wo,
            MatrixRole::Up => &mut self.w_up,
            MatrixRole::Down => &mut self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVLM {
    pub config: ModelConfig,
    /// `d_model × d_vision`.
    pub projector: Matrix,
    /// `vocab × d_model`.
    pub embed: Matrix,
    /// Position table for text tokens, `seq_len × d_model`; frozen. Prefix
    /// rows carry the projected vision feature alone.
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// `vocab × d_model`.
    pub head: Matrix,
}

impl ToyVLM {
    /// Prunable matrices in block-major, role order.
    pub fn prunable(&self) -> impl Iterator<Item = (usize, MatrixRole, &Matrix)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            MatrixRole::ALL
                .into_iter()
                .map(move |role| (b, role, block.weight(role)))
        })
    }

    /// Fraction of exactly-zero entries across the prunable set.
    pub fn prunable_sparsity(&self) -> f64 {
        let (zeros, total) = self
            .prunable()
            .fold((0usize, 0usize), |(z, t), (_, _, w)| (z + w.count_zeros(), t + w.len()));
        zeros as f64 / total as f64
    }

    pub fn with_projector(&self, projector: Matrix) -> Result<ToyVLM> {
        if projector.shape() != self.projector.shape() {
            return Err(Error::dims(
                "with_projector",
                format!("{:?}", self.projector.shape()),
                format!("{:?}", projector.shape()),
            ));
        }
        let mut m = self.clone();
        m.projector = projector;
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        let vecs = self
            .blocks
            .iter()
            .flat_map(|b| [&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias])
            .chain([&self.lnf_gain, &self.lnf_bias]);
        self.projector.is_finite()
            && self.embed.is_finite()
            && self.pos.is_finite()
            && self.head.is_finite()
            && self.prunable().all(|(_, _, w)| w.is_finite())
            && vecs.flat_map(|v| v.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `n_prefix × d_vision` values, row-major, one row per prefix token.
    pub vision: Vec<f64>,
    pub tokens: Vec<u32>,
}

impl Sample {
    /// Next-token targets: `targets()[t] == tokens[t + 1]`.
    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let want = config.n_prefix * config.d_vision;
        if self.vision.len() != want {
            return Err(Error::dims("Sample", format!("vision len {want}"), self.vision.len()));
        }
        if self.tokens.len() < 2 || self.tokens.len() > config.seq_len {
            return Err(Error::dims(
                "Sample",
                format!("2..={} tokens", config.seq_len),
                self.tokens.len(),
            ));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::dims("Sample", format!("token < {}", config.vocab_size), t));
        }
        if self.vision.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Sample" });
        }
        Ok(())
    }

    /// Copy truncated to the first `len` tokens.
    pub fn truncated(&self, len: usize) -> Sample {
        Sample {
            vision: self.vision.clone(),
            tokens: self.tokens[..len.min(self.tokens.len())].to_vec(),
        }
    }
}

fn gaussian(seed: u64, stream: &str, index: u64, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut rng = rng_for(seed, stream, index);
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
}

/// Seeded Gaussian initialisation with `1/sqrt(fan_in)` scale for every
/// linear map. Each tensor draws from its own named stream.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ToyVLM> {
    config.validate()?;
    let d = config.d_model;
    let ff = config.d_ff;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let blocks = (0..config.n_blocks as u64)
        .map(|b| Block {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: gaussian(seed, "block.wq", b, d, d, fan(d)),
            wk: gaussian(seed, "block.wk", b, d, d, fan(d)),
            wv: gaussian(seed, "block.wv", b, d, d, fan(d)),
            wo: gaussian(seed, "block.wo", b, d, d, fan(d)),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_up: gaussian(seed, "block.w_up", b, ff, d, fan(d)),
            w_down: gaussian(seed, "block.w_down", b, d, ff, fan(ff)),
        })
        .collect();
    Ok(ToyVLM {
        config,
        projector: gaussian(seed, "projector", 0, d, config.d_vision, fan(config.d_vision)),
        embed: gaussian(seed, "embed", 0, config.vocab_size, d, 1.0),
        pos: gaussian(seed, "pos", 0, config.seq_len, d, 0.5),
        blocks,
        lnf_gain: vec![1.0; d],
        lnf_bias: vec![0.0; d],
        head: gaussian(seed, "head", 0, config.vocab_size, d, fan(d)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a = init_model(cfg, 1).unwrap();
        assert_eq!(a, init_model(cfg, 1).unwrap());
        let b = init_model(cfg, 2).unwrap();
        assert_ne!(a.projector, b.projector);
    }

    #[test]
    fn init_uses_fan_in_scale() {
        let cfg = ModelConfig::default();
        for seed in 0..3 {
            let m = init_model(cfg, seed).unwrap();
            let w = m.blocks[0].wq.as_slice();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            let want = 1.0 / (cfg.d_model as f64).sqrt();
            assert!((var.sqrt() - want).abs() / want < 0.2, "std {}", var.sqrt());
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { seq_len: 1, ..Default::default() },
            ModelConfig { vocab_size: 1, ..Default::default() },
            ModelConfig { d_model: 0, ..Default::default() },
            ModelConfig { n_prefix: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sample_validation() {
        let cfg = ModelConfig::default();
        let ok = Sample { vision: vec![0.0; 16], tokens: vec![1, 2, 3] };
        assert!(ok.validate(&cfg).is_ok());
        assert_eq!(ok.targets(), &[2, 3]);
        let bad_token = Sample { vision: vec![0.0; 16], tokens: vec![1, 64] };
        assert!(bad_token.validate(&cfg).is_err());
        let short = Sample { vision: vec![0.0; 16], tokens: vec![1] };
        assert!(short.validate(&cfg).is_err());
        let wrong_vision = Sample { vision: vec![0.0; 15], tokens: vec![1, 2] };
        assert!(wrong_vision.validate(&cfg).is_err());
    }

    #[test]
    fn prunable_set_is_six_per_block() {
        let m = init_model(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.prunable().count(), 24);
        let total: usize = m.prunable().map(|(_, _, w)| w.len()).sum();
        assert_eq!(total, m.config.prunable_params());
    }
}
