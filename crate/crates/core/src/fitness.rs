//! Generalisation-aware fitness: proxy loss plus a norm-based capacity term.
//!
//! The capacity term is the mean log Frobenius norm of the prunable
//! matrices, `(1/K) Σ ln(‖W_i‖_F + ε₀)`. It is a strictly increasing
//! transform of `Π ‖W_i‖_F`, so it orders models exactly as the raw product
//! does without overflowing at 24 matrices. Fitness is minimised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::frobenius_norm;
use crate::model::{loss, Sample, ToyVLM};
use crate::policy::Policy;

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub policy: Policy,
    pub proxy_loss: f64,
    pub gen_proxy: f64,
    pub fitness: f64,
    pub eval_seed: u64,
}

impl FitnessRecord {
    pub fn new(policy: Policy, proxy_loss: f64, gen_proxy: f64, eta: f64, eval_seed: u64) -> Self {
        FitnessRecord {
            policy,
            proxy_loss,
            gen_proxy,
            fitness: proxy_loss + eta * gen_proxy,
            eval_seed,
        }
    }

    /// One JSON line, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

pub fn rademacher_proxy(model: &ToyVLM) -> f64 {
    let (sum, k) = model
        .prunable()
        .fold((0.0, 0usize), |(s, k), (_, _, w)| (s + (frobenius_norm(w) + NORM_EPS).ln(), k + 1));
    sum / k as f64
}

/// Scores an already-pruned model. Lower is better.
pub fn fitness(model: &ToyVLM, policy: &Policy, proxy_data: &[Sample], eta: f64, eval_seed: u64) -> Result<FitnessRecord> {
    if proxy_data.is_empty() {
        return Err(Error::EmptyBatch("fitness"));
    }
    let proxy_loss = loss(model, proxy_data)?;
    fitness_from_loss(model, policy, proxy_loss, eta, eval_seed)
}

/// As [`fitness`], for a proxy loss computed elsewhere (e.g. during pruning).
pub fn fitness_from_loss(model: &ToyVLM, policy: &Policy, proxy_loss: f64, eta: f64, eval_seed: u64) -> Result<FitnessRecord> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidConfig(format!("eta {eta} must be finite and >= 0")));
    }
    Ok(FitnessRecord::new(
        policy.clone(),
        proxy_loss,
        rademacher_proxy(model),
        eta,
        eval_seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{init_model, MatrixRole, ModelConfig};
    use crate::policy::RatioGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(cfg: &ModelConfig) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..3)
            .map(|_| Sample {
                vision: (0..cfg.d_vision).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                tokens: (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect(),
            })
            .collect()
    }

    fn policy(n: usize) -> Policy {
        Policy::uniform(RatioGrid::new(0.5).unwrap(), n)
    }

    #[test]
    fn identity_matrices_give_closed_form() {
        let cfg = ModelConfig { d_ff: 32, ..ModelConfig::default() };
        let mut m = init_model(cfg, 0).unwrap();
        for b in &mut m.blocks {
            for role in MatrixRole::ALL {
                *b.weight_mut(role) = Matrix::identity(32);
            }
        }
        assert!((rademacher_proxy(&m) - 32f64.sqrt().ln()).abs() < 1e-12);
        assert!((rademacher_proxy(&m) - 1.7329).abs() < 1e-4);
    }

    #[test]
    fn zeroing_entries_lowers_proxy() {
        let m = init_model(ModelConfig::default(), 1).unwrap();
        let mut masked = m.clone();
        let w = masked.blocks[2].weight_mut(MatrixRole::Up);
        for i in 0..w.len() / 2 {
            w.as_mut_slice()[i] = 0.0;
        }
        assert!(rademacher_proxy(&masked) < rademacher_proxy(&m));
        let mut row = m.clone();
        row.blocks[0].wq.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        assert!(rademacher_proxy(&row) < rademacher_proxy(&m));
    }

    #[test]
    fn geometric_mean_matches_direct_product() {
        let cfg = ModelConfig { n_blocks: 2, ..ModelConfig::default() };
        let m = init_model(cfg, 4).unwrap();
        let norms: Vec<f64> = m.prunable().map(|(_, _, w)| frobenius_norm(w)).collect();
        let product: f64 = norms.iter().product();
        let want = product.powf(1.0 / norms.len() as f64).ln();
        let got = rademacher_proxy(&m);
        assert!((got - want).abs() <= 1e-10 * want.abs());
    }

    #[test]
    fn all_zero_model_is_bounded() {
        let mut m = init_model(ModelConfig { n_blocks: 1, ..ModelConfig::default() }, 0).unwrap();
        for role in MatrixRole::ALL {
            let w = m.blocks[0].weight_mut(role);
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let g = rademacher_proxy(&m);
        assert!(g.is_finite());
        assert!(g >= NORM_EPS.ln() - 1e-9);
    }

    #[test]
    fn fitness_examples() {
        let cfg = ModelConfig { seq_len: 8, ..ModelConfig::default() };
        let m = init_model(cfg, 2).unwrap();
        let d = data(&cfg);
        let p = policy(cfg.n_blocks);
        let r0 = fitness(&m, &p, &d, 0.0, 7).unwrap();
        assert_eq!(r0.fitness, r0.proxy_loss);
        let r1 = fitness(&m, &p, &d, 1.0, 7).unwrap();
        assert!(((r1.fitness - r0.fitness) - r1.gen_proxy).abs() <= 1e-12 * r1.gen_proxy.abs());
        assert_eq!(r1, fitness(&m, &p, &d, 1.0, 7).unwrap());
        assert!(fitness(&m, &p, &[], 1.0, 7).is_err());
        assert!(fitness(&m, &p, &d, -1.0, 7).is_err());

        let mut masked = m.clone();
        masked.blocks[1].wv.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
        let rm = fitness(&masked, &p, &d, 1.0, 7).unwrap();
        assert!(rm.gen_proxy < r1.gen_proxy);
    }

    #[test]
    fn record_line_round_trip() {
        let r = FitnessRecord::new(policy(4), 3.25, -0.125, 0.1, 42);
        assert_eq!(FitnessRecord::from_line(&r.to_line()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn log_space_preserves_product_ordering(seed in 0u64..5000, k in 1usize..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let norms = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..k).map(|_| rng.gen_range(0.01..10.0)).collect() };
            let a = norms(&mut rng);
            let b = norms(&mut rng);
            let log_mean = |v: &[f64]| v.iter().map(|x| (x + NORM_EPS).ln()).sum::<f64>() / v.len() as f64;
            let pa: f64 = a.iter().product();
            let pb: f64 = b.iter().product();
            prop_assume!((pa - pb).abs() > 1e-9 * pa.max(pb));
            prop_assert_eq!((log_mean(&a) - log_mean(&b)).signum(), (pa - pb).signum());
        }
    }
}
