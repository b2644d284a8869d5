//! Synthetic proxy and holdout data drawn from a frozen random teacher.
//!
//! Sample `i` of a split depends only on `(seed, split, i)`, and tokens are
//! drawn one uniform per position, so datasets are prefix-stable in both
//! the sample count and the sequence length.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{init_model, ModelConfig, Sample, ToyVLM};
use crate::seed::{derive_seed, rng_for};

/// Sharpens the teacher's next-token distribution so the generated text
/// has structure well below the uniform `ln V` entropy.
pub const TEACHER_HEAD_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Proxy,
    Holdout,
}

impl Split {
    fn stream(self) -> &'static str {
        match self {
            Split::Proxy => "data.proxy",
            Split::Holdout => "data.holdout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub split: Split,
}

impl DatasetSpec {
    /// 64 segments, length capped at the model's context.
    pub fn new(config: &ModelConfig, seed: u64, split: Split) -> Self {
        DatasetSpec {
            n_samples: 64,
            seq_len: 256.min(config.seq_len),
            seed,
            split,
        }
    }
}

/// A frozen model used only to generate data; its weights come from an
/// offset seed stream so they never coincide with a subject model built
/// from the same seed.
pub fn make_teacher(config: ModelConfig, seed: u64) -> Result<ToyVLM> {
    let mut teacher = init_model(config, derive_seed(seed, "teacher", 0))?;
    teacher.head = teacher.head.scale(TEACHER_HEAD_GAIN);
    Ok(teacher)
}

fn ln_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * rs * g + b)
        .collect()
}

fn apply(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

/// Incremental causal decoder with per-block key/value caches. Produces the
/// same logits as a full forward pass, one position at a time.
struct Decoder<'m> {
    model: &'m ToyVLM,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m ToyVLM) -> Self {
        let n = model.blocks.len();
        Decoder {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Pushes one embedded row and returns the logits at that position.
    fn push(&mut self, mut h: Vec<f64>) -> Vec<f64> {
        let scale = 1.0 / (self.model.config.d_model as f64).sqrt();
        for (b, block) in self.model.blocks.iter().enumerate() {
            let a = ln_row(&h, &block.ln1_gain, &block.ln1_bias);
            let q = apply(&block.wq, &a);
            self.keys[b].push(apply(&block.wk, &a));
            self.values[b].push(apply(&block.wv, &a));
            let scores: Vec<f64> = self.keys[b].iter().map(|k| dot(&q, k) * scale).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; h.len()];
            for (e, v) in exps.iter().zip(&self.values[b]) {
                for (c, &vv) in ctx.iter_mut().zip(v) {
                    *c += e / z * vv;
                }
            }
            let o = apply(&block.wo, &ctx);
            let mid: Vec<f64> = h.iter().zip(&o).map(|(x, y)| x + y).collect();
            let m = ln_row(&mid, &block.ln2_gain, &block.ln2_bias);
            let g: Vec<f64> = apply(&block.w_up, &m).into_iter().map(crate::model::gelu).collect();
            let dn = apply(&block.w_down, &g);
            h = mid.iter().zip(&dn).map(|(x, y)| x + y).collect();
        }
        let hf = ln_row(&h, &self.model.lnf_gain, &self.model.lnf_bias);
        apply(&self.model.head, &hf)
    }
}

fn sample_categorical(logits: &[f64], u: f64) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let target = u * z;
    let mut acc = 0.0;
    for (i, e) in exps.iter().enumerate() {
        acc += e;
        if target < acc {
            return i as u32;
        }
    }
    (logits.len() - 1) as u32
}

fn generate_one(teacher: &ToyVLM, spec: &DatasetSpec, index: usize) -> Sample {
    let cfg = &teacher.config;
    let mut rng = rng_for(spec.seed, spec.split.stream(), index as u64);
    let vision: Vec<f64> = (0..cfg.n_prefix * cfg.d_vision)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut dec = Decoder::new(teacher);
    let mut logits = Vec::new();
    for j in 0..cfg.n_prefix {
        let v = &vision[j * cfg.d_vision..(j + 1) * cfg.d_vision];
        logits = dec.push(apply(&teacher.projector, v));
    }
    let mut tokens = Vec::with_capacity(spec.seq_len);
    for t in 0..spec.seq_len {
        let tok = sample_categorical(&logits, rng.gen::<f64>());
        tokens.push(tok);
        if t + 1 < spec.seq_len {
            let mut row = teacher.embed.row(tok as usize).to_vec();
            for (x, p) in row.iter_mut().zip(teacher.pos.row(t)) {
                *x += p;
            }
            logits = dec.push(row);
        }
    }
    Sample { vision, tokens }
}

/// Draws `spec.n_samples` sequences from the teacher by temperature-1
/// ancestral sampling. The first token is drawn from the prediction at the
/// last prefix position, so it already depends on the vision feature.
pub fn sample_dataset(teacher: &ToyVLM, spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if spec.seq_len < 2 || spec.seq_len > teacher.config.seq_len {
        return Err(Error::InvalidConfig(format!(
            "dataset seq_len {} must be in 2..={}",
            spec.seq_len, teacher.config.seq_len
        )));
    }
    use rayon::prelude::*;
    Ok((0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_one(teacher, spec, i))
        .collect())
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
