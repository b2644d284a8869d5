//! `prunelab`: generate data, run searches and baselines, sweep the
//! calibration-set ablation, tabulate results and run the self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prunelab_core::calib::write_dataset;
use prunelab_core::harness::{
    make_task, report_csv, run_ablation_grid, verify_log, Arm, ExperimentConfig, OpenMode, RunDir, RunResult,
    SUMMARY_FILE,
};
use prunelab_core::oracle;

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Layer-wise pruning policy search on a toy vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the proxy and holdout splits of a seeded task as JSON lines.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the search pipeline (or an ablation arm) into a run directory.
    Search {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// full, uniform, no-gen, no-evo or evo-no-ub.
        #[arg(long, default_value = "full")]
        arm: Arm,
        #[command(flatten)]
        open: OpenArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Prune uniformly at p0 without searching.
    Uniform {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        open: OpenArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep proxy-set size and sequence length; writes one CSV row per cell.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "n", value_delimiter = ',', default_values_t = [16usize, 64, 128])]
        n_values: Vec<usize>,
        #[arg(long = "s", value_delimiter = ',', default_values_t = [32usize])]
        s_values: Vec<usize>,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tabulate finished runs (directories holding a summary, or parents of them).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle self-checks and check results logs for elitism.
    Verify {
        /// Results log, or a run directory containing one; repeatable.
        #[arg(long)]
        log: Vec<PathBuf>,
        /// Only check logs.
        #[arg(long)]
        skip_oracles: bool,
    },
}

#[derive(Args)]
struct OpenArgs {
    /// Continue an interrupted run; the stored config must match.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Discard an existing run in the output directory.
    #[arg(long)]
    force: bool,
}

impl OpenArgs {
    fn mode(&self) -> OpenMode {
        match (self.resume, self.force) {
            (true, _) => OpenMode::Resume,
            (_, true) => OpenMode::Force,
            _ => OpenMode::Fresh,
        }
    }
}

/// Every field of the experiment config; flags override `--config`, which
/// overrides the defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with any subset of the config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    n_pop: Option<usize>,
    #[arg(long)]
    k_elite: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    n_proxy: Option<usize>,
    #[arg(long)]
    proxy_len: Option<usize>,
    #[arg(long)]
    n_holdout: Option<usize>,
    #[arg(long)]
    holdout_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    evo_steps: Option<usize>,
    #[arg(long)]
    evo_retries: Option<usize>,
    #[arg(long)]
    neighborhood: Option<usize>,
    #[arg(long)]
    mutation_rate: Option<f64>,
    #[arg(long)]
    tournament_size: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    blocksize: Option<usize>,
    /// sequential or dense.
    #[arg(long)]
    calibration: Option<String>,
    /// teacher-body, teacher or independent.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    d_vision: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    n_prefix: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .with_context(|| format!("invalid value {value:?} for --{flag}"))
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(p0, n_pop, k_elite, rounds, eta, n_proxy, proxy_len, n_holdout, holdout_len, lr, evo_steps);
        set!(evo_retries, neighborhood, mutation_rate, tournament_size, damping, blocksize);
        macro_rules! set_model {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.model.$field = v; })* };
        }
        set_model!(d_vision, d_model, n_blocks, d_ff, vocab_size, seq_len, n_prefix);
        // a shorter context caps the default sequence lengths
        if self.seq_len.is_some() {
            if self.proxy_len.is_none() {
                c.proxy_len = c.proxy_len.min(c.model.seq_len);
            }
            if self.holdout_len.is_none() {
                c.holdout_len = c.holdout_len.min(c.model.seq_len);
            }
        }
        if let Some(v) = &self.calibration {
            c.calibration = parse_enum("calibration", v)?;
        }
        if let Some(v) = &self.subject {
            c.subject = parse_enum("subject", v)?;
        }
        if let Some(s) = seed {
            c.master_seed = s;
        }
        c.validate().context("invalid configuration")?;
        Ok(c)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn search(seed: u64, out: &Path, arm: Arm, open: &OpenArgs, config: &ConfigArgs) -> Result<bool> {
    let cfg = config.resolve(Some(seed))?;
    let r = RunDir::new(out)
        .run(&cfg, arm, open.mode())
        .with_context(|| format!("{arm} run in {}", out.display()))?;
    println!(
        "{arm} seed {seed}: best policy {:?} fitness {:.6} holdout {:.6} (uniform {:.6}) sparsity {:.4} in {:.1}s",
        r.best_policy.ratios(),
        r.best_fitness,
        r.holdout_loss,
        r.uniform_holdout_loss,
        r.sparsity,
        r.timing.total
    );
    Ok(true)
}

fn collect_summaries(paths: &[PathBuf]) -> Result<Vec<RunResult>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(SUMMARY_FILE).is_file() {
            dirs.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(SUMMARY_FILE).is_file())
            .collect();
        if children.is_empty() {
            bail!("{} holds no finished runs", p.display());
        }
        children.sort();
        dirs.extend(children);
    }
    dirs.iter()
        .map(|d| {
            let path = d.join(SUMMARY_FILE);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        })
        .collect()
}

fn verify(logs: &[PathBuf], skip_oracles: bool) -> Result<bool> {
    let mut ok = true;
    if !skip_oracles {
        for c in oracle::suite() {
            println!("{}: {} - {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
            ok &= c.pass;
        }
    }
    for p in logs {
        let path = if p.is_dir() { p.join(prunelab_core::harness::LOG_FILE) } else { p.clone() };
        match verify_log(&path) {
            Ok(check) if check.ok() => {
                println!("{}: PASS - {} records over {} rounds", path.display(), check.records, check.round_best.len())
            }
            Ok(check) => {
                println!("{}: FAIL - best fitness rose in rounds {:?}", path.display(), check.violations);
                ok = false;
            }
            Err(e) => {
                println!("{}: FAIL - {e}", path.display());
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { seed, out, config } => {
            let cfg = config.resolve(Some(seed))?;
            let task = make_task(&cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dataset(out.join("proxy.jsonl"), &task.proxy)?;
            write_dataset(out.join("holdout.jsonl"), &task.holdout)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!(
                "wrote {} proxy and {} holdout samples to {}",
                task.proxy.len(),
                task.holdout.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Search { seed, out, arm, open, config } => search(seed, &out, arm, &open, &config),
        Command::Uniform { seed, out, open, config } => search(seed, &out, Arm::Uniform, &open, &config),
        Command::Ablate {
            seeds,
            n_values,
            s_values,
            out,
            config,
        } => {
            let mut csv = String::from("seed,n,s,holdout_loss,uniform_holdout_loss,sparsity,wall_clock\n");
            for seed in seeds {
                let cfg = config.resolve(Some(seed))?;
                for row in run_ablation_grid(&cfg, &n_values, &s_values)? {
                    let r = &row.result;
                    csv.push_str(&format!(
                        "{seed},{},{},{},{},{},{:.3}\n",
                        row.n, row.s, r.holdout_loss, r.uniform_holdout_loss, r.sparsity, r.timing.total
                    ));
                }
            }
            write_output(out.as_deref(), &csv)?;
            Ok(true)
        }
        Command::Report { runs, out } => {
            let results = collect_summaries(&runs)?;
            write_output(out.as_deref(), &report_csv(&results))?;
            Ok(true)
        }
        Command::Verify { log, skip_oracles } => verify(&log, skip_oracles),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
