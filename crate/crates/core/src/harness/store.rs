use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::run::{execute, make_task, LogRecord, PhaseTimes, RunResult, SearchState};
use super::{Arm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const MASKS_FILE: &str = "final_masks.txt";
const SNAPSHOT_DIR: &str = "snapshots";

/// What to do when the directory already holds a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    /// Refuse to touch an existing run.
    Fresh,
    /// Continue from the last completed round; the config must match.
    Resume,
    /// Delete the existing run and start over.
    Force,
}

/// A run directory: the resolved config, the results log, one snapshot per
/// completed round, and the final summary, checkpoint and mask bitmap.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn snapshot_path(&self, round: usize) -> PathBuf {
        self.root.join(SNAPSHOT_DIR).join(format!("round_{round:04}.json"))
    }

    pub fn has_run(&self) -> bool {
        self.path(LOG_FILE).exists() || self.path(CONFIG_FILE).exists()
    }

    fn clear(&self) -> Result<()> {
        for name in [CONFIG_FILE, LOG_FILE, SUMMARY_FILE, CHECKPOINT_FILE, MASKS_FILE] {
            let p = self.path(name);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        let snaps = self.path(SNAPSHOT_DIR);
        if snaps.exists() {
            fs::remove_dir_all(snaps)?;
        }
        Ok(())
    }

    /// The newest round snapshot, if any.
    pub fn latest_snapshot(&self) -> Result<Option<SearchState>> {
        let dir = self.path(SNAPSHOT_DIR);
        if !dir.exists() {
            return Ok(None);
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| p.extension().is_some_and(|e| e == "json"));
        names.sort();
        match names.last() {
            Some(p) => Ok(Some(serde_json::from_slice(&fs::read(p)?)?)),
            None => Ok(None),
        }
    }

    /// Runs `arm` with `config`, persisting as it goes.
    pub fn run(&self, config: &ExperimentConfig, arm: Arm, mode: OpenMode) -> Result<RunResult> {
        let started = Instant::now();
        config.validate()?;
        fs::create_dir_all(self.root.join(SNAPSHOT_DIR))?;

        let mut resume_from = None;
        if self.has_run() {
            match mode {
                OpenMode::Fresh => return Err(Error::RunExists(self.root.clone())),
                OpenMode::Force => self.clear()?,
                OpenMode::Resume => {
                    let stored = ExperimentConfig::load(self.path(CONFIG_FILE))?;
                    if &stored != config {
                        return Err(Error::ResumeMismatch(format!(
                            "{} differs from the requested config",
                            self.path(CONFIG_FILE).display()
                        )));
                    }
                    resume_from = self.latest_snapshot()?;
                    if let Some(s) = &resume_from {
                        if s.arm != arm {
                            return Err(Error::ResumeMismatch(format!("run was started as arm {}, not {arm}", s.arm)));
                        }
                    }
                }
            }
        }
        fs::create_dir_all(self.root.join(SNAPSHOT_DIR))?;
        write_atomic(&self.path(CONFIG_FILE), config.to_toml()?.as_bytes())?;

        // drop any records written after the last snapshot
        let keep = resume_from.as_ref().map_or(0, |s| s.log_lines);
        let prior = if self.path(LOG_FILE).exists() {
            read_log_prefix(self.path(LOG_FILE), keep)?
        } else {
            Vec::new()
        };
        if prior.len() != keep {
            return Err(Error::ResumeMismatch(format!(
                "snapshot expects {keep} log records, found {}",
                prior.len()
            )));
        }
        let mut body = String::new();
        for r in &prior {
            body.push_str(&r.to_line());
            body.push('\n');
        }
        fs::write(self.path(LOG_FILE), body)?;

        let task = make_task(config)?;
        let timing = PhaseTimes {
            data: started.elapsed().as_secs_f64(),
            ..PhaseTimes::default()
        };
        let state = match resume_from {
            Some(s) => s,
            None => SearchState::initial(config, arm, &task)?,
        };

        let mut log = fs::OpenOptions::new().append(true).open(self.path(LOG_FILE))?;
        let mut observer = |state: &SearchState, records: &[LogRecord]| -> Result<()> {
            let mut chunk = String::new();
            for r in records {
                chunk.push_str(&r.to_line());
                chunk.push('\n');
            }
            log.write_all(chunk.as_bytes())?;
            log.flush()?;
            write_atomic(&self.snapshot_path(state.next_round - 1), &serde_json::to_vec(state)?)?;
            Ok(())
        };
        let mut result = execute(config, arm, &task, state, prior, &mut observer, timing, started)?;

        let t = Instant::now();
        if let Some(m) = &result.final_model {
            save_checkpoint(m, self.path(CHECKPOINT_FILE))?;
        }
        if let Some(m) = &result.final_masks {
            m.write_bitmap(self.path(MASKS_FILE))?;
        }
        let io = t.elapsed().as_secs_f64();
        result.timing.io += io;
        result.timing.total += io;
        write_atomic(&self.path(SUMMARY_FILE), &serde_json::to_vec_pretty(&result)?)?;
        Ok(result)
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    read_log_prefix(path, usize::MAX)
}

/// The first `limit` records; anything after them (say, a line torn by an
/// interrupted write) is never parsed.
fn read_log_prefix(path: impl AsRef<Path>, limit: usize) -> Result<Vec<LogRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if out.len() == limit {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "results log",
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Result of checking a results log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCheck {
    pub records: usize,
    pub round_best: Vec<f64>,
    /// Rounds whose best fitness exceeds the previous round's.
    pub violations: Vec<usize>,
}

impl LogCheck {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that rounds appear in order starting at 0, that every policy is
/// valid (enforced while parsing), and that per-round best fitness never
/// increases.
pub fn verify_log(path: impl AsRef<Path>) -> Result<LogCheck> {
    let records = read_log(path)?;
    let mut round_best: Vec<f64> = Vec::new();
    for r in &records {
        if r.round == round_best.len() {
            round_best.push(r.fitness);
        } else if r.round + 1 == round_best.len() {
            let b = round_best.last_mut().expect("non-empty");
            *b = b.min(r.fitness);
        } else {
            return Err(Error::Format {
                what: "results log",
                detail: format!("round {} out of order after round {}", r.round, round_best.len() as isize - 1),
            });
        }
    }
    let violations = (1..round_best.len()).filter(|&t| round_best[t] > round_best[t - 1]).collect();
    Ok(LogCheck {
        records: records.len(),
        round_best,
        violations,
    })
}

/// Summary table with one row per run.
pub fn report_csv(results: &[RunResult]) -> String {
    let mut out = String::from("arm,p0,seed,holdout_loss,sparsity,wall_clock\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.arm, r.p0, r.master_seed, r.holdout_loss, r.sparsity, r.timing.total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::tests::tiny;

    #[test]
    fn refuses_force_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let cfg = tiny();
        let a = run.run(&cfg, Arm::Full, OpenMode::Fresh).unwrap();
        let log = fs::read(run.path(LOG_FILE)).unwrap();
        let ckpt = fs::read(run.path(CHECKPOINT_FILE)).unwrap();
        assert!(matches!(run.run(&cfg, Arm::Full, OpenMode::Fresh), Err(Error::RunExists(_))));

        // resuming a finished run recomputes nothing and reproduces the files
        let b = run.run(&cfg, Arm::Full, OpenMode::Resume).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(fs::read(run.path(LOG_FILE)).unwrap(), log);

        // as if interrupted after logging round 1 but before its snapshot,
        // with a torn trailing line
        fs::remove_file(run.snapshot_path(1)).unwrap();
        let mut f = fs::OpenOptions::new().append(true).open(run.path(LOG_FILE)).unwrap();
        f.write_all(b"{\"round\":2,\"mem").unwrap();
        let c = run.run(&cfg, Arm::Full, OpenMode::Resume).unwrap();
        assert!(a.same_outcome(&c));
        assert_eq!(fs::read(run.path(LOG_FILE)).unwrap(), log);
        assert_eq!(fs::read(run.path(CHECKPOINT_FILE)).unwrap(), ckpt);

        let other = ExperimentConfig { eta: 0.2, ..cfg.clone() };
        assert!(matches!(run.run(&other, Arm::Full, OpenMode::Resume), Err(Error::ResumeMismatch(_))));
        assert!(matches!(run.run(&cfg, Arm::NoEvo, OpenMode::Resume), Err(Error::ResumeMismatch(_))));
        let d = run.run(&other, Arm::Full, OpenMode::Force).unwrap();
        assert_eq!(d.records.len(), 8);
    }

    #[test]
    fn verify_detects_regression() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        run.run(&tiny(), Arm::Full, OpenMode::Fresh).unwrap();
        let check = verify_log(run.path(LOG_FILE)).unwrap();
        assert!(check.ok());
        assert_eq!(check.round_best.len(), 2);

        let mut recs = read_log(run.path(LOG_FILE)).unwrap();
        for r in recs.iter_mut().filter(|r| r.round == 1) {
            r.fitness = 1e9;
        }
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, recs.iter().map(|r| r.to_line() + "\n").collect::<String>()).unwrap();
        assert_eq!(verify_log(&bad).unwrap().violations, vec![1]);
    }

    #[test]
    fn csv_has_expected_columns() {
        let r = crate::harness::run_uniform(&tiny()).unwrap();
        let csv = report_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "arm,p0,seed,holdout_loss,sparsity,wall_clock");
        assert!(lines.next().unwrap().starts_with("uniform,0.5,0,"));
    }
}
