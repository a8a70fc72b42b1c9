use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::step::{StepMetrics, Trainer};
use crate::analysis::{cknna, dump_embeddings};
use crate::error::{Error, Result};
use crate::synthenv::{evaluate_policy, EvalReport, Renderer};

/// Evaluation-hook log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub success_rate: f64,
    pub cknna_proprio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.json"))
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

impl Trainer {
    /// Closed-loop success rate of the current parameters.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalReport> {
        let mut policy = Checkpoint::from_trainer(self).policy()?;
        let renderer = Renderer::new(&self.env, self.dataset.stats.render_seed)?;
        evaluate_policy(&mut policy, &self.env, &renderer, episodes, seed)
    }

    /// Mutual-neighbor alignment of pooled adapter embeddings with proprio.
    pub fn proprio_alignment(&self) -> Result<f64> {
        let dump = dump_embeddings(
            &self.params,
            &self.dims,
            &self.dataset,
            self.cfg.analysis_per_task,
            self.cfg.analysis_window,
            "",
        )?;
        cknna(&dump.x, &dump.q, self.cfg.cknna_k)
    }

    fn eval_record(&self) -> Result<EvalRecord> {
        Ok(EvalRecord {
            step: self.step,
            success_rate: self.evaluate(self.cfg.eval_episodes, self.cfg.eval_seed)?.success_rate,
            cknna_proprio: self.proprio_alignment()?,
        })
    }
}

/// Keeps only log lines whose `step` is at most `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(f) = File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::format("metrics log", e))?;
        let s = v
            .get("step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::format("metrics log", "record without step"))?;
        if s <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(f: &mut File, path: &Path, record: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::format("metrics record", e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains until `max_steps`, writing `metrics.jsonl` and checkpoints under
/// `out_dir`. A trainer restored at step `m` first drops log records past
/// `m`, so an interrupted run resumes into the same log it would have had.
pub fn run(trainer: &mut Trainer, out_dir: &Path) -> Result<RunOutcome> {
    run_with(trainer, out_dir, |_| {})
}

/// A record passed to the progress callback of [`run_with`].
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Step(&'a StepMetrics),
    Eval(&'a EvalRecord),
}

/// [`run`] with a callback after every step and evaluation.
pub fn run_with<F>(trainer: &mut Trainer, out_dir: &Path, mut progress: F) -> Result<RunOutcome>
where
    F: FnMut(Progress<'_>),
{
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let mpath = metrics_path(out_dir);
    if trainer.step == 0 {
        File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Checkpoint::from_trainer(trainer).save(&checkpoint_path(out_dir, 0))?;
    } else {
        truncate_metrics(&mpath, trainer.step)?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&mpath)
        .map_err(|e| Error::io(&mpath, e))?;
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let max = trainer.cfg.max_steps;
    while trainer.step < max {
        let m = trainer.train_step()?;
        append(&mut log, &mpath, &m)?;
        progress(Progress::Step(&m));
        steps.push(m);
        let s = trainer.step;
        let every = |n: u64| n > 0 && s % n == 0;
        if every(trainer.cfg.checkpoint_every) || s == max {
            Checkpoint::from_trainer(trainer).save(&checkpoint_path(out_dir, s))?;
        }
        if every(trainer.cfg.eval_every) {
            let r = trainer.eval_record()?;
            append(&mut log, &mpath, &r)?;
            progress(Progress::Eval(&r));
            evals.push(r);
        }
    }
    log.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(RunOutcome {
        final_checkpoint: checkpoint_path(out_dir, trainer.step),
        metrics_path: mpath,
        steps,
        evals,
    })
}
