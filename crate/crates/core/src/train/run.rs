use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::trainer::{Dataset, Metric, Trainer};
use crate::data::{read_corpus, BatchSchedule};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    /// Completed steps found in the checkpoint directory at start.
    pub resumed_from: Option<u64>,
    pub last_eval: Vec<Metric>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Highest-step `step-NNNNNNNN.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metric>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Metric::parse(l).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected step TAB name TAB value".into(),
            })
        })
        .collect()
}

fn same_run(a: &RunConfig, b: &RunConfig) -> Result<()> {
    for key in RunConfig::KEYS.iter().filter(|k| !k.starts_with("paths.")) {
        let (x, y) = (a.get(key), b.get(key));
        if x != y {
            return Err(Error::Config(format!(
                "checkpoint directory holds a run with {key}={} but the configuration says {}",
                x.unwrap_or_default(),
                y.unwrap_or_default()
            )));
        }
    }
    Ok(())
}

/// Trains to `config.steps`, resuming from the newest checkpoint in the
/// checkpoint directory when one exists. Metrics are appended to
/// `METRICS_FILE` there (records at or after the resume point are dropped
/// first, so a resumed log equals an uninterrupted one) and passed to
/// `on_metric`.
pub fn run_train(config: &RunConfig, mut on_metric: impl FnMut(&Metric)) -> Result<RunSummary> {
    config.validate()?;
    let lines = read_corpus(&config.corpus).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read corpus {}: {io}", config.corpus.display())),
        other => other,
    })?;
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir)?;

    let (mut trainer, resumed_from) = match latest_checkpoint(dir)? {
        Some((_, path)) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(&path)?)?;
            same_run(t.config(), config)?;
            let step = t.step();
            (t, Some(step))
        }
        None => {
            let vocab = Dataset::build_vocab(&lines, config)?;
            (Trainer::new(config.clone(), vocab)?, None)
        }
    };
    let data = Dataset::new(&lines, trainer.vocab(), config)?;

    let metrics_path = dir.join(METRICS_FILE);
    let kept: Vec<Metric> = if metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|m| m.step < trainer.step())
            .collect()
    } else {
        Vec::new()
    };
    let text: String = kept.iter().map(|m| format!("{m}\n")).collect();
    std::fs::write(&metrics_path, text)?;
    let mut log = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut emit = |ms: &[Metric]| -> Result<()> {
        for m in ms {
            writeln!(log, "{m}")?;
            on_metric(m);
        }
        log.flush()?;
        Ok(())
    };

    let mut schedule = BatchSchedule::new(data.train.clone(), config.batch_size, config.max_seq_len, config.seed);
    let total = config.steps;
    let mut final_checkpoint = latest_checkpoint(dir)?.map(|(_, p)| p);
    while trainer.step() < total {
        let step = trainer.step();
        if config.eval_every > 0 && step % config.eval_every == 0 {
            emit(&trainer.evaluate(&data.heldout)?)?;
        }
        let batch = schedule.batch_at(step);
        emit(&trainer.train_step(&batch)?)?;
        let done = trainer.step();
        if done == total || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            let path = checkpoint_path(dir, done);
            trainer.to_checkpoint().save(&path)?;
            final_checkpoint = Some(path);
        }
    }
    let last_eval = trainer.evaluate(&data.heldout)?;
    emit(&last_eval)?;
    let final_checkpoint = match final_checkpoint {
        Some(p) => p,
        None => {
            // zero-step run: still leave a loadable checkpoint behind
            let path = checkpoint_path(dir, trainer.step());
            trainer.to_checkpoint().save(&path)?;
            path
        }
    };
    Ok(RunSummary {
        final_step: trainer.step(),
        final_checkpoint,
        resumed_from,
        last_eval,
    })
}
