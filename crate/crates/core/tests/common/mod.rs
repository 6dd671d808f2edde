#![allow(dead_code)]

use electric_core::data::{synth, BatchSchedule};
use electric_core::train::{Dataset, Metric, Objective, RunConfig, Trainer};

/// A model small enough to train a few hundred steps in seconds.
pub fn small_config(objective: Objective, steps: u64) -> RunConfig {
    RunConfig {
        num_layers: 1,
        hidden_size: 32,
        num_heads: 4,
        ffn_size: 64,
        embedding_size: 32,
        max_seq_len: 48,
        objective,
        steps,
        batch_size: 8,
        warmup_steps: steps / 10,
        learning_rate: 3e-3,
        eval_sentences: 200,
        heldout_fraction: 0.05,
        ..RunConfig::default()
    }
}

pub fn synth_lines(bytes: usize) -> Vec<String> {
    synth::corpus(0, bytes, 48)
}

pub fn fresh(config: &RunConfig, lines: &[String]) -> (Trainer, Dataset) {
    let vocab = Dataset::build_vocab(lines, config).unwrap();
    let data = Dataset::new(lines, &vocab, config).unwrap();
    (Trainer::new(config.clone(), vocab).unwrap(), data)
}

/// Runs `config.steps` updates in memory; returns every training metric.
pub fn train(trainer: &mut Trainer, data: &Dataset) -> Vec<Metric> {
    let c = trainer.config().clone();
    let mut schedule = BatchSchedule::new(data.train.clone(), c.batch_size, c.max_seq_len, c.seed);
    let mut out = Vec::new();
    while trainer.step() < c.steps {
        let batch = schedule.batch_at(trainer.step());
        out.extend(trainer.train_step(&batch).unwrap());
    }
    out
}

pub fn metric(ms: &[Metric], name: &str) -> f64 {
    ms.iter()
        .find(|m| m.name == name)
        .unwrap_or_else(|| panic!("no metric {name}"))
        .value
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
