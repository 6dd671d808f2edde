//! Self-checks with exact or analytically known answers: the tabular NCE
//! fit, the sigmoid identity, the k rule and a finite-difference check of
//! the full NCE loss.

use std::fmt;

use crate::data::TokenSequence;
use crate::electra::electric_noise_prob;
use crate::electric::{noise_count, pick_positions, ElectricModel, NcePlan, NOISE_FRACTION};
use crate::error::Result;
use crate::noise::NoiseDistribution;
use crate::rng::{KeyedRng, Stream};
use crate::tabular::{fit_tabular_ebm, TabularEbm};
use crate::tensor::{finite_difference_check, ParamStore};
use crate::transformer::{AttentionMode, TransformerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark}  {:<22} {}", self.name, self.detail)
    }
}

pub const TABULAR_CONTEXTS: usize = 8;
pub const TABULAR_VOCAB: usize = 6;
pub const TABULAR_STEPS: usize = 5000;
pub const TABULAR_LR: f64 = 8.0;

/// Exact-expectation NCE descent on a random table with `ν = k/(n-k)` at
/// the default noise fraction and `n = 20`.
pub fn tabular_fit(seed: u64) -> Result<crate::tabular::FitReport> {
    let ebm = TabularEbm::random(TABULAR_CONTEXTS, TABULAR_VOCAB, seed, false);
    let k = noise_count(20, NOISE_FRACTION) as f64;
    fit_tabular_ebm(&ebm, k / (20.0 - k), TABULAR_STEPS, TABULAR_LR)
}

/// Consistency (`TV < 0.02`) and self-normalization (`|Z - 1| < 0.1`).
pub fn check_tabular(seed: u64) -> Result<Vec<Check>> {
    let fit = tabular_fit(seed)?;
    let tv = fit.max_tv();
    let z = fit.max_z_error();
    Ok(vec![
        Check {
            name: "nce_consistency",
            passed: tv < 0.02,
            detail: format!("max per-context TV {tv:.3e} (< 0.02)"),
        },
        Check {
            name: "self_normalization",
            passed: z < 0.1,
            detail: format!("max per-context |Z-1| {z:.3e} (< 0.1)"),
        },
    ])
}

/// `σ(E + ln(kq/n))` against `kq / (n e^{-E} + kq)` on random draws.
pub fn sigmoid_identity_error(draws: usize, seed: u64) -> f64 {
    let mut rng = KeyedRng::new(seed, Stream::Eval);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let e = rng.uniform() * 20.0 - 10.0;
        let q = rng.uniform().max(1e-12);
        let n = 1 + rng.below(512);
        let k = 1 + rng.below(n);
        let (a, b) = electric_noise_prob(e, q, n, k);
        worst = worst.max((a - b).abs());
    }
    worst
}

pub fn check_sigmoid_identity(seed: u64) -> Check {
    let err = sigmoid_identity_error(10_000, seed);
    Check {
        name: "sigmoid_identity",
        passed: err < 1e-12,
        detail: format!("max |difference| {err:.3e} over 10000 draws (< 1e-12)"),
    }
}

/// Number of positions drawn and their uniqueness for `n = 1..=200`.
pub fn check_k_rule(seed: u64) -> Check {
    let mut rng = KeyedRng::new(seed, Stream::PositionSampling);
    let bad: Vec<usize> = (1..=200usize)
        .filter(|&n| {
            let want = (15 * n).div_ceil(100);
            let p = pick_positions(n, noise_count(n, NOISE_FRACTION), &mut rng);
            let mut u = p.clone();
            u.dedup();
            p.len() != want || u.len() != p.len() || p.iter().any(|&t| t >= n)
        })
        .collect();
    Check {
        name: "k_rule",
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "ceil(0.15 n) unique positions for n = 1..200".into()
        } else {
            format!("wrong position sets for n in {bad:?}")
        },
    }
}

/// Max relative error of the tape gradient of the efficient NCE loss on a
/// 2-layer, hidden-32 encoder over a 20-token vocabulary.
pub fn nce_gradient_error(seed: u64) -> Result<f64> {
    let vocab = 20;
    let config = TransformerConfig {
        num_layers: 2,
        hidden_size: 32,
        num_heads: 4,
        ffn_size: 64,
        max_seq_len: 12,
        vocab_size: vocab,
        embedding_size: 32,
        attention_mode: AttentionMode::Bidirectional,
        dropout_rate: 0.0,
    };
    let mut store = ParamStore::new();
    let mut rng = KeyedRng::new(seed, Stream::Init);
    // larger-than-default weights so the check is not dominated by
    // near-linear behaviour around zero
    let model = ElectricModel::init(config, &mut store, "electric", &mut rng)?;
    for id in model.param_ids() {
        let scaled: Vec<f64> = store.get(id).values().iter().map(|v| v * 10.0).collect();
        if store.name(id).ends_with("weight") || store.name(id).ends_with("embedding") {
            store.set_values(id, &scaled)?;
        }
    }
    let content: Vec<u32> = (0..8).map(|_| 5 + rng.below(vocab - 5) as u32).collect();
    let tokens = TokenSequence::from_content(content);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let r: Vec<f64> = (0..vocab).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|x| x / s).collect()
        })
        .collect();
    let noise = NoiseDistribution::from_rows(&rows)?;
    let mut prng = KeyedRng::new(seed, Stream::PositionSampling);
    let mut nrng = KeyedRng::new(seed, Stream::NoiseSampling);
    let plan = NcePlan::sample(&tokens, &noise, NOISE_FRACTION, &mut prng, &mut nrng)?;
    let params = model.param_ids();
    finite_difference_check(&mut store, &params, 1e-5, |tape, store| {
        model.nce_loss_on_tape(tape, store, &tokens, &plan, None)
    })
}

pub fn check_nce_gradient(seed: u64) -> Result<Check> {
    let err = nce_gradient_error(seed)?;
    Ok(Check {
        name: "nce_gradient",
        passed: err < 1e-4,
        detail: format!("max relative error {err:.3e} (< 1e-4)"),
    })
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = check_tabular(seed)?;
    out.push(check_sigmoid_identity(seed));
    out.push(check_k_rule(seed));
    out.push(check_nce_gradient(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let checks = run_all(0).unwrap();
        for c in &checks {
            assert!(c.passed, "{c}");
        }
        assert_eq!(checks.len(), 5);
    }
}
