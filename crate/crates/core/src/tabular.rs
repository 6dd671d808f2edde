//! Enumerable energy tables over a handful of contexts. Every expectation
//! in the NCE objective is an exact finite sum here, which makes this the
//! ground truth for the sampled losses and for the optimum's properties.

use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Stream};
use crate::tensor::math::{sigmoid, softplus};

/// Consecutive steps spent above the best loss so far that count as
/// divergence. Measuring against the running best rather than the previous
/// step also catches the bounded two-cycle that an oversized step produces.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularEbm {
    pub contexts: usize,
    pub vocab: usize,
    /// `[contexts, vocab]`, row-major.
    pub energy: Vec<f64>,
    pub data: Vec<f64>,
    pub noise: Vec<f64>,
}

fn check_rows(name: &str, rows: &[f64], vocab: usize) -> Result<()> {
    for (c, row) in rows.chunks(vocab).enumerate() {
        if row.iter().any(|&p| !(p > 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("{name} row {c} is not a positive distribution")));
        }
    }
    Ok(())
}

fn random_simplex(rng: &mut KeyedRng, vocab: usize, skew: f64) -> Vec<f64> {
    // exponentiated normals: larger skew concentrates mass
    let raw: Vec<f64> = (0..vocab).map(|_| (skew * rng.normal(0.0, 1.0)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

impl TabularEbm {
    pub fn new(contexts: usize, vocab: usize, energy: Vec<f64>, data: Vec<f64>, noise: Vec<f64>) -> Result<Self> {
        let size = contexts * vocab;
        if contexts == 0 || vocab == 0 || energy.len() != size || data.len() != size || noise.len() != size {
            return Err(Error::contract(format!("tables must all be {contexts}x{vocab}")));
        }
        check_rows("data", &data, vocab)?;
        check_rows("noise", &noise, vocab)?;
        Ok(Self {
            contexts,
            vocab,
            energy,
            data,
            noise,
        })
    }

    /// Random positive `p_data` rows, zero energies, and `noise` either equal
    /// to `p_data` or uniform.
    pub fn random(contexts: usize, vocab: usize, seed: u64, noise_is_data: bool) -> Self {
        let mut rng = KeyedRng::new(seed, Stream::Synth);
        let mut data = Vec::with_capacity(contexts * vocab);
        for _ in 0..contexts {
            data.extend(random_simplex(&mut rng, vocab, 1.0));
        }
        let noise = if noise_is_data {
            data.clone()
        } else {
            vec![1.0 / vocab as f64; contexts * vocab]
        };
        Self::new(contexts, vocab, vec![0.0; contexts * vocab], data, noise).expect("generated tables are valid")
    }

    /// Energies at the analytic optimum: `E = -ln p_data`.
    pub fn optimal_energy(&self) -> Vec<f64> {
        self.data.iter().map(|p| -p.ln()).collect()
    }

    pub fn with_energy(&self, energy: Vec<f64>) -> Self {
        Self { energy, ..self.clone() }
    }

    /// Per-context `Z = Σ_x exp(-E)`.
    pub fn partition(&self) -> Vec<f64> {
        self.energy.chunks(self.vocab).map(|r| r.iter().map(|e| (-e).exp()).sum()).collect()
    }

    /// Per-context total variation between `p̂/Z` and `p_data`.
    pub fn total_variation(&self) -> Vec<f64> {
        self.energy
            .chunks(self.vocab)
            .zip(self.data.chunks(self.vocab))
            .map(|(e, p)| {
                let z: f64 = e.iter().map(|x| (-x).exp()).sum();
                0.5 * e.iter().zip(p).map(|(x, p)| ((-x).exp() / z - p).abs()).sum::<f64>()
            })
            .collect()
    }
}

/// `(1/C) Σ_c [ Σ_x p·softplus(E + ln νq) + ν Σ_x q·softplus(-E - ln νq) ]`,
/// i.e. both NCE expectations evaluated exactly.
pub fn exact_nce_objective(ebm: &TabularEbm, nu: f64) -> f64 {
    let mut total = 0.0;
    for ((e, p), q) in ebm.energy.iter().zip(&ebm.data).zip(&ebm.noise) {
        let a = e + (nu * q).ln();
        total += p * softplus(a) + nu * q * softplus(-a);
    }
    total / ebm.contexts as f64
}

/// Analytic gradient of [`exact_nce_objective`] with respect to the table.
pub fn exact_nce_gradient(ebm: &TabularEbm, nu: f64) -> Vec<f64> {
    let c = ebm.contexts as f64;
    ebm.energy
        .iter()
        .zip(&ebm.data)
        .zip(&ebm.noise)
        .map(|((e, p), q)| {
            let s = sigmoid(-e - (nu * q).ln());
            (p * (1.0 - s) - nu * q * s) / c
        })
        .collect()
}

/// Per-context objective at `p̂ = q = p_data`: `ln(1+ν) + ν ln((1+ν)/ν)`.
pub fn matched_optimum_value(nu: f64) -> f64 {
    (1.0 + nu).ln() + nu * ((1.0 + nu) / nu).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub energy: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Per-context `TV(p̂/Z, p_data)`.
    pub total_variation: Vec<f64>,
    /// Per-context `Z`.
    pub partition: Vec<f64>,
}

impl FitReport {
    pub fn max_tv(&self) -> f64 {
        self.total_variation.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_z_error(&self) -> f64 {
        self.partition.iter().map(|z| (z - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Plain-text diagnostics, one context per line.
    pub fn render(&self) -> String {
        let mut s = format!(
            "steps {}\nloss {:.9} -> {:.9}\n",
            self.steps, self.initial_loss, self.final_loss
        );
        for (c, (tv, z)) in self.total_variation.iter().zip(&self.partition).enumerate() {
            s.push_str(&format!("context {c}\ttv {tv:.3e}\tZ {z:.9}\n"));
        }
        s.push_str(&format!("max tv {:.3e}\tmax |Z-1| {:.3e}\n", self.max_tv(), self.max_z_error()));
        s
    }
}

/// Full-batch gradient descent on the exact objective.
pub fn fit_tabular_ebm(ebm: &TabularEbm, nu: f64, steps: usize, lr: f64) -> Result<FitReport> {
    if !(nu > 0.0) || steps == 0 || !(lr > 0.0) {
        return Err(Error::contract("nu, steps and lr must all be positive"));
    }
    let mut cur = ebm.clone();
    let initial_loss = exact_nce_objective(&cur, nu);
    let mut prev = initial_loss;
    let mut best = initial_loss;
    let mut rising = 0;
    for step in 0..steps {
        let g = exact_nce_gradient(&cur, nu);
        for (e, g) in cur.energy.iter_mut().zip(&g) {
            *e -= lr * g;
        }
        let loss = exact_nce_objective(&cur, nu);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite objective at step {step}")));
        }
        if loss > best + 1e-9 * best.abs() + 1e-12 {
            rising += 1;
        } else {
            rising = 0;
            best = best.min(loss);
        }
        if rising >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence(format!(
                "objective stayed above its best for {DIVERGENCE_PATIENCE} consecutive steps (step {step}, loss {loss:.6})"
            )));
        }
        prev = loss;
    }
    Ok(FitReport {
        total_variation: cur.total_variation(),
        partition: cur.partition(),
        initial_loss,
        final_loss: prev,
        steps,
        energy: cur.energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_tables_at_nu_one_give_two_ln_two() {
        let ebm = TabularEbm::random(8, 6, 1, true);
        let at_opt = ebm.with_energy(ebm.optimal_energy());
        assert!((exact_nce_objective(&at_opt, 1.0) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((matched_optimum_value(1.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matched_optimum_closed_form_for_other_nu() {
        // n·ln((n+k)/n) + k·ln((n+k)/k), divided by n
        let (n, k) = (20.0f64, 3.0f64);
        let expected = ((n + k) / n).ln() + (k / n) * ((n + k) / k).ln();
        let ebm = TabularEbm::random(5, 4, 2, true);
        let at_opt = ebm.with_energy(ebm.optimal_energy());
        assert!((exact_nce_objective(&at_opt, k / n) - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_case_converges_to_ln_four() {
        let u = vec![0.25; 4];
        let ebm = TabularEbm::new(1, 4, vec![0.0; 4], u.clone(), u).unwrap();
        let fit = fit_tabular_ebm(&ebm, 1.0, 3000, 8.0).unwrap();
        for e in &fit.energy {
            assert!((e - 4f64.ln()).abs() < 1e-6, "{e}");
        }
        assert!((fit.partition[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        for noise_is_data in [true, false] {
            let ebm = TabularEbm::random(8, 6, 9, noise_is_data);
            let at_opt = ebm.with_energy(ebm.optimal_energy());
            assert!(exact_nce_gradient(&at_opt, 0.7).iter().all(|g| g.abs() < 1e-15));
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularEbm::new(1, 2, vec![0.0; 2], vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(TabularEbm::new(1, 2, vec![0.0; 2], vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ebm = TabularEbm::random(2, 3, 4, true);
        assert!(matches!(fit_tabular_ebm(&ebm, 1.0, 500, 1e6), Err(Error::Divergence(_))));
    }
}
