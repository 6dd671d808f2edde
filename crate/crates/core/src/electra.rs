//! ELECTRA-style negative sampling on the same energy network, and the
//! algebra linking it to the NCE classifier.

use crate::data::TokenSequence;
use crate::electric::{noise_count, ElectricModel, EnergyFn, NcePlan, NOISE_FRACTION};
use crate::error::Result;
use crate::noise::NoiseDistribution;
use crate::rng::KeyedRng;
use crate::tensor::{math, ParamStore, Tape, Tensor, Var};

/// Lower and upper clamp for `σ(E)` before taking logs.
pub const SIGMA_CLAMP: f64 = 1e-12;

/// `σ(E)` per position: the discriminator's probability of "replaced".
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    pub noise_probability: Vec<f64>,
}

impl DiscriminatorOutput {
    pub fn from_energies(energies: &[f64]) -> Self {
        Self {
            noise_probability: energies.iter().map(|&e| math::sigmoid(e)).collect(),
        }
    }
}

/// Per-position binary cross-entropy: `softplus(-E)` where replaced,
/// `softplus(E)` where original.
pub fn discriminator_terms(energies: &[f64], replaced: &[bool]) -> Vec<f64> {
    energies
        .iter()
        .zip(replaced)
        .map(|(&e, &r)| if r { math::softplus(-e) } else { math::softplus(e) })
        .collect()
}

/// Mean BCE over content positions.
pub fn electra_discriminator_loss<M: EnergyFn + ?Sized>(
    model: &M,
    noised: &TokenSequence,
    replaced: &[bool],
) -> Result<f64> {
    let e = model.energies(noised)?;
    let terms = discriminator_terms(&e, replaced);
    Ok(terms.iter().sum::<f64>() / terms.len().max(1) as f64)
}

/// Summed BCE for one planned sequence; the trainer divides by the
/// batch's position count.
pub fn discriminator_loss_on_tape<'a>(
    model: &ElectricModel,
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    tokens: &TokenSequence,
    plan: &NcePlan,
    dropout: Option<&mut KeyedRng>,
) -> Result<Var> {
    let noised = plan.noised(tokens);
    let e = model.energies_on_tape(tape, store, noised.ids(), dropout)?;
    let sign: Vec<f64> = plan.in_r().iter().map(|&r| if r { -1.0 } else { 1.0 }).collect();
    let s = tape.constant(Tensor::new(vec![sign.len()], sign)?);
    let logits = tape.mul(e, s)?;
    let terms = tape.softplus(logits);
    Ok(tape.sum(terms))
}

/// Both closed forms of the NCE "noise" probability:
/// `σ(E + ln(kq/n))` and `kq / (n exp(-E) + kq)`.
pub fn electric_noise_prob(energy: f64, q: f64, n: usize, k: usize) -> (f64, f64) {
    let (n, k) = (n as f64, k as f64);
    let via_sigmoid = math::sigmoid(energy + (k * q / n).ln());
    let kq = k * q;
    let direct = kq / (n * (-energy).exp() + kq);
    (via_sigmoid, direct)
}

/// Energies shifted so ELECTRA's BCE reproduces the efficient NCE terms
/// exactly: `E + ln(kq / (n-k))`.
pub fn relabeled_energies(energies: &[f64], plan: &NcePlan) -> Vec<f64> {
    energies.iter().zip(plan.logit_offsets()).map(|(e, off)| e - off).collect()
}

/// Reconstructed ELECTRA-TT score for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TtScore {
    pub pll: f64,
    /// Positions where `σ(E)` hit the clamp.
    pub clamped: usize,
}

/// `log p̂_t = ln(kq_t/n) + ln(1 - σ(E_t)) - ln σ(E_t)`, summed over content
/// positions. `q_true[t]` is the noise probability of the observed token.
pub fn electra_tt_from_parts(energies: &[f64], q_true: &[f64], k: usize) -> TtScore {
    let n = energies.len();
    let log_kn = (k as f64 / n as f64).ln();
    let mut pll = 0.0;
    let mut clamped = 0;
    for (&e, &q) in energies.iter().zip(q_true) {
        let raw = math::sigmoid(e);
        let s = raw.clamp(SIGMA_CLAMP, 1.0 - SIGMA_CLAMP);
        if s != raw {
            clamped += 1;
        }
        pll += log_kn + q.ln() + (1.0 - s).ln() - s.ln();
    }
    TtScore { pll, clamped }
}

/// ELECTRA-TT PLL for a clean sequence: one discriminator pass plus one
/// two-tower pass, `k = ceil(0.15 n)`.
pub fn electra_tt_pll<M: EnergyFn + ?Sized>(
    discriminator: &M,
    noise: &NoiseDistribution,
    tokens: &TokenSequence,
) -> Result<TtScore> {
    let e = discriminator.energies(tokens)?;
    let q: Vec<f64> = (0..tokens.content_len()).map(|t| noise.prob(t, tokens.at(t))).collect();
    Ok(electra_tt_from_parts(&e, &q, noise_count(tokens.content_len(), NOISE_FRACTION)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electric::{efficient_terms, TokenBiasEnergy};
    use crate::rng::{KeyedRng, Stream};

    #[test]
    fn zero_energy_bce_is_ln_two() {
        let t = discriminator_terms(&[0.0, 0.0, 0.0], &[true, false, true]);
        assert!(t.iter().all(|x| (x - 2f64.ln()).abs() < 1e-15));
        assert!(discriminator_terms(&[800.0], &[true])[0] < 1e-300);
    }

    #[test]
    fn identity_special_values() {
        let (a, b) = electric_noise_prob(0.0, 0.5, 2, 4);
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        let (a, b) = electric_noise_prob(60.0, 0.1, 10, 2);
        assert!(1.0 - a < 1e-20 && 1.0 - b < 1e-20);
    }

    #[test]
    fn tt_inverts_the_identity() {
        let e_prime = [0.3, -1.2, 2.5, 0.0];
        let q = [0.2, 0.05, 0.6, 0.3];
        let (n, k) = (4, 1);
        let disc: Vec<f64> = e_prime
            .iter()
            .zip(&q)
            .map(|(&e, &q)| {
                let p = electric_noise_prob(e, q, n, k).1;
                (p / (1.0 - p)).ln()
            })
            .collect();
        let tt = electra_tt_from_parts(&disc, &q, k);
        assert!((tt.pll + e_prime.iter().sum::<f64>()).abs() < 1e-12, "{}", tt.pll);
        assert_eq!(tt.clamped, 0);
    }

    #[test]
    fn tt_neutral_point_is_zero() {
        // σ(E) = 1/2 and kq/n = 1
        let tt = electra_tt_from_parts(&[0.0, 0.0], &[1.0, 1.0], 2);
        assert!(tt.pll.abs() < 1e-15);
    }

    #[test]
    fn tt_clamps_saturated_sigmoids() {
        let tt = electra_tt_from_parts(&[100.0, -100.0, 0.0], &[0.5; 3], 1);
        assert_eq!(tt.clamped, 2);
        assert!(tt.pll.is_finite());
    }

    #[test]
    fn relabeled_bce_equals_nce() {
        let seq = TokenSequence::from_content(vec![5, 6, 7, 5, 6, 7, 5]);
        let rows: Vec<Vec<f64>> = (0..7).map(|t| (0..8).map(|j| 1.0 + ((t * 3 + j) % 5) as f64).collect()).collect();
        let noise = NoiseDistribution::from_rows(&rows).unwrap();
        let model = TokenBiasEnergy::new(vec![0.1, 0.4, -0.3, 1.1, 0.0, 0.7, -0.5, 0.2]);
        let mut pr = KeyedRng::new(3, Stream::PositionSampling);
        let mut nr = KeyedRng::new(3, Stream::NoiseSampling);
        let plan = NcePlan::sample(&seq, &noise, NOISE_FRACTION, &mut pr, &mut nr).unwrap();
        let e = model.energies(&plan.noised(&seq)).unwrap();
        let nce = efficient_terms(&e, &plan);
        let bce = discriminator_terms(&relabeled_energies(&e, &plan), &plan.in_r());
        for (a, b) in nce.iter().zip(&bce) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
