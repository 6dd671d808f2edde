//! Energy scores, NCE losses and brute-force normalization.
//!
//! Positions are 0-based content indices throughout; sentinels never count
//! toward `n`, never enter `R`, and never contribute a loss term.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::noise::{sample_noise, NoiseDistribution};
use crate::rng::KeyedRng;
use crate::tensor::{math, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{AttentionMode, Encoder, TransformerConfig};

/// Share of content positions replaced by noise.
pub const NOISE_FRACTION: f64 = 0.15;

/// Enumeration limit for [`brute_force_partition`].
pub const MAX_ENUMERATED_VOCAB: usize = 512;

/// Anything that maps a sequence to one energy per content position in a
/// single forward pass.
pub trait EnergyFn {
    fn energies(&self, tokens: &TokenSequence) -> Result<Vec<f64>>;

    /// Forward passes performed so far.
    fn passes(&self) -> u64;
}

/// `exp(-E)`
pub fn unnormalized_prob(energy: f64) -> f64 {
    (-energy).exp()
}

/// `log exp(-E) = -E`
pub fn log_unnormalized_prob(energy: f64) -> f64 {
    -energy
}

/// `ceil(fraction * n)`, at least one for `n >= 1`.
pub fn noise_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // the epsilon keeps exact products such as 0.15 * 20 from rounding up
    let k = ((fraction * n as f64) - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Probability the NCE classifier assigns to "positive".
pub fn classifier_positive(p_hat: f64, q: f64, n: usize, k: usize) -> f64 {
    let a = n as f64 * p_hat;
    a / (a + k as f64 * q)
}

/// Uniformly random `k` distinct positions out of `0..n` (partial
/// Fisher-Yates), sorted ascending.
pub fn pick_positions(n: usize, k: usize, rng: &mut KeyedRng) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    let mut r = pool[..k].to_vec();
    r.sort_unstable();
    r
}

/// `R` with `|R| = ceil(0.15 n)`.
pub fn pick_noise_positions(n: usize, rng: &mut KeyedRng) -> Vec<usize> {
    pick_positions(n, noise_count(n, NOISE_FRACTION), rng)
}

/// Everything the efficient loss needs about one noised sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NcePlan {
    pub n: usize,
    pub k: usize,
    /// Sorted, unique content positions `R`.
    pub positions: Vec<usize>,
    pub original_tokens: Vec<u32>,
    pub sampled_tokens: Vec<u32>,
    /// `q_t(x_t)` from the clean context, for every position.
    pub q_at_original: Vec<f64>,
    /// `q_t(x̂_t)` for `t` in `R`, in the order of `positions`.
    pub q_at_sampled: Vec<f64>,
}

impl NcePlan {
    /// Draws `R` and the replacements. `noise` must come from the clean
    /// sequence.
    pub fn sample(
        tokens: &TokenSequence,
        noise: &NoiseDistribution,
        fraction: f64,
        position_rng: &mut KeyedRng,
        noise_rng: &mut KeyedRng,
    ) -> Result<Self> {
        let n = tokens.content_len();
        if n == 0 {
            return Err(Error::contract("NCE needs at least one content position"));
        }
        if noise.len() != n {
            return Err(Error::contract(format!("noise has {} rows for {n} positions", noise.len())));
        }
        let positions = pick_positions(n, noise_count(n, fraction), position_rng);
        let sampled_tokens: Vec<u32> = positions.iter().map(|&t| sample_noise(noise, t, noise_rng)).collect();
        Self::from_parts(tokens, noise, positions, sampled_tokens)
    }

    /// A plan with caller-chosen `R` and replacements.
    pub fn from_parts(
        tokens: &TokenSequence,
        noise: &NoiseDistribution,
        positions: Vec<usize>,
        sampled_tokens: Vec<u32>,
    ) -> Result<Self> {
        let n = tokens.content_len();
        if positions.len() != sampled_tokens.len() || positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("plan positions must be sorted, unique and paired with samples"));
        }
        if let Some(&t) = positions.iter().find(|&&t| t >= n) {
            return Err(Error::PositionOutOfRange { position: t, len: n });
        }
        Ok(Self {
            n,
            k: positions.len(),
            original_tokens: positions.iter().map(|&t| tokens.at(t)).collect(),
            q_at_original: (0..n).map(|t| noise.prob(t, tokens.at(t))).collect(),
            q_at_sampled: positions.iter().zip(&sampled_tokens).map(|(&t, &x)| noise.prob(t, x)).collect(),
            positions,
            sampled_tokens,
        })
    }

    pub fn noised(&self, tokens: &TokenSequence) -> TokenSequence {
        tokens.replaced_many(&self.positions, &self.sampled_tokens)
    }

    pub fn in_r(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for &t in &self.positions {
            mask[t] = true;
        }
        mask
    }

    /// `q` at the token each position holds in the noised sequence.
    pub fn q_evaluated(&self) -> Vec<f64> {
        let mut q = self.q_at_original.clone();
        for (&t, &qs) in self.positions.iter().zip(&self.q_at_sampled) {
            q[t] = qs;
        }
        q
    }

    /// Per-position logit offset `ln(n-k) - ln(k q)`; the classifier
    /// logit is this offset minus the energy.
    pub fn logit_offsets(&self) -> Vec<f64> {
        let log_nk = ((self.n - self.k) as f64).ln();
        let log_k = (self.k as f64).ln();
        self.q_evaluated().iter().map(|q| log_nk - log_k - q.ln()).collect()
    }
}

/// Per-position terms of the efficient loss given energies on the noised
/// sequence: `softplus(z)` on `R`, `softplus(-z)` elsewhere, with
/// `z = ln(n-k) - E - ln(k q)`.
pub fn efficient_terms(energies: &[f64], plan: &NcePlan) -> Vec<f64> {
    let in_r = plan.in_r();
    energies
        .iter()
        .zip(plan.logit_offsets())
        .zip(in_r)
        .map(|((e, off), noise)| {
            let z = off - e;
            if noise {
                math::softplus(z)
            } else {
                math::softplus(-z)
            }
        })
        .collect()
}

/// One-pass NCE estimate. Returns the summed per-position loss and the plan.
pub fn nce_loss_efficient<M: EnergyFn + ?Sized>(
    model: &M,
    tokens: &TokenSequence,
    noise: &NoiseDistribution,
    rng: &mut KeyedRng,
) -> Result<(f64, NcePlan)> {
    let plan = {
        let n = tokens.content_len();
        if n == 0 {
            return Err(Error::contract("NCE needs at least one content position"));
        }
        let positions = pick_noise_positions(n, rng);
        let sampled: Vec<u32> = positions.iter().map(|&t| sample_noise(noise, t, rng)).collect();
        NcePlan::from_parts(tokens, noise, positions, sampled)?
    };
    let energies = model.energies(&plan.noised(tokens))?;
    Ok((efficient_terms(&energies, &plan).iter().sum(), plan))
}

/// `k + 1`-pass NCE estimate: all `n` positives scored on the clean
/// sequence, then `k` independent negatives each scored on its own singly
/// replaced copy.
pub fn nce_loss_naive<M: EnergyFn + ?Sized>(
    model: &M,
    tokens: &TokenSequence,
    k: usize,
    noise: &NoiseDistribution,
    rng: &mut KeyedRng,
) -> Result<f64> {
    let n = tokens.content_len();
    if n == 0 {
        return Err(Error::contract("NCE needs at least one content position"));
    }
    let (log_n, log_k) = ((n as f64).ln(), (k as f64).ln());
    let energies = model.energies(tokens)?;
    let mut loss = 0.0;
    for (t, e) in energies.iter().enumerate() {
        let z = log_n - e - log_k - noise.prob(t, tokens.at(t)).ln();
        loss += math::softplus(-z);
    }
    for _ in 0..k {
        let t = rng.below(n);
        let x_hat = sample_noise(noise, t, rng);
        let e = model.energies(&tokens.replaced(t, x_hat))?[t];
        let z = log_n - e - log_k - noise.prob(t, x_hat).ln();
        loss += math::softplus(z);
    }
    Ok(loss)
}

/// Normalized conditional at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub z: f64,
    pub log_z: f64,
    /// `exp(-E) / Z` for each candidate, in candidate order.
    pub probs: Vec<f64>,
}

/// Enumerates `candidates` at content position `t`, one pass each.
pub fn brute_force_partition<M: EnergyFn + ?Sized>(
    model: &M,
    tokens: &TokenSequence,
    t: usize,
    candidates: &[u32],
) -> Result<Partition> {
    if candidates.len() > MAX_ENUMERATED_VOCAB {
        return Err(Error::VocabTooLarge {
            size: candidates.len(),
            limit: MAX_ENUMERATED_VOCAB,
        });
    }
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to enumerate"));
    }
    let n = tokens.content_len();
    if t >= n {
        return Err(Error::PositionOutOfRange { position: t, len: n });
    }
    let mut neg_e = Vec::with_capacity(candidates.len());
    for &c in candidates {
        neg_e.push(-model.energies(&tokens.replaced(t, c))?[t]);
    }
    let log_z = math::log_sum_exp(&neg_e);
    Ok(Partition {
        z: log_z.exp(),
        log_z,
        probs: neg_e.iter().map(|x| (x - log_z).exp()).collect(),
    })
}

/// Mean `-log p(x_t | x_\t)` over `(sequence, position)` pairs, with each
/// conditional normalized by enumerating `candidates`, which must contain
/// the true token.
pub fn normalized_cloze_loss<M: EnergyFn + ?Sized>(
    model: &M,
    samples: &[(TokenSequence, usize)],
    candidates: &[u32],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no positions to evaluate"));
    }
    let mut total = 0.0;
    for (seq, t) in samples {
        let truth = seq.at(*t);
        let idx = candidates
            .iter()
            .position(|&c| c == truth)
            .ok_or_else(|| Error::contract(format!("token {truth} is not among the candidates")))?;
        let part = brute_force_partition(model, seq, *t, candidates)?;
        total -= part.probs[idx].ln();
    }
    Ok(total / samples.len() as f64)
}

/// Bidirectional encoder plus the energy vector `w`: `E_t = w . h_t`.
#[derive(Debug, Clone)]
pub struct ElectricModel {
    encoder: Encoder,
    energy_weight: ParamId,
}

impl ElectricModel {
    pub fn init(
        mut config: TransformerConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut KeyedRng,
    ) -> Result<Self> {
        config.attention_mode = AttentionMode::Bidirectional;
        let encoder = Encoder::init(config, store, &format!("{prefix}.encoder"), None, rng)?;
        let h = encoder.config().hidden_size;
        let w = store.insert_normal(format!("{prefix}.energy_weight"), &[h], 0.02, rng);
        Ok(Self {
            encoder,
            energy_weight: w,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn energy_weight(&self) -> ParamId {
        self.energy_weight
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.push(self.energy_weight);
        ids
    }

    pub fn passes(&self) -> u64 {
        self.encoder.passes()
    }

    /// `[n]` content energies for framed `ids`.
    pub fn energies_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        ids: &[u32],
        dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        let states = self.encoder.forward(tape, store, ids, dropout)?;
        let content: Vec<usize> = (1..ids.len().saturating_sub(1)).collect();
        let h = tape.gather_rows(states, &content)?;
        let w = tape.param(store, self.energy_weight);
        tape.matvec(h, w)
    }

    /// Summed efficient NCE loss for one planned sequence.
    pub fn nce_loss_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &TokenSequence,
        plan: &NcePlan,
        dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        let noised = plan.noised(tokens);
        let e = self.energies_on_tape(tape, store, noised.ids(), dropout)?;
        let in_r = plan.in_r();
        // softplus(z) on R, softplus(-z) off R; z = offset - E
        let sign: Vec<f64> = in_r.iter().map(|&r| if r { 1.0 } else { -1.0 }).collect();
        let shift: Vec<f64> = plan.logit_offsets().iter().zip(&sign).map(|(o, s)| o * s).collect();
        let neg_sign = tape.constant(Tensor::new(vec![sign.len()], sign.iter().map(|s| -s).collect())?);
        let signed = tape.mul(e, neg_sign)?;
        let logits = tape.add_const(signed, &shift)?;
        let terms = tape.softplus(logits);
        Ok(tape.sum(terms))
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> ElectricScorer<'a> {
        ElectricScorer { model: self, store }
    }
}

/// An [`ElectricModel`] paired with frozen parameters.
#[derive(Debug, Clone, Copy)]
pub struct ElectricScorer<'a> {
    pub model: &'a ElectricModel,
    pub store: &'a ParamStore,
}

impl EnergyFn for ElectricScorer<'_> {
    fn energies(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.model.energies_on_tape(&mut tape, self.store, tokens.ids(), None)?;
        Ok(tape.value(e).values().to_vec())
    }

    fn passes(&self) -> u64 {
        self.model.passes()
    }
}

/// Context-independent energies: `E_t = table[x_t]`. Each call still
/// counts as one pass.
#[derive(Debug)]
pub struct TokenBiasEnergy {
    table: Vec<f64>,
    passes: AtomicU64,
}

impl TokenBiasEnergy {
    pub fn new(table: Vec<f64>) -> Self {
        Self {
            table,
            passes: AtomicU64::new(0),
        }
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

impl EnergyFn for TokenBiasEnergy {
    fn energies(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        tokens
            .content()
            .iter()
            .enumerate()
            .map(|(position, &x)| {
                self.table.get(x as usize).copied().ok_or(Error::TokenOutOfRange {
                    id: x,
                    position: position + 1,
                    vocab_size: self.table.len(),
                })
            })
            .collect()
    }

    fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }
}

/// Energies supplied directly (for hand-built examples); each call counts
/// as one pass.
#[derive(Debug)]
pub struct FixedEnergy<F> {
    f: F,
    passes: AtomicU64,
}

impl<F: Fn(&TokenSequence) -> Vec<f64>> FixedEnergy<F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            passes: AtomicU64::new(0),
        }
    }
}

impl<F: Fn(&TokenSequence) -> Vec<f64>> EnergyFn for FixedEnergy<F> {
    fn energies(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok((self.f)(tokens))
    }

    fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }
}
