//! Two-tower cloze noise model.
//!
//! Row `t` of the distribution reads the left-to-right state one position
//! before `t` and the right-to-left state one position after it, so it never
//! depends on `x_t` itself.

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::{math, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{AttentionMode, Encoder, TransformerConfig};

/// Minimum probability mass given to every token after flooring.
pub const PROB_FLOOR: f64 = 1e-8;

/// Tower sizing relative to the main encoder: hidden and feed-forward widths
/// scale by `ratio` (rounded up), heads by `ratio` (rounded, at least one,
/// falling back to one when the width would not divide).
pub fn tower_config(main: &TransformerConfig, ratio: f64) -> TransformerConfig {
    let hidden = ((main.hidden_size as f64 * ratio).ceil() as usize).max(1);
    let mut heads = ((main.num_heads as f64 * ratio).round() as usize).max(1);
    if hidden % heads != 0 {
        heads = 1;
    }
    TransformerConfig {
        num_layers: main.num_layers,
        hidden_size: hidden,
        num_heads: heads,
        ffn_size: ((main.ffn_size as f64 * ratio).ceil() as usize).max(1),
        max_seq_len: main.max_seq_len,
        vocab_size: main.vocab_size,
        embedding_size: main.embedding_size,
        attention_mode: AttentionMode::CausalLtr,
        dropout_rate: main.dropout_rate,
    }
}

/// Per-position categorical rows `[n, V]` over content positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    probs: Tensor,
}

impl NoiseDistribution {
    /// Rows must be non-negative; each is floored and renormalized.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let probs = Tensor::from_rows(rows);
        let (_, v) = probs.dims2();
        let mut out = probs.clone();
        for (i, row) in out.values_mut().chunks_mut(v).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::contract(format!("noise row {i} is not a distribution")));
            }
            for p in row.iter_mut() {
                *p /= s;
            }
            floor_row(row);
        }
        Ok(Self { probs: out })
    }

    /// Exact rows with no flooring; for hand-built test distributions.
    pub fn from_rows_unfloored(rows: &[Vec<f64>]) -> Self {
        Self {
            probs: Tensor::from_rows(rows),
        }
    }

    /// Floored softmax of `[n, V]` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (n, v) = logits.dims2();
        let mut probs = Vec::with_capacity(n * v);
        for t in 0..n {
            let mut row = math::softmax(logits.row(t));
            floor_row(&mut row);
            probs.extend(row);
        }
        Ok(Self {
            probs: Tensor::new(vec![n, v], probs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.dims2().1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn prob(&self, t: usize, token: u32) -> f64 {
        self.row(t)[token as usize]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// `(1 - V*eps) * q + eps`: keeps every entry at least `eps` and the row
/// sum unchanged.
fn floor_row(row: &mut [f64]) {
    let v = row.len() as f64;
    let keep = 1.0 - v * PROB_FLOOR;
    for p in row.iter_mut() {
        *p = keep * *p + PROB_FLOOR;
    }
}

/// Inverse-CDF draw from row `position`.
pub fn sample_noise(dist: &NoiseDistribution, position: usize, rng: &mut KeyedRng) -> u32 {
    let row = dist.row(position);
    let u = rng.uniform() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
    }
    last_positive as u32
}

#[derive(Debug, Clone)]
pub struct TwoTower {
    ltr: Encoder,
    rtl: Encoder,
    /// `[V, 2 * tower_hidden]`, no bias.
    output: ParamId,
}

impl TwoTower {
    /// `tower` is the shared tower shape; its attention mode is overridden
    /// per direction.
    pub fn init(
        tower: TransformerConfig,
        store: &mut ParamStore,
        prefix: &str,
        shared_embedding: Option<ParamId>,
        rng: &mut KeyedRng,
    ) -> Result<Self> {
        let mut ltr_cfg = tower.clone();
        ltr_cfg.attention_mode = AttentionMode::CausalLtr;
        let mut rtl_cfg = tower;
        rtl_cfg.attention_mode = AttentionMode::CausalRtl;
        let ltr = Encoder::init(ltr_cfg, store, &format!("{prefix}.ltr"), shared_embedding, rng)?;
        // without a shared table the two towers still share one embedding
        let table = shared_embedding.unwrap_or(ltr.token_embedding());
        let rtl = Encoder::init(rtl_cfg, store, &format!("{prefix}.rtl"), Some(table), rng)?;
        let (v, h) = (ltr.config().vocab_size, ltr.config().hidden_size);
        let output = store.insert(format!("{prefix}.output.weight"), Tensor::zeros(&[v, 2 * h]), true);
        Ok(Self { ltr, rtl, output })
    }

    pub fn config(&self) -> &TransformerConfig {
        self.ltr.config()
    }

    pub fn output(&self) -> ParamId {
        self.output
    }

    /// Both towers' forward passes.
    pub fn passes(&self) -> u64 {
        self.ltr.passes() + self.rtl.passes()
    }

    /// Every parameter read by the towers, the (possibly shared) token
    /// table included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ltr.param_ids();
        ids.extend(self.rtl.param_ids().into_iter().filter(|id| *id != self.rtl.token_embedding()));
        ids.push(self.output);
        ids
    }

    /// `[n, V]` logits for the content positions of framed `ids`.
    pub fn logits_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        ids: &[u32],
        mut dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        if ids.len() < 2 || ids[0] != crate::data::BOS || ids[ids.len() - 1] != crate::data::EOS {
            return Err(Error::MissingSentinels);
        }
        let n = ids.len() - 2;
        let fwd = self.ltr.forward(tape, store, ids, dropout.as_deref_mut())?;
        let bwd = self.rtl.forward(tape, store, ids, dropout)?;
        let left: Vec<usize> = (0..n).collect();
        let right: Vec<usize> = (2..n + 2).collect();
        let l = tape.gather_rows(fwd, &left)?;
        let r = tape.gather_rows(bwd, &right)?;
        let feats = tape.concat_cols(l, r)?;
        let w = tape.param(store, self.output);
        tape.matmul_bt(feats, w)
    }

    pub fn distribution(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<NoiseDistribution> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, store, tokens.ids(), None)?;
        NoiseDistribution::from_logits(tape.value(logits))
    }

    /// Summed `-log q(x_t | x_{\t})` over content positions, from the raw
    /// (unfloored) softmax.
    pub fn mle_loss_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &TokenSequence,
        dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        let logits = self.logits_on_tape(tape, store, tokens.ids(), dropout)?;
        let targets: Vec<usize> = tokens.content().iter().map(|&x| x as usize).collect();
        let nll = tape.nll_rows(logits, &targets)?;
        Ok(tape.sum(nll))
    }

    /// Mean over all content positions of the batch.
    pub fn noise_mle_loss(&self, store: &ParamStore, batch: &[TokenSequence]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in batch {
            let mut tape = Tape::new();
            let loss = self.mle_loss_on_tape(&mut tape, store, seq, None)?;
            total += tape.value(loss).item();
            count += seq.content_len();
        }
        Ok(total / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn tiny() -> (TwoTower, ParamStore) {
        let mut main = TransformerConfig::desk(9);
        main.hidden_size = 16;
        main.embedding_size = 16;
        main.ffn_size = 32;
        main.max_seq_len = 16;
        let tower = tower_config(&main, 0.25);
        let mut store = ParamStore::new();
        let mut rng = KeyedRng::new(2, Stream::Init);
        let tt = TwoTower::init(tower, &mut store, "noise", None, &mut rng).unwrap();
        // give the zero-initialised head some signal
        let out = tt.output();
        let n = store.get(out).numel();
        let vals: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        store.set_values(out, &vals).unwrap();
        (tt, store)
    }

    #[test]
    fn sizing_follows_ratio() {
        let c = tower_config(&TransformerConfig::desk(30), 0.25);
        assert_eq!((c.hidden_size, c.num_heads, c.ffn_size), (16, 1, 64));
        let mut odd = TransformerConfig::desk(30);
        odd.hidden_size = 60;
        odd.num_heads = 6;
        let c = tower_config(&odd, 0.25);
        assert_eq!(c.hidden_size, 15);
        assert_eq!(c.num_heads, 1);
    }

    #[test]
    fn rows_are_floored_distributions() {
        let (tt, store) = tiny();
        let d = tt.distribution(&store, &TokenSequence::from_content(vec![5, 6, 7, 8])).unwrap();
        assert_eq!(d.len(), 4);
        for t in 0..4 {
            assert!((d.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.row(t).iter().all(|&p| p >= PROB_FLOOR));
        }
    }

    #[test]
    fn row_t_ignores_token_t() {
        let (tt, store) = tiny();
        let base = TokenSequence::from_content(vec![5, 6, 7, 8, 5]);
        let d0 = tt.distribution(&store, &base).unwrap();
        for t in 0..5 {
            for tok in 0..9 {
                let d1 = tt.distribution(&store, &base.replaced(t, tok)).unwrap();
                assert_eq!(d0.row(t), d1.row(t));
            }
        }
        let d2 = tt.distribution(&store, &base.replaced(2, 8)).unwrap();
        assert_ne!(d0.row(1), d2.row(1));
        assert_ne!(d0.row(3), d2.row(3));
    }

    #[test]
    fn zero_head_gives_log_v_loss() {
        let mut main = TransformerConfig::desk(9);
        main.max_seq_len = 16;
        let mut store = ParamStore::new();
        let tt = TwoTower::init(tower_config(&main, 0.25), &mut store, "n", None, &mut KeyedRng::new(0, Stream::Init))
            .unwrap();
        let loss = tt.noise_mle_loss(&store, &[TokenSequence::from_content(vec![5, 6, 7])]).unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_sentinels_rejected() {
        let (tt, store) = tiny();
        let mut tape = Tape::new();
        assert!(matches!(
            tt.logits_on_tape(&mut tape, &store, &[5, 6, 7], None),
            Err(Error::MissingSentinels)
        ));
    }

    #[test]
    fn one_hot_row_always_sampled() {
        let d = NoiseDistribution::from_rows_unfloored(&[vec![0.0, 0.0, 1.0, 0.0]]);
        let mut rng = KeyedRng::new(0, Stream::NoiseSampling);
        assert!((0..100).all(|_| sample_noise(&d, 0, &mut rng) == 2));
    }

    #[test]
    fn uniform_row_frequencies() {
        let d = NoiseDistribution::from_rows_unfloored(&[vec![0.25; 4]]);
        let mut rng = KeyedRng::new(7, Stream::NoiseSampling);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_noise(&d, 0, &mut rng) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&f), "{f}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = NoiseDistribution::from_rows_unfloored(&[vec![0.1, 0.2, 0.3, 0.4]]);
        let a: Vec<u32> = {
            let mut r = KeyedRng::new(3, Stream::NoiseSampling);
            (0..50).map(|_| sample_noise(&d, 0, &mut r)).collect()
        };
        let mut r = KeyedRng::new(3, Stream::NoiseSampling);
        let b: Vec<u32> = (0..50).map(|_| sample_noise(&d, 0, &mut r)).collect();
        assert_eq!(a, b);
    }
}
