//! Masked-LM baseline: a bidirectional encoder with a softmax head. Used
//! only to score text (n passes per sentence) for comparison.

use crate::data::{TokenSequence, MASK};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::{math, ParamId, ParamStore, Tape, Var};
use crate::transformer::{AttentionMode, Encoder, TransformerConfig};

#[derive(Debug, Clone)]
pub struct MaskedLm {
    encoder: Encoder,
    head: (ParamId, ParamId),
}

impl MaskedLm {
    /// The output head starts at zero, so an untrained model is uniform.
    pub fn init(mut config: TransformerConfig, store: &mut ParamStore, prefix: &str, rng: &mut KeyedRng) -> Result<Self> {
        config.attention_mode = AttentionMode::Bidirectional;
        let encoder = Encoder::init(config, store, &format!("{prefix}.encoder"), None, rng)?;
        let (h, v) = (encoder.config().hidden_size, encoder.config().vocab_size);
        let w = store.insert(format!("{prefix}.head.weight"), crate::tensor::Tensor::zeros(&[h, v]), true);
        let b = store.insert_filled(format!("{prefix}.head.bias"), &[v], 0.0);
        Ok(Self { encoder, head: (w, b) })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn passes(&self) -> u64 {
        self.encoder.passes()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend([self.head.0, self.head.1]);
        ids
    }

    /// `[|positions|, V]` logits for framed `ids` at content `positions`.
    pub fn logits_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        ids: &[u32],
        positions: &[usize],
        dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        let states = self.encoder.forward(tape, store, ids, dropout)?;
        let rows: Vec<usize> = positions.iter().map(|t| t + 1).collect();
        let picked = tape.gather_rows(states, &rows)?;
        let w = tape.param(store, self.head.0);
        let b = tape.param(store, self.head.1);
        let logits = tape.matmul(picked, w)?;
        tape.add_bias(logits, b)
    }

    /// Softmax rows, one per masked content position.
    pub fn mlm_logits(&self, store: &ParamStore, tokens: &TokenSequence, masked: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = tokens.content_len();
        for &t in masked {
            if t >= n {
                return Err(Error::PositionOutOfRange { position: t, len: n });
            }
            if tokens.at(t) != MASK {
                return Err(Error::NotMasked(t));
            }
        }
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, store, tokens.ids(), masked, None)?;
        let value = tape.value(logits);
        Ok((0..masked.len()).map(|i| math::softmax(value.row(i))).collect())
    }

    /// Summed cross-entropy at `positions` after replacing them with MASK.
    pub fn loss_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &TokenSequence,
        positions: &[usize],
        dropout: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        let masked = tokens.replaced_many(positions, &vec![MASK; positions.len()]);
        let targets: Vec<usize> = positions.iter().map(|&t| tokens.at(t) as usize).collect();
        let logits = self.logits_on_tape(tape, store, masked.ids(), positions, dropout)?;
        let nll = tape.nll_rows(logits, &targets)?;
        Ok(tape.sum(nll))
    }
}
