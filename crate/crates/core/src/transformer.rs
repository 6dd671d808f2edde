//! Pre-norm transformer encoder with learned absolute positions.
//!
//! Parameters live in a shared [`ParamStore`]; an [`Encoder`] only holds
//! the ids of its tensors, so several encoders can share a token table.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Bidirectional,
    CausalLtr,
    CausalRtl,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Bidirectional => "bidirectional",
            AttentionMode::CausalLtr => "causal_ltr",
            AttentionMode::CausalRtl => "causal_rtl",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(AttentionMode::Bidirectional),
            "causal_ltr" => Ok(AttentionMode::CausalLtr),
            "causal_rtl" => Ok(AttentionMode::CausalRtl),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    /// Framed length limit, sentinels included.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Width of the token and position tables. When it differs from
    /// `hidden_size` a learned projection maps embeddings into the stack.
    pub embedding_size: usize,
    pub attention_mode: AttentionMode,
    pub dropout_rate: f64,
}

impl TransformerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            max_seq_len: 64,
            vocab_size,
            embedding_size: 64,
            attention_mode: AttentionMode::Bidirectional,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// `mask[i][j] == 1` iff position `i` may attend to position `j`.
pub fn build_attention_mask(mode: AttentionMode, n: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let allowed = match mode {
                        AttentionMode::Bidirectional => true,
                        AttentionMode::CausalLtr => j <= i,
                        AttentionMode::CausalRtl => j >= i,
                    };
                    allowed as u8
                })
                .collect()
        })
        .collect()
}

/// One state row per framed input position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Debug)]
pub struct Encoder {
    config: TransformerConfig,
    prefix: String,
    token_embedding: ParamId,
    position_embedding: ParamId,
    projection: Option<ParamId>,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    passes: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            prefix: self.prefix.clone(),
            token_embedding: self.token_embedding,
            position_embedding: self.position_embedding,
            projection: self.projection,
            layers: self.layers.clone(),
            final_ln: self.final_ln,
            passes: AtomicU64::new(self.passes()),
        }
    }
}

fn linear(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut KeyedRng) -> (ParamId, ParamId) {
    let w = store.insert_normal(format!("{name}.weight"), &[rows, cols], INIT_STD, rng);
    let b = store.insert_filled(format!("{name}.bias"), &[cols], 0.0);
    (w, b)
}

fn layer_norm(store: &mut ParamStore, name: String, width: usize) -> (ParamId, ParamId) {
    let g = store.insert_filled(format!("{name}.gamma"), &[width], 1.0);
    let b = store.insert_filled(format!("{name}.beta"), &[width], 0.0);
    (g, b)
}

impl Encoder {
    /// Registers a fresh encoder under `prefix`. Pass `shared_embedding` to
    /// reuse an existing `[vocab_size, embedding_size]` token table.
    pub fn init(
        config: TransformerConfig,
        store: &mut ParamStore,
        prefix: &str,
        shared_embedding: Option<ParamId>,
        rng: &mut KeyedRng,
    ) -> Result<Self> {
        config.validate()?;
        let (v, e, h, f) = (config.vocab_size, config.embedding_size, config.hidden_size, config.ffn_size);
        let token_embedding = match shared_embedding {
            Some(id) => {
                if store.get(id).shape() != [v, e] {
                    return Err(Error::Shape {
                        op: "shared_embedding",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: vec![v, e],
                    });
                }
                id
            }
            None => store.insert_normal(format!("{prefix}.token_embedding"), &[v, e], INIT_STD, rng),
        };
        let position_embedding =
            store.insert_normal(format!("{prefix}.position_embedding"), &[config.max_seq_len, e], INIT_STD, rng);
        let projection = (e != h).then(|| store.insert_normal(format!("{prefix}.embed_projection"), &[e, h], INIT_STD, rng));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(LayerIds {
                ln1: layer_norm(store, format!("{p}.ln1"), h),
                wq: linear(store, format!("{p}.query"), h, h, rng),
                wk: linear(store, format!("{p}.key"), h, h, rng),
                wv: linear(store, format!("{p}.value"), h, h, rng),
                wo: linear(store, format!("{p}.attn_out"), h, h, rng),
                ln2: layer_norm(store, format!("{p}.ln2"), h),
                ffn_in: linear(store, format!("{p}.ffn_in"), h, f, rng),
                ffn_out: linear(store, format!("{p}.ffn_out"), f, h, rng),
            });
        }
        let final_ln = layer_norm(store, format!("{prefix}.final_ln"), h);
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            token_embedding,
            position_embedding,
            projection,
            layers,
            final_ln,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    /// Every parameter this encoder reads, the token table included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        ids.extend(self.projection);
        for l in &self.layers {
            for (a, b) in [l.ln1, l.wq, l.wk, l.wv, l.wo, l.ln2, l.ffn_in, l.ffn_out] {
                ids.extend([a, b]);
            }
        }
        ids.extend([self.final_ln.0, self.final_ln.1]);
        ids
    }

    /// Completed forward passes since construction.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records one encoder pass over `ids` and returns the `[L, hidden]`
    /// final states. Dropout is active only when `dropout_rng` is given.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        ids: &[u32],
        mut dropout_rng: Option<&mut KeyedRng>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let l = ids.len();
        let rate = self.config.dropout_rate;
        let mut maybe_drop = |tape: &mut Tape<'a>, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, rate, rng),
            None => x,
        };
        let p = |tape: &mut Tape<'a>, id: ParamId| tape.param(store, id);

        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..l).collect();
        let tok = p(tape, self.token_embedding);
        let tok = tape.gather_rows(tok, &idx)?;
        let pos = p(tape, self.position_embedding);
        let pos = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(proj) = self.projection {
            let w = p(tape, proj);
            x = tape.matmul(x, w)?;
        }
        x = maybe_drop(tape, x);

        let mask = AttentionMask::from_matrix(&build_attention_mask(self.config.attention_mode, l));
        let affine = |tape: &mut Tape<'a>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let y = tape.matmul(x, wv)?;
            tape.add_bias(y, bv)
        };
        let norm = |tape: &mut Tape<'a>, x: Var, (g, b): (ParamId, ParamId)| -> Result<Var> {
            let gv = tape.param(store, g);
            let bv = tape.param(store, b);
            tape.layer_norm(x, gv, bv, LN_EPS)
        };

        for layer in &self.layers {
            let a = norm(tape, x, layer.ln1)?;
            let q = affine(tape, a, layer.wq)?;
            let k = affine(tape, a, layer.wk)?;
            let v = affine(tape, a, layer.wv)?;
            let att = tape.attention(q, k, v, self.config.num_heads, &mask)?;
            let att = affine(tape, att, layer.wo)?;
            let att = maybe_drop(tape, att);
            x = tape.add(x, att)?;

            let f = norm(tape, x, layer.ln2)?;
            let f = affine(tape, f, layer.ffn_in)?;
            let f = tape.gelu(f);
            let f = affine(tape, f, layer.ffn_out)?;
            let f = maybe_drop(tape, f);
            x = tape.add(x, f)?;
        }
        let out = norm(tape, x, self.final_ln)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Inference-mode encoding (no dropout, no gradient bookkeeping kept).
    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, tokens.ids(), None)?;
        Ok(HiddenStates {
            states: tape.value(out).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn tiny(mode: AttentionMode) -> (Encoder, ParamStore) {
        let config = TransformerConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_seq_len: 12,
            vocab_size: 10,
            embedding_size: 8,
            attention_mode: mode,
            dropout_rate: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = KeyedRng::new(4, Stream::Init);
        let enc = Encoder::init(config, &mut store, "enc", None, &mut rng).unwrap();
        (enc, store)
    }

    fn seq(content: &[u32]) -> TokenSequence {
        TokenSequence::from_content(content.to_vec())
    }

    #[test]
    fn mask_shapes() {
        assert_eq!(build_attention_mask(AttentionMode::Bidirectional, 3), vec![vec![1; 3]; 3]);
        assert_eq!(build_attention_mask(AttentionMode::CausalLtr, 2), vec![vec![1, 0], vec![1, 1]]);
        for n in 1..=16 {
            let ltr = build_attention_mask(AttentionMode::CausalLtr, n);
            let rtl = build_attention_mask(AttentionMode::CausalRtl, n);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(rtl[i][j], ltr[j][i]);
                }
            }
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let (enc, store) = tiny(AttentionMode::Bidirectional);
        let s = seq(&[5, 6, 7]);
        let a = enc.encode(&store, &s).unwrap();
        assert_eq!(a.states.shape(), &[5, 8]);
        assert_eq!(a, enc.encode(&store, &s).unwrap());
        assert_eq!(enc.passes(), 2);
    }

    #[test]
    fn ltr_states_ignore_the_future() {
        let (enc, store) = tiny(AttentionMode::CausalLtr);
        let a = enc.encode(&store, &seq(&[5, 6, 7, 8])).unwrap();
        let b = enc.encode(&store, &seq(&[5, 6, 9, 8])).unwrap();
        // framed positions 0..=2 precede the mutated position 3
        assert_eq!(a.states.values()[..3 * 8], b.states.values()[..3 * 8]);
        assert_ne!(a.states.row(3), b.states.row(3));
    }

    #[test]
    fn rtl_states_ignore_the_past() {
        let (enc, store) = tiny(AttentionMode::CausalRtl);
        let a = enc.encode(&store, &seq(&[5, 6, 7, 8])).unwrap();
        let b = enc.encode(&store, &seq(&[9, 6, 7, 8])).unwrap();
        assert_eq!(a.states.values()[2 * 8..], b.states.values()[2 * 8..]);
        assert_ne!(a.states.row(1), b.states.row(1));
    }

    #[test]
    fn bidirectional_states_all_react() {
        let (enc, store) = tiny(AttentionMode::Bidirectional);
        let a = enc.encode(&store, &seq(&[5, 6, 7, 8])).unwrap();
        let b = enc.encode(&store, &seq(&[5, 6, 7, 9])).unwrap();
        for i in 0..6 {
            assert_ne!(a.states.row(i), b.states.row(i), "row {i}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (enc, store) = tiny(AttentionMode::Bidirectional);
        assert!(matches!(
            enc.encode(&store, &seq(&[5, 10])),
            Err(Error::TokenOutOfRange { id: 10, position: 2, .. })
        ));
        assert!(matches!(
            enc.encode(&store, &seq(&[5; 11])),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::desk(30);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
    }
}
