//! Joint training state: the main encoder, the two-tower noise model, their
//! optimizers and random streams, and conversion to and from checkpoints.

use std::fmt;

use super::checkpoint::{Checkpoint, CheckpointError, NamedArray};
use super::config::{Objective, RunConfig};
use super::schedule::learning_rate;
use crate::data::{truncate, Batch, TokenSequence, VocabMode, Vocabulary};
use crate::electra::discriminator_loss_on_tape;
use crate::electric::{noise_count, EnergyFn, pick_positions, ElectricModel, NcePlan};
use crate::error::{Error, Result};
use crate::mlm::MaskedLm;
use crate::noise::{NoiseDistribution, TwoTower};
use crate::rng::{KeyedRng, RngStreams, Stream};
use crate::tensor::{AdamConfig, AdamState, Grads, ParamId, ParamStore, Tape, Var};

/// One metrics-log record, rendered as `step TAB name TAB value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.step, self.name, self.value)
    }
}

impl Metric {
    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split('\t');
        let step = it.next()?.parse().ok()?;
        let name = it.next()?.to_string();
        let value = it.next()?.parse().ok()?;
        it.next().is_none().then_some(Self { step, name, value })
    }
}

/// Tokenized training and held-out sequences, truncated to the model's
/// length limit. The held-out part is the trailing share of the lines.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

/// Splits off the trailing `ceil(fraction * len)` lines, keeping at least
/// one training line.
pub fn split_lines(lines: &[String], fraction: f64) -> (&[String], &[String]) {
    let held = ((lines.len() as f64 * fraction).ceil() as usize).min(lines.len().saturating_sub(1));
    lines.split_at(lines.len() - held)
}

impl Dataset {
    /// Vocabulary from the training split only.
    pub fn build_vocab(lines: &[String], config: &RunConfig) -> Result<Vocabulary> {
        let (train, _) = split_lines(lines, config.heldout_fraction);
        Vocabulary::build(train.iter().map(String::as_str), config.vocab_mode, config.vocab_max_size)
    }

    pub fn new(lines: &[String], vocab: &Vocabulary, config: &RunConfig) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (train, heldout) = split_lines(lines, config.heldout_fraction);
        let tok = |ls: &[String]| -> Vec<TokenSequence> {
            ls.iter()
                .map(|l| truncate(&vocab.tokenize(l), config.max_seq_len))
                .filter(|s| s.content_len() > 0)
                .collect()
        };
        let train = tok(train);
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            train,
            heldout: tok(heldout),
        })
    }
}

const MAIN: &str = "main";
const NOISE: &str = "noise";

/// Everything a run needs to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: RunConfig,
    vocab: Vocabulary,
    store: ParamStore,
    electric: Option<ElectricModel>,
    noise: Option<TwoTower>,
    mlm: Option<MaskedLm>,
    optimizers: Vec<(String, AdamState)>,
    rng: RngStreams,
    step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let v = vocab.len();
        let mut rng = RngStreams::new(config.seed);
        let mut store = ParamStore::new();
        let (mut electric, mut noise, mut mlm) = (None, None, None);
        let adam = AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        let mut optimizers = Vec::new();
        match config.objective {
            Objective::Electric | Objective::Electra => {
                let init = rng.get(Stream::Init);
                let e = ElectricModel::init(config.encoder_config(v)?, &mut store, "electric", init)?;
                let shared = config.share_embeddings.then(|| e.encoder().token_embedding());
                let t = TwoTower::init(config.tower_config(v)?, &mut store, "noise", shared, init)?;
                let main_ids = e.param_ids();
                // the shared table is stepped once, by the main optimizer
                let noise_ids: Vec<ParamId> = t.param_ids().into_iter().filter(|id| !main_ids.contains(id)).collect();
                optimizers.push((MAIN.to_string(), AdamState::new(&store, main_ids, adam, 0.0)));
                optimizers.push((NOISE.to_string(), AdamState::new(&store, noise_ids, adam, 0.0)));
                electric = Some(e);
                noise = Some(t);
            }
            Objective::Mlm => {
                let m = MaskedLm::init(config.encoder_config(v)?, &mut store, "mlm", rng.get(Stream::Init))?;
                optimizers.push((MAIN.to_string(), AdamState::new(&store, m.param_ids(), adam, 0.0)));
                mlm = Some(m);
            }
        }
        Ok(Self {
            config,
            vocab,
            store,
            electric,
            noise,
            mlm,
            optimizers,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn electric(&self) -> Option<&ElectricModel> {
        self.electric.as_ref()
    }

    pub fn noise(&self) -> Option<&TwoTower> {
        self.noise.as_ref()
    }

    pub fn mlm(&self) -> Option<&MaskedLm> {
        self.mlm.as_ref()
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn learning_rate(&self) -> f64 {
        learning_rate(
            self.step,
            self.config.learning_rate,
            self.config.warmup_steps,
            self.config.steps,
        )
    }

    /// One joint update on `batch`. Losses are means over the batch's
    /// content positions (masked positions for the MLM objective).
    pub fn train_step(&mut self, batch: &Batch) -> Result<Vec<Metric>> {
        let seqs = batch.sequences();
        if seqs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let step = self.step;
        let lr = self.learning_rate();
        let mut grads = Grads::for_store(&self.store);
        let mut pos_rng = self.rng.get(Stream::PositionSampling).clone();
        let mut noise_rng = self.rng.get(Stream::NoiseSampling).clone();
        let mut drop_rng = self.rng.get(Stream::Dropout).clone();
        let use_dropout = self.config.dropout > 0.0;
        let fraction = self.config.noise_fraction;
        let store = &self.store;
        let mut metrics = Vec::new();

        if let Some(mlm) = &self.mlm {
            let plans: Vec<Vec<usize>> = seqs
                .iter()
                .map(|s| pick_positions(s.content_len(), noise_count(s.content_len(), fraction), &mut pos_rng))
                .collect();
            let count: usize = plans.iter().map(Vec::len).sum();
            let mut total = 0.0;
            for (b, (seq, positions)) in seqs.iter().zip(&plans).enumerate() {
                let mut tape = Tape::new();
                let loss = mlm.loss_on_tape(&mut tape, store, seq, positions, use_dropout.then_some(&mut drop_rng))?;
                let value = tape.value(loss).item();
                check_finite("mlm_loss", value, step, b)?;
                total += value;
                let scaled = tape.scale(loss, 1.0 / count as f64);
                tape.backward_into(scaled, &mut grads)?;
            }
            metrics.push(("mlm_loss", total / count as f64));
        } else {
            let electric = self.electric.as_ref().expect("electric objectives build the encoder");
            let noise = self.noise.as_ref().expect("electric objectives build the noise model");
            let count: usize = seqs.iter().map(TokenSequence::content_len).sum();
            let inv = 1.0 / count as f64;
            let (mut main_total, mut mle_total) = (0.0, 0.0);
            let main_name = match self.config.objective {
                Objective::Electra => "electra_loss",
                _ => "nce_loss",
            };
            for (b, seq) in seqs.iter().enumerate() {
                let mut tape = Tape::new();
                let logits = noise.logits_on_tape(&mut tape, store, seq.ids(), use_dropout.then_some(&mut drop_rng))?;
                // q is read off the same pass that the MLE loss uses and
                // enters the NCE loss as a constant
                let dist = NoiseDistribution::from_logits(tape.value(logits))?;
                let targets: Vec<usize> = seq.content().iter().map(|&x| x as usize).collect();
                let nll = tape.nll_rows(logits, &targets)?;
                let mle = tape.sum(nll);
                let plan = NcePlan::sample(seq, &dist, fraction, &mut pos_rng, &mut noise_rng)?;
                let drop = use_dropout.then_some(&mut drop_rng);
                let main: Var = match self.config.objective {
                    Objective::Electra => discriminator_loss_on_tape(electric, &mut tape, store, seq, &plan, drop)?,
                    _ => electric.nce_loss_on_tape(&mut tape, store, seq, &plan, drop)?,
                };
                let (mv, lv) = (tape.value(main).item(), tape.value(mle).item());
                check_finite(main_name, mv, step, b)?;
                check_finite("noise_mle_loss", lv, step, b)?;
                main_total += mv;
                mle_total += lv;
                let joint = tape.add(main, mle)?;
                let scaled = tape.scale(joint, inv);
                tape.backward_into(scaled, &mut grads)?;
            }
            metrics.push((main_name, main_total * inv));
            metrics.push(("noise_mle_loss", mle_total * inv));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                step,
                batch: 0,
            });
        }

        self.store.zero_grads();
        self.store.accumulate(&grads);
        for (_, opt) in &mut self.optimizers {
            opt.learning_rate = lr;
            opt.step(&mut self.store)?;
        }
        for (s, r) in [
            (Stream::PositionSampling, &pos_rng),
            (Stream::NoiseSampling, &noise_rng),
            (Stream::Dropout, &drop_rng),
        ] {
            self.rng.restore(s, r.word_pos());
        }
        self.step += 1;
        metrics.push(("lr", lr));
        Ok(metrics
            .into_iter()
            .map(|(name, value)| Metric {
                step,
                name: name.to_string(),
                value,
            })
            .collect())
    }

    /// Held-out losses on the first `eval_sentences` sequences, with a
    /// fresh evaluation stream each call so repeated evaluations of the
    /// same parameters agree exactly. Labelled with the completed step.
    pub fn evaluate(&self, heldout: &[TokenSequence]) -> Result<Vec<Metric>> {
        let seqs = &heldout[..heldout.len().min(self.config.eval_sentences)];
        let mut out: Vec<(&str, f64)> = Vec::new();
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = KeyedRng::new(self.config.seed, Stream::Eval);
        let mut sample_rng = KeyedRng::with_stream_id(self.config.seed, (Stream::Eval.id() << 40) | 1);
        let fraction = self.config.noise_fraction;
        let store = &self.store;
        if let Some(mlm) = &self.mlm {
            let (mut total, mut count) = (0.0, 0usize);
            for seq in seqs {
                let positions = pick_positions(seq.content_len(), noise_count(seq.content_len(), fraction), &mut rng);
                let mut tape = Tape::new();
                let loss = mlm.loss_on_tape(&mut tape, store, seq, &positions, None)?;
                total += tape.value(loss).item();
                count += positions.len();
            }
            out.push(("heldout_mlm_loss", total / count as f64));
        } else {
            let electric = self.electric.as_ref().expect("electric objectives build the encoder");
            let noise = self.noise.as_ref().expect("electric objectives build the noise model");
            let (mut nce, mut bce, mut mle, mut neg_energy, mut correct_nce, mut correct_bce) =
                (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
            let mut count = 0usize;
            for seq in seqs {
                let dist = noise.distribution(store, seq)?;
                mle += -(0..seq.content_len()).map(|t| dist.prob(t, seq.at(t)).ln()).sum::<f64>();
                let plan = NcePlan::sample(seq, &dist, fraction, &mut rng, &mut sample_rng)?;
                let energies = electric.bind(store).energies(&plan.noised(seq))?;
                let offsets = plan.logit_offsets();
                for ((e, o), r) in energies.iter().zip(&offsets).zip(plan.in_r()) {
                    let (nce_sign, bce_sign) = if r { (1.0, -1.0) } else { (-1.0, 1.0) };
                    nce += crate::tensor::math::softplus(nce_sign * (o - e));
                    bce += crate::tensor::math::softplus(bce_sign * e);
                    correct_nce += usize::from((e > o) == r);
                    correct_bce += usize::from((*e > 0.0) == r);
                }
                neg_energy += -electric.bind(store).energies(seq)?.iter().sum::<f64>();
                count += seq.content_len();
            }
            let c = count as f64;
            out.push(("heldout_nce_loss", nce / c));
            out.push(("heldout_electra_loss", bce / c));
            out.push(("heldout_noise_mle_loss", mle / c));
            out.push(("heldout_pll_per_token", neg_energy / c));
            let acc = match self.config.objective {
                Objective::Electra => correct_bce,
                _ => correct_nce,
            };
            out.push(("heldout_accuracy", acc as f64 / c));
        }
        Ok(out
            .into_iter()
            .map(|(name, value)| Metric {
                step: self.step,
                name: name.to_string(),
                value,
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut text = self.config.to_text();
        text.push_str(&format!("vocab.mode={}\n", self.vocab.mode()));
        let hex: Vec<String> = self.vocab.content_tokens().iter().map(|t| hex_encode(t)).collect();
        text.push_str(&format!("vocab.tokens={}\n", hex.join(" ")));
        text.push_str(&format!("meta.step={}\n", self.step));
        for (s, pos) in self.rng.positions() {
            text.push_str(&format!("meta.rng.{}={pos}\n", s.name()));
        }
        for (name, opt) in &self.optimizers {
            text.push_str(&format!("meta.adam.{name}.steps={}\n", opt.step_count));
        }
        let mut arrays: Vec<NamedArray> = self
            .store
            .ids()
            .map(|id| {
                let t = self.store.get(id);
                NamedArray {
                    name: self.store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                }
            })
            .collect();
        for (name, opt) in &self.optimizers {
            for (i, &id) in opt.params().iter().enumerate() {
                let (m, v) = opt.moments(i);
                let shape = self.store.get(id).shape().to_vec();
                let pname = self.store.name(id);
                arrays.push(NamedArray {
                    name: format!("adam.{name}.m.{pname}"),
                    shape: shape.clone(),
                    values: m.to_vec(),
                });
                arrays.push(NamedArray {
                    name: format!("adam.{name}.v.{pname}"),
                    shape,
                    values: v.to_vec(),
                });
            }
        }
        Checkpoint { text, arrays }
    }

    /// Rebuilds the state, requiring every array the configuration implies
    /// and nothing else.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = RunConfig::default();
        for key in RunConfig::KEYS {
            config.set(key, ckpt.require(key)?)?;
        }
        let mode: VocabMode = ckpt.require("vocab.mode")?.parse()?;
        let tokens = ckpt
            .require("vocab.tokens")?
            .split_whitespace()
            .map(hex_decode)
            .collect::<std::result::Result<Vec<String>, CheckpointError>>()?;
        let vocab = Vocabulary::from_tokens(mode, tokens)?;
        let mut state = Self::new(config, vocab)?;

        let mut expected = state.store.len();
        let fetch = |name: &str, shape: &[usize]| -> Result<&NamedArray> {
            let a = ckpt
                .array(name)
                .ok_or_else(|| CheckpointError::Missing(format!("array {name}")))?;
            if a.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: a.shape.clone(),
                }
                .into());
            }
            Ok(a)
        };
        let ids: Vec<ParamId> = state.store.ids().collect();
        for &id in &ids {
            let a = fetch(state.store.name(id), state.store.get(id).shape())?;
            state.store.set_values(id, &a.values)?;
        }
        for (name, opt) in &mut state.optimizers {
            opt.step_count = parse_meta(ckpt, &format!("meta.adam.{name}.steps"))?;
            let params = opt.params().to_vec();
            for (i, id) in params.into_iter().enumerate() {
                let shape = state.store.get(id).shape().to_vec();
                let pname = state.store.name(id).to_string();
                let m = fetch(&format!("adam.{name}.m.{pname}"), &shape)?;
                let v = fetch(&format!("adam.{name}.v.{pname}"), &shape)?;
                let (dm, dv) = opt.moments_mut(i);
                dm.copy_from_slice(&m.values);
                dv.copy_from_slice(&v.values);
                expected += 2;
            }
        }
        if ckpt.arrays.len() != expected {
            return Err(CheckpointError::Malformed(format!(
                "{} arrays present, {expected} expected for this configuration",
                ckpt.arrays.len()
            ))
            .into());
        }
        for s in Stream::ALL {
            let pos: u128 = parse_meta(ckpt, &format!("meta.rng.{}", s.name()))?;
            state.rng.restore(s, pos);
        }
        state.step = parse_meta(ckpt, "meta.step")?;
        Ok(state)
    }
}

fn check_finite(what: &str, value: f64, step: u64, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
            batch,
        })
    }
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let raw = ckpt.require(key)?;
    raw.parse()
        .map_err(|_| CheckpointError::Malformed(format!("bad value {raw:?} for {key}")).into())
}

// tokens may contain spaces, '=' or newlines, so they are stored as hex
fn hex_encode(s: &str) -> String {
    s.bytes().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> std::result::Result<String, CheckpointError> {
    let bad = || CheckpointError::Malformed(format!("bad vocabulary entry {s:?}"));
    if s.len() % 2 != 0 {
        return Err(bad());
    }
    let bytes = (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| bad()))
        .collect::<std::result::Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|_| bad())
}
