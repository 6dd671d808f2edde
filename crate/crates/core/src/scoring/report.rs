//! End-to-end re-ranking: score every hypothesis with a trained model,
//! select λ per subset on the dev portion, and report dev/test WER with
//! encoder pass counts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::nbest::NBestList;
use super::pll::{pll_electric, pll_masked_lm};
use super::rerank::{corpus_wer, select_lambda};
use super::wer::CorpusWer;
use super::check_coverage;
use crate::data::{truncate, TokenSequence};
use crate::electra::electra_tt_pll;
use crate::error::{Error, Result};
use crate::train::{Objective, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Electric,
    Mlm,
    ElectraTt,
    /// Acoustic score only.
    None,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Electric => "electric",
            ScoreMode::Mlm => "mlm",
            ScoreMode::ElectraTt => "electra_tt",
            ScoreMode::None => "none",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "electric" => Ok(ScoreMode::Electric),
            "mlm" => Ok(ScoreMode::Mlm),
            "electra_tt" | "electra-tt" => Ok(ScoreMode::ElectraTt),
            "none" => Ok(ScoreMode::None),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

impl ScoreMode {
    /// The training objective whose checkpoint this mode reads.
    pub fn objective(self) -> Option<Objective> {
        match self {
            ScoreMode::Electric => Some(Objective::Electric),
            ScoreMode::Mlm => Some(Objective::Mlm),
            ScoreMode::ElectraTt => Some(Objective::Electra),
            ScoreMode::None => None,
        }
    }
}

/// Text-level PLL scorer over a trained state.
pub struct SequenceScorer<'a> {
    trainer: &'a Trainer,
    mode: ScoreMode,
    main_start: u64,
    noise_start: u64,
    /// Positions whose discriminator output hit the clamp (ELECTRA-TT).
    pub clamped: usize,
    /// Content tokens scored so far.
    pub tokens: usize,
    pub sequences: usize,
}

impl<'a> SequenceScorer<'a> {
    pub fn new(trainer: &'a Trainer, mode: ScoreMode) -> Result<Self> {
        let want = mode
            .objective()
            .ok_or_else(|| Error::Config("mode none does not score text".into()))?;
        if trainer.config().objective != want {
            return Err(Error::Config(format!(
                "mode {mode} needs a checkpoint trained with objective {want}, found {}",
                trainer.config().objective
            )));
        }
        let mut s = Self {
            trainer,
            mode,
            main_start: 0,
            noise_start: 0,
            clamped: 0,
            tokens: 0,
            sequences: 0,
        };
        s.main_start = s.raw_main_passes();
        s.noise_start = s.raw_noise_passes();
        Ok(s)
    }

    fn raw_main_passes(&self) -> u64 {
        match self.mode {
            ScoreMode::Mlm => self.trainer.mlm().map_or(0, |m| m.passes()),
            _ => self.trainer.electric().map_or(0, |m| m.passes()),
        }
    }

    fn raw_noise_passes(&self) -> u64 {
        self.trainer.noise().map_or(0, |m| m.passes())
    }

    /// Main-encoder passes since construction.
    pub fn main_passes(&self) -> u64 {
        self.raw_main_passes() - self.main_start
    }

    /// Tower passes since construction (two per noise-model evaluation).
    pub fn noise_passes(&self) -> u64 {
        self.raw_noise_passes() - self.noise_start
    }

    /// Tokenized and truncated to the model's length limit.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        truncate(&self.trainer.vocab().tokenize(text), self.trainer.config().max_seq_len)
    }

    pub fn score(&mut self, text: &str) -> Result<f64> {
        let seq = self.tokenize(text);
        self.tokens += seq.content_len();
        self.sequences += 1;
        if seq.content_len() == 0 {
            return Ok(0.0);
        }
        let store = self.trainer.store();
        match self.mode {
            ScoreMode::Electric => {
                let m = self.trainer.electric().expect("objective checked");
                pll_electric(&m.bind(store), &seq)
            }
            ScoreMode::Mlm => pll_masked_lm(self.trainer.mlm().expect("objective checked"), store, &seq),
            ScoreMode::ElectraTt => {
                let d = self.trainer.electric().expect("objective checked");
                let noise = self.trainer.noise().expect("objective checked").distribution(store, &seq)?;
                let s = electra_tt_pll(&d.bind(store), &noise, &seq)?;
                self.clamped += s.clamped;
                Ok(s.pll)
            }
            ScoreMode::None => unreachable!("rejected in new"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetResult {
    pub subset: String,
    pub lambda: f64,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub dev_baseline: f64,
    pub test_baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankReport {
    pub mode: ScoreMode,
    pub subsets: Vec<SubsetResult>,
    /// Pooled over subsets, each at its own λ.
    pub test_wer: f64,
    pub test_baseline: f64,
    pub hypotheses: usize,
    pub tokens: usize,
    pub main_passes: u64,
    pub noise_passes: u64,
    pub clamped: usize,
}

impl fmt::Display for RerankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode\t{}", self.mode)?;
        writeln!(f, "subset\tlambda\tdev_wer\ttest_wer\tdev_baseline\ttest_baseline")?;
        for r in &self.subsets {
            writeln!(
                f,
                "{}\t{:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.subset, r.lambda, r.dev_wer, r.test_wer, r.dev_baseline, r.test_baseline
            )?;
        }
        writeln!(f, "test_wer\t{:.4}\tbaseline\t{:.4}", self.test_wer, self.test_baseline)?;
        writeln!(
            f,
            "hypotheses\t{}\ttokens\t{}\tpasses\t{}\tnoise_passes\t{}",
            self.hypotheses, self.tokens, self.main_passes, self.noise_passes
        )?;
        if self.clamped > 0 {
            writeln!(f, "clamped_positions\t{}", self.clamped)?;
        }
        Ok(())
    }
}

/// Selects λ on `dev/<subset>` and applies it to `test/<subset>`. With
/// mode `None` the PLLs are ignored and λ is 0.
pub fn rerank_report(lists: &[NBestList], plls: &[Vec<f64>], mode: ScoreMode, grid: &[f64]) -> Result<RerankReport> {
    type Portion = (Vec<NBestList>, Vec<Vec<f64>>);
    let mut by: BTreeMap<(String, String), Portion> = BTreeMap::new();
    for (l, p) in lists.iter().zip(plls) {
        let portion = l.portion();
        if portion != "dev" && portion != "test" {
            return Err(Error::Config(format!(
                "utterance {:?} is neither dev/ nor test/",
                l.utterance_id
            )));
        }
        let e = by.entry((l.subset().to_string(), portion.to_string())).or_default();
        e.0.push(l.clone());
        e.1.push(p.clone());
    }
    let subsets: Vec<String> = {
        let mut s: Vec<String> = by.keys().map(|(s, _)| s.clone()).collect();
        s.dedup();
        s
    };
    let mut rows = Vec::new();
    let (mut pooled, mut pooled_base) = (CorpusWer::default(), CorpusWer::default());
    for subset in subsets {
        let (dev, dev_p) = by
            .get(&(subset.clone(), "dev".into()))
            .ok_or_else(|| Error::Config(format!("subset {subset:?} has no dev lists to select λ on")))?;
        let (test, test_p) = by
            .get(&(subset.clone(), "test".into()))
            .ok_or_else(|| Error::Config(format!("subset {subset:?} has no test lists")))?;
        let (lambda, dev_wer) = if mode == ScoreMode::None {
            (0.0, corpus_wer(dev, dev_p, 0.0).rate())
        } else {
            let sel = select_lambda(dev, dev_p, grid)?;
            (sel.lambda, sel.wer)
        };
        let t = corpus_wer(test, test_p, lambda);
        let tb = corpus_wer(test, test_p, 0.0);
        pooled.edits += t.edits;
        pooled.words += t.words;
        pooled_base.edits += tb.edits;
        pooled_base.words += tb.words;
        rows.push(SubsetResult {
            subset,
            lambda,
            dev_wer,
            test_wer: t.rate(),
            dev_baseline: corpus_wer(dev, dev_p, 0.0).rate(),
            test_baseline: tb.rate(),
        });
    }
    Ok(RerankReport {
        mode,
        subsets: rows,
        test_wer: pooled.rate(),
        test_baseline: pooled_base.rate(),
        hypotheses: lists.iter().map(|l| l.hypotheses.len()).sum(),
        tokens: 0,
        main_passes: 0,
        noise_passes: 0,
        clamped: 0,
    })
}

/// Scores every hypothesis (unless `mode` is `None`) and reports.
pub fn run_rerank(
    trainer: Option<&Trainer>,
    mode: ScoreMode,
    lists: &[NBestList],
    grid: &[f64],
) -> Result<RerankReport> {
    if mode == ScoreMode::None {
        let plls: Vec<Vec<f64>> = lists.iter().map(|l| vec![0.0; l.hypotheses.len()]).collect();
        return rerank_report(lists, &plls, mode, grid);
    }
    let trainer = trainer.ok_or_else(|| Error::Config(format!("mode {mode} needs a checkpoint")))?;
    check_coverage(trainer.vocab(), lists)?;
    let mut scorer = SequenceScorer::new(trainer, mode)?;
    let plls = super::score_lists(lists, |h| scorer.score(h))?;
    let mut report = rerank_report(lists, &plls, mode, grid)?;
    report.tokens = scorer.tokens;
    report.main_passes = scorer.main_passes();
    report.noise_passes = scorer.noise_passes();
    report.clamped = scorer.clamped;
    Ok(report)
}
