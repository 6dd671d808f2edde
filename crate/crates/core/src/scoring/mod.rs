//! Pseudo-log-likelihood scoring, n-best re-ranking and word error rate.

pub mod nbest;
mod pll;
mod rerank;
mod report;
mod wer;

pub use nbest::{read_nbest, synthesize_nbest, synthetic_harness, write_nbest, HarnessConfig, Hypothesis, NBestList};
pub use pll::{pll_electric, pll_masked_lm};
pub use rerank::{
    combined_score, corpus_wer, default_lambda_grid, rerank, select_lambda, LambdaSelection, RerankConfig,
};
pub use report::{rerank_report, run_rerank, RerankReport, ScoreMode, SequenceScorer, SubsetResult};
pub use wer::{edit_distance, word_edits, word_error_rate, CorpusWer};

use crate::data::Vocabulary;
use crate::error::{Error, Result};

/// PLL for every hypothesis of every list, in list order.
pub fn score_lists<F>(lists: &[NBestList], mut scorer: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&str) -> Result<f64>,
{
    lists
        .iter()
        .map(|l| l.hypotheses.iter().map(|h| scorer(&h.text)).collect())
        .collect()
}

/// Errors with the offending symbols when any hypothesis or reference
/// contains text the vocabulary cannot represent.
pub fn check_coverage(vocab: &Vocabulary, lists: &[NBestList]) -> Result<()> {
    let mut bad: Vec<String> = Vec::new();
    for l in lists {
        bad.extend(vocab.uncovered(&l.reference));
        for h in &l.hypotheses {
            bad.extend(vocab.uncovered(&h.text));
        }
    }
    bad.sort();
    bad.dedup();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::VocabMismatch(bad))
    }
}
