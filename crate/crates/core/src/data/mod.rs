//! Corpus ingestion, tokenization and batching.

mod batch;
pub mod synth;
mod vocab;

pub use batch::{make_batches, truncate, Batch, BatchSchedule};
pub use vocab::{VocabMode, Vocabulary, BOS, EOS, MASK, NUM_RESERVED, PAD, UNK};

use std::path::Path;

use crate::error::{Error, Result};

/// A tokenized sentence framed as `[BOS, x_1 .. x_n, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn from_content(content: Vec<u32>) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend(content);
        ids.push(EOS);
        Self { ids }
    }

    /// Validates the BOS/EOS frame.
    pub fn from_framed(ids: Vec<u32>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::MissingSentinels);
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// `n`, excluding the two sentinels.
    pub fn content_len(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// Token at content position `t` (0-based).
    pub fn at(&self, t: usize) -> u32 {
        self.ids[t + 1]
    }

    /// Copy with content position `t` replaced.
    pub fn replaced(&self, t: usize, token: u32) -> Self {
        let mut ids = self.ids.clone();
        ids[t + 1] = token;
        Self { ids }
    }

    pub fn replaced_many(&self, positions: &[usize], tokens: &[u32]) -> Self {
        let mut ids = self.ids.clone();
        for (&t, &tok) in positions.iter().zip(tokens) {
            ids[t + 1] = tok;
        }
        Self { ids }
    }
}

/// Reads a UTF-8 corpus, one sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_invariants() {
        let s = TokenSequence::from_content(vec![7, 8, 9]);
        assert_eq!(s.content_len(), 3);
        assert_eq!(s.ids()[0], BOS);
        assert_eq!(*s.ids().last().unwrap(), EOS);
        assert_eq!(s.replaced(1, 5).content(), &[7, 5, 9]);
        assert!(TokenSequence::from_framed(vec![7, 8]).is_err());
        assert!(TokenSequence::from_framed(vec![BOS, EOS]).is_ok());
    }
}
