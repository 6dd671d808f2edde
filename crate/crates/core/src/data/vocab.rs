use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use super::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    Char,
    /// Character inventory plus greedy frequency-based merges within words.
    WordpieceLite,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabMode::Char => "char",
            VocabMode::WordpieceLite => "wordpiece-lite",
        })
    }
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(VocabMode::Char),
            "wordpiece-lite" | "wordpiece" => Ok(VocabMode::WordpieceLite),
            other => Err(Error::Config(format!("unknown vocab mode {other:?}"))),
        }
    }
}

/// Token table. Ids `0..NUM_RESERVED` are the fixed sentinels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: VocabMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its token list (non-reserved entries in id order).
    pub fn from_tokens(mode: VocabMode, tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate().skip(NUM_RESERVED) {
            if t.is_empty() || index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate or empty vocabulary entry {t:?}")));
            }
        }
        let max_piece_chars = all[NUM_RESERVED..].iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            mode,
            tokens: all,
            index,
            max_piece_chars,
        })
    }

    /// Deterministic vocabulary from a corpus of lines. `max_size` counts the
    /// reserved ids.
    pub fn build<'a, I>(lines: I, mode: VocabMode, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let lines: Vec<&str> = lines.into_iter().filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let capacity = max_size.saturating_sub(NUM_RESERVED);
        let mut char_counts: HashMap<char, u64> = HashMap::new();
        for line in &lines {
            for c in line.chars() {
                *char_counts.entry(c).or_default() += 1;
            }
        }
        let mut chars: Vec<(char, u64)> = char_counts.into_iter().collect();
        // most frequent first, ties by code point
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = chars.iter().take(capacity).map(|(c, _)| c.to_string()).collect();

        if mode == VocabMode::WordpieceLite && tokens.len() < capacity {
            tokens.extend(learn_merges(&lines, &tokens, capacity - tokens.len()));
        }
        Self::from_tokens(mode, tokens)
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Unknown symbols map to UNK.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let content = match self.mode {
            VocabMode::Char => text
                .chars()
                .map(|c| {
                    let mut buf = [0u8; 4];
                    self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)
                })
                .collect(),
            VocabMode::WordpieceLite => self.greedy_pieces(text),
        };
        TokenSequence::from_content(content)
    }

    fn greedy_pieces(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                out.push(self.id(&chars[i].to_string()).unwrap_or(UNK));
                i += 1;
                continue;
            }
            let word_end = (i..chars.len()).find(|&j| chars[j].is_whitespace()).unwrap_or(chars.len());
            let mut matched = false;
            let max = self.max_piece_chars.min(word_end - i);
            for len in (1..=max).rev() {
                let piece: String = chars[i..i + len].iter().collect();
                if let Some(id) = self.id(&piece) {
                    out.push(id);
                    i += len;
                    matched = true;
                    break;
                }
            }
            if !matched {
                out.push(UNK);
                i += 1;
            }
        }
        out
    }

    /// Concatenates token strings; reserved sentinels are dropped and UNK
    /// renders as U+FFFD.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS | MASK => {}
                UNK => s.push('\u{FFFD}'),
                _ => {
                    if let Some(t) = self.token(id) {
                        s.push_str(t);
                    } else {
                        s.push('\u{FFFD}');
                    }
                }
            }
        }
        s
    }

    /// Symbols in `text` the vocabulary cannot represent.
    pub fn uncovered(&self, text: &str) -> Vec<String> {
        let mut bad: Vec<String> = text
            .chars()
            .filter(|c| self.id(&c.to_string()).is_none())
            .map(|c| c.to_string())
            .collect();
        bad.sort();
        bad.dedup();
        bad
    }
}

fn learn_merges(lines: &[&str], chars: &[String], budget: usize) -> Vec<String> {
    let known: std::collections::HashSet<&str> = chars.iter().map(String::as_str).collect();
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            let pieces: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            if pieces.iter().all(|p| known.contains(p.as_str())) {
                *words.entry(pieces).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = words.into_iter().collect();
    let mut merges = Vec::new();
    while merges.len() < budget {
        let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *pairs.entry((pair[0].clone(), pair[1].clone())).or_default() += n;
            }
        }
        // highest count, ties by lexicographic pair order (BTreeMap iteration)
        let best = pairs
            .into_iter()
            .fold(None::<((String, String), u64)>, |best, (p, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((p, n)),
            });
        let Some(((a, b), n)) = best else { break };
        if n < 2 {
            break;
        }
        let merged = format!("{a}{b}");
        for (w, _) in &mut words {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == a && w[i + 1] == b {
                    w[i] = merged.clone();
                    w.remove(i + 1);
                }
                i += 1;
            }
        }
        if !merges.contains(&merged) {
            merges.push(merged);
        }
    }
    merges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_from_abab() {
        let v = Vocabulary::build(["abab"], VocabMode::Char, 100).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 2);
        assert_eq!(v.content_tokens(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn building_is_deterministic() {
        let corpus = ["the cat sat", "a dog ran far", "the end"];
        let a = Vocabulary::build(corpus, VocabMode::WordpieceLite, 40).unwrap();
        let b = Vocabulary::build(corpus, VocabMode::WordpieceLite, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_keeps_most_frequent() {
        let v = Vocabulary::build(["abcdefghijjjj"], VocabMode::Char, 6).unwrap();
        assert_eq!(v.content_tokens(), &["j".to_string()]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocabulary::build(Vec::<&str>::new(), VocabMode::Char, 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_frames_and_maps_unknowns() {
        let v = Vocabulary::build(["ab"], VocabMode::Char, 10).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!((a, b), (5, 6));
        assert_eq!(v.tokenize("ab").ids(), &[BOS, 5, 6, EOS]);
        assert_eq!(v.tokenize("azb").ids(), &[BOS, 5, UNK, 6, EOS]);
        assert_eq!(v.detokenize(v.tokenize("abba").ids()), "abba");
    }

    #[test]
    fn wordpiece_lite_round_trips_and_compresses() {
        let corpus = ["the cat and the hat", "the cat sat on the mat", "that hat"];
        let v = Vocabulary::build(corpus, VocabMode::WordpieceLite, 40).unwrap();
        assert!(v.id("th").is_some() || v.id("the").is_some());
        for line in corpus {
            let seq = v.tokenize(line);
            assert_eq!(v.detokenize(seq.ids()), line);
            assert!(seq.content_len() < line.chars().count());
        }
    }

    #[test]
    fn uncovered_lists_unknown_symbols() {
        let v = Vocabulary::build(["ab"], VocabMode::Char, 10).unwrap();
        assert_eq!(v.uncovered("abzq z"), vec![" ", "q", "z"]);
    }
}
