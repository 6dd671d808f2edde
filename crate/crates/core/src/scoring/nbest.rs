//! N-best lists: the tab-separated file format and a synthetic generator
//! that stands in for a recognizer.
//!
//! Utterance ids follow `portion/subset/index` (for example
//! `dev/clean/0007`), so λ can be selected per subset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::wer::edit_distance;
use crate::data::synth;
use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub text: String,
    /// `f(x|s)`, higher is better.
    pub acoustic_score: f64,
}

/// Hypotheses in their original rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub utterance_id: String,
    pub reference: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    /// First id segment, e.g. `dev`.
    pub fn portion(&self) -> &str {
        self.utterance_id.split('/').next().unwrap_or("")
    }

    /// Second id segment, e.g. `clean`; empty when absent.
    pub fn subset(&self) -> &str {
        self.utterance_id.split('/').nth(1).unwrap_or("")
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `id TAB score TAB text` records and `id TAB reference` records.
/// List order is first appearance in the n-best file.
pub fn read_nbest(nbest_path: &Path, refs_path: &Path) -> Result<Vec<NBestList>> {
    let mut refs: HashMap<String, String> = HashMap::new();
    for (i, line) in std::fs::read_to_string(refs_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(refs_path, i + 1, "expected utterance_id TAB reference"))?;
        if refs.insert(id.to_string(), text.to_string()).is_some() {
            return Err(parse_err(refs_path, i + 1, format!("duplicate utterance id {id:?}")));
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut hyps: HashMap<String, Vec<Hypothesis>> = HashMap::new();
    for (i, line) in std::fs::read_to_string(nbest_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(score), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(nbest_path, i + 1, "expected utterance_id TAB score TAB hypothesis"));
        };
        let acoustic_score: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(nbest_path, i + 1, format!("bad acoustic score {score:?}")))?;
        if !acoustic_score.is_finite() {
            return Err(parse_err(nbest_path, i + 1, "acoustic score must be finite"));
        }
        let entry = hyps.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Vec::new()
        });
        entry.push(Hypothesis {
            text: text.to_string(),
            acoustic_score,
        });
    }
    order
        .into_iter()
        .map(|id| {
            let reference = refs
                .get(&id)
                .cloned()
                .ok_or_else(|| parse_err(refs_path, 0, format!("no reference for utterance {id:?}")))?;
            let hypotheses = hyps.remove(&id).expect("every ordered id has hypotheses");
            Ok(NBestList {
                utterance_id: id,
                reference,
                hypotheses,
            })
        })
        .collect()
}

pub fn write_nbest(lists: &[NBestList], nbest_path: &Path, refs_path: &Path) -> Result<()> {
    let mut nbest = String::new();
    let mut refs = String::new();
    for l in lists {
        writeln!(refs, "{}\t{}", l.utterance_id, l.reference).expect("writing to a String");
        for h in &l.hypotheses {
            // `{}` on f64 is the shortest exact round-trip form
            writeln!(nbest, "{}\t{}\t{}", l.utterance_id, h.acoustic_score, h.text).expect("writing to a String");
        }
    }
    std::fs::write(nbest_path, nbest)?;
    std::fs::write(refs_path, refs)?;
    Ok(())
}

/// Lists grouped by `(portion, subset)`, in id order of first appearance.
pub fn group_by_subset(lists: &[NBestList]) -> BTreeMap<(String, String), Vec<NBestList>> {
    let mut out: BTreeMap<(String, String), Vec<NBestList>> = BTreeMap::new();
    for l in lists {
        out.entry((l.portion().to_string(), l.subset().to_string())).or_default().push(l.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub hypotheses: usize,
    /// Each corrupted hypothesis receives 1..=max_edits random edits.
    pub max_edits: usize,
    /// Std-dev of the Gaussian added to `-character_edits`.
    pub acoustic_noise: f64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            hypotheses: 100,
            max_edits: 4,
            acoustic_noise: 1.0,
            seed: 0,
        }
    }
}

fn corrupt(words: &[&str], lexicon: &[&str], alphabet: &[char], edits: usize, rng: &mut KeyedRng) -> String {
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    for _ in 0..edits {
        let u = rng.uniform();
        if out.is_empty() || u < 0.15 {
            let at = rng.below(out.len() + 1);
            out.insert(at, lexicon[rng.below(lexicon.len())].to_string());
        } else if u < 0.30 && out.len() > 1 {
            out.remove(rng.below(out.len()));
        } else if u < 0.70 {
            let at = rng.below(out.len());
            out[at] = lexicon[rng.below(lexicon.len())].to_string();
        } else {
            // one-character misspelling
            let at = rng.below(out.len());
            let mut chars: Vec<char> = out[at].chars().collect();
            let c = rng.below(chars.len());
            chars[c] = alphabet[rng.below(alphabet.len())];
            out[at] = chars.into_iter().collect();
        }
    }
    out.join(" ")
}

/// One list per reference: the reference itself plus corrupted variants,
/// each scored `-character_edits + N(0, σ)` and sorted best first. Ids
/// are `portion/subset/NNNN`.
///
/// The acoustic cost counts characters, not words: dropping a long word
/// costs more evidence than a one-letter slip, as it would for a model
/// that hears sounds.
pub fn synthesize_nbest(
    references: &[String],
    lexicon: &[impl AsRef<str>],
    portion: &str,
    subset: &str,
    config: &HarnessConfig,
) -> Vec<NBestList> {
    let lexicon: Vec<&str> = lexicon.iter().map(AsRef::as_ref).collect();
    let lexicon = lexicon.as_slice();
    let mut alphabet: Vec<char> = lexicon.iter().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let key = (Stream::Synth.id() << 40) | (hash_label(portion, subset) & 0xff_ffff_fffe);
    let mut rng = KeyedRng::with_stream_id(config.seed, key);
    let mut lists = Vec::with_capacity(references.len());
    for (u, reference) in references.iter().enumerate() {
        let words: Vec<&str> = reference.split_whitespace().collect();
        let mut seen: HashSet<String> = HashSet::new();
        let mut texts = vec![reference.clone()];
        seen.insert(reference.clone());
        let mut attempts = 0;
        while texts.len() < config.hypotheses && attempts < config.hypotheses * 50 {
            attempts += 1;
            let edits = 1 + rng.below(config.max_edits.max(1));
            let text = corrupt(&words, lexicon, &alphabet, edits, &mut rng);
            if !text.is_empty() && seen.insert(text.clone()) {
                texts.push(text);
            }
        }
        let ref_chars: Vec<char> = reference.chars().collect();
        let mut hypotheses: Vec<Hypothesis> = texts
            .into_iter()
            .map(|text| {
                let cost = edit_distance(&ref_chars, &text.chars().collect::<Vec<_>>()) as f64;
                Hypothesis {
                    acoustic_score: -cost + rng.normal(0.0, config.acoustic_noise),
                    text,
                }
            })
            .collect();
        hypotheses.sort_by(|a, b| b.acoustic_score.total_cmp(&a.acoustic_score));
        lists.push(NBestList {
            utterance_id: format!("{portion}/{subset}/{u:04}"),
            reference: reference.clone(),
            hypotheses,
        });
    }
    lists
}

/// `dev` and `test` lists of `utterances` each for every subset, with
/// references drawn from the synthetic grammar.
pub fn synthetic_harness(utterances: usize, subsets: &[&str], max_chars: usize, config: &HarnessConfig) -> Vec<NBestList> {
    let lexicon = synth::lexicon();
    let mut out = Vec::new();
    for portion in ["dev", "test"] {
        for &subset in subsets {
            // references use the odd half of the label space, hypotheses the even
            let key = (Stream::Synth.id() << 40) | ((hash_label(portion, subset) | 1) & 0xff_ffff_ffff);
            let mut rng = KeyedRng::with_stream_id(config.seed, key);
            let refs: Vec<String> = (0..utterances).map(|_| synth::sentence(&mut rng, max_chars)).collect();
            out.extend(synthesize_nbest(&refs, &lexicon, portion, subset, config));
        }
    }
    out
}

fn hash_label(portion: &str, subset: &str) -> u64 {
    // FNV-1a; only needs to separate a handful of labels deterministically
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in portion.bytes().chain(*b"/").chain(subset.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs() -> Vec<String> {
        vec!["the cat sees a dog".into(), "some birds sing".into()]
    }

    const LEX: &[&str] = &["the", "cat", "sees", "a", "dog", "some", "birds", "sing", "runs"];

    #[test]
    fn harness_shape() {
        let cfg = HarnessConfig {
            hypotheses: 30,
            ..HarnessConfig::default()
        };
        let lists = synthesize_nbest(&refs(), LEX, "dev", "clean", &cfg);
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[1].utterance_id, "dev/clean/0001");
        assert_eq!((lists[1].portion(), lists[1].subset()), ("dev", "clean"));
        for l in &lists {
            assert_eq!(l.hypotheses.len(), 30);
            assert!(l.hypotheses.iter().any(|h| h.text == l.reference));
            assert!(l.hypotheses.windows(2).all(|w| w[0].acoustic_score >= w[1].acoustic_score));
            let unique: HashSet<&str> = l.hypotheses.iter().map(|h| h.text.as_str()).collect();
            assert_eq!(unique.len(), 30);
        }
        assert_eq!(lists, synthesize_nbest(&refs(), LEX, "dev", "clean", &cfg));
        assert_ne!(lists, synthesize_nbest(&refs(), LEX, "test", "clean", &cfg));
    }

    #[test]
    fn noiseless_scores_are_negative_character_edits() {
        let cfg = HarnessConfig {
            hypotheses: 20,
            acoustic_noise: 0.0,
            ..HarnessConfig::default()
        };
        for l in synthesize_nbest(&refs(), LEX, "dev", "clean", &cfg) {
            assert_eq!(l.hypotheses[0].text, l.reference);
            assert_eq!(l.hypotheses[0].acoustic_score, 0.0);
            let r: Vec<char> = l.reference.chars().collect();
            for h in &l.hypotheses {
                let t: Vec<char> = h.text.chars().collect();
                assert_eq!(h.acoustic_score, -(edit_distance(&r, &t) as f64));
            }
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lists = synthesize_nbest(&refs(), LEX, "test", "other", &HarnessConfig::default());
        let (n, r) = (dir.path().join("nbest.tsv"), dir.path().join("refs.tsv"));
        write_nbest(&lists, &n, &r).unwrap();
        assert_eq!(read_nbest(&n, &r).unwrap(), lists);
    }

    #[test]
    fn malformed_lines_name_the_location() {
        let dir = tempfile::tempdir().unwrap();
        let (n, r) = (dir.path().join("n"), dir.path().join("r"));
        std::fs::write(&r, "u1\thello\n").unwrap();
        std::fs::write(&n, "u1\t-1.5\thello\nu1\tNaNx\thi\n").unwrap();
        match read_nbest(&n, &r) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&n, "u2\t-1\thi\n").unwrap();
        assert!(read_nbest(&n, &r).is_err());
    }
}
