/// Word-level Levenshtein distance (unit-cost substitution, insertion,
/// deletion), two-row dynamic programme.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn word_edits(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_distance(&r, &h)
}

/// Edits over reference length. An empty reference gives 0 for an empty
/// hypothesis and infinity otherwise; use [`CorpusWer`] to aggregate.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> f64 {
    let words = reference.split_whitespace().count();
    let edits = word_edits(reference, hypothesis);
    match (words, edits) {
        (0, 0) => 0.0,
        (0, _) => f64::INFINITY,
        _ => edits as f64 / words as f64,
    }
}

/// Total edits over total reference words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusWer {
    pub edits: usize,
    pub words: usize,
}

impl CorpusWer {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        self.edits += word_edits(reference, hypothesis);
        self.words += reference.split_whitespace().count();
    }

    pub fn rate(&self) -> f64 {
        if self.words == 0 {
            if self.edits == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.edits as f64 / self.words as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_rates() {
        assert_eq!(word_error_rate("a b c", "a b c"), 0.0);
        assert!((word_error_rate("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-15);
        assert!((word_error_rate("a b c", "a c") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(word_error_rate("", "x y"), f64::INFINITY);
    }

    #[test]
    fn empty_reference_counts_insertions_in_corpus() {
        let mut c = CorpusWer::default();
        c.add("", "x y");
        c.add("a b", "a b");
        assert_eq!((c.edits, c.words), (2, 2));
        assert_eq!(c.rate(), 1.0);
    }

    proptest! {
        #[test]
        fn symmetric(a in proptest::collection::vec(0u8..5, 0..12), b in proptest::collection::vec(0u8..5, 0..12)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }
    }
}
