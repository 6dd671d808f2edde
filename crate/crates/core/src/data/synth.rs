//! Seeded toy-English corpus: an agreement grammar over a fixed lexicon
//! with Zipf-distributed word choice. Spelling, agreement, and word order
//! give a char-level cloze model real context to exploit.

use crate::rng::{KeyedRng, Stream};

const NOUNS: &str = "cat dog bird farmer teacher river garden house city king queen horse student doctor \
    baker sailor fox boat child wolf man woman mouse leaf knife friend neighbor captain soldier \
    painter singer dancer writer driver pilot hunter miner tailor merchant priest judge nurse \
    lawyer farmhand cook clerk guard porter poet artist scholar monk knight prince princess \
    village forest mountain valley island meadow harbor castle tower bridge road market church \
    school library kitchen window door table chair lamp candle letter book story song picture \
    apple orange lemon cherry melon bread cake cheese onion carrot potato basket bottle bucket \
    ladder wagon carriage engine machine clock bell drum flute piano violin cloud storm wind \
    stone rock hill lake pond field fence gate wall roof garden sheep goat cow pig duck goose \
    hen rabbit deer bear lion tiger monkey snake frog turtle whale shark eagle owl crow sparrow";

const INTRANSITIVE: &str = "run sleep sing wait laugh walk swim dance smile cry shout whisper \
    travel wander rest work play listen arrive return hurry pause stumble shiver tremble yawn \
    breathe glow shine fall rise drift float sink vanish appear";

const TRANSITIVE: &str = "see like follow find watch help visit carry push pull paint draw \
    build fix clean open close hold lift throw catch chase greet answer praise blame trust \
    admire remember forget notice call guide teach thank warn feed wash sell buy borrow lend";

const ADJECTIVES: &str = "old young small large quiet happy red green brave clever tall short \
    wise foolish kind cruel gentle angry tired hungry proud shy busy lazy bright dark warm cold \
    heavy light rich poor strange famous lonely cheerful careful honest patient curious silent \
    noisy golden silver wooden broken hidden ancient modern";

const ADVERBS: &str = "quickly slowly often never quietly always sometimes rarely gladly \
    softly loudly calmly eagerly gently suddenly";

const PREPOSITIONS: &str = "near behind under beside with across above below around beyond inside";
const SING_DET: &[&str] = &["the", "a", "every", "this", "that", "one", "my", "our"];
const PLUR_DET: &[&str] = &["the", "some", "these", "those", "many", "few", "my", "our", "two"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so", "until", "when"];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("child", "children"),
    ("wolf", "wolves"),
    ("man", "men"),
    ("woman", "women"),
    ("mouse", "mice"),
    ("leaf", "leaves"),
    ("knife", "knives"),
    ("sheep", "sheep"),
    ("deer", "deer"),
    ("goose", "geese"),
];

fn words(list: &'static str) -> Vec<&'static str> {
    let mut seen = std::collections::HashSet::new();
    list.split_whitespace().filter(|w| seen.insert(*w)).collect()
}

fn ends_in_consonant_y(w: &str) -> bool {
    let b = w.as_bytes();
    b.len() >= 2 && b[b.len() - 1] == b'y' && !b"aeiou".contains(&b[b.len() - 2])
}

/// Regular English `-s` inflection, used for plural nouns and third-person
/// verbs alike.
fn add_s(w: &str) -> String {
    if ends_in_consonant_y(w) {
        format!("{}ies", &w[..w.len() - 1])
    } else if ["s", "x", "z", "ch", "sh"].iter().any(|e| w.ends_with(e)) {
        format!("{w}es")
    } else {
        format!("{w}s")
    }
}

fn plural(noun: &str) -> String {
    IRREGULAR_PLURALS
        .iter()
        .find(|(s, _)| *s == noun)
        .map_or_else(|| add_s(noun), |(_, p)| p.to_string())
}

struct Grammar {
    nouns: Vec<(String, String)>,
    intransitive: Vec<(String, String)>,
    transitive: Vec<(String, String)>,
    adjectives: Vec<&'static str>,
    adverbs: Vec<&'static str>,
    prepositions: Vec<&'static str>,
}

impl Grammar {
    fn new() -> Self {
        let verbs = |list| words(list).into_iter().map(|v| (add_s(v), v.to_string())).collect();
        Self {
            nouns: words(NOUNS).into_iter().map(|n| (n.to_string(), plural(n))).collect(),
            intransitive: verbs(INTRANSITIVE),
            transitive: verbs(TRANSITIVE),
            adjectives: words(ADJECTIVES),
            adverbs: words(ADVERBS),
            prepositions: words(PREPOSITIONS),
        }
    }
}

/// Every word the grammar can emit, sorted and deduplicated.
pub fn lexicon() -> Vec<String> {
    let g = Grammar::new();
    let mut out: Vec<String> = Vec::new();
    for (a, b) in g.nouns.iter().chain(&g.intransitive).chain(&g.transitive) {
        out.extend([a.clone(), b.clone()]);
    }
    for list in [&g.adjectives, &g.adverbs, &g.prepositions] {
        out.extend(list.iter().map(|w| w.to_string()));
    }
    for list in [SING_DET, PLUR_DET, CONJUNCTIONS] {
        out.extend(list.iter().map(|w| w.to_string()));
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Zipf-weighted choice: item `i` has weight `1 / (i + 1)`, so list
/// order doubles as frequency rank.
fn pick<'a, T>(rng: &mut KeyedRng, items: &'a [T]) -> &'a T {
    let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.uniform() * total;
    for (i, item) in items.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u < 0.0 {
            return item;
        }
    }
    &items[items.len() - 1]
}

fn noun_phrase(g: &Grammar, rng: &mut KeyedRng, out: &mut Vec<String>) -> bool {
    let plural = rng.uniform() < 0.4;
    let noun = pick(rng, &g.nouns);
    out.push(pick(rng, if plural { PLUR_DET } else { SING_DET }).to_string());
    if rng.uniform() < 0.4 {
        out.push(pick(rng, &g.adjectives).to_string());
    }
    out.push(if plural { noun.1.clone() } else { noun.0.clone() });
    plural
}

fn clause(g: &Grammar, rng: &mut KeyedRng, out: &mut Vec<String>) {
    let plural = noun_phrase(g, rng, out);
    let form = |v: &(String, String)| if plural { v.1.clone() } else { v.0.clone() };
    if rng.uniform() < 0.45 {
        if rng.uniform() < 0.3 {
            out.push(pick(rng, &g.adverbs).to_string());
        }
        out.push(form(pick(rng, &g.intransitive)));
    } else {
        out.push(form(pick(rng, &g.transitive)));
        noun_phrase(g, rng, out);
    }
    if rng.uniform() < 0.3 {
        out.push(pick(rng, &g.prepositions).to_string());
        noun_phrase(g, rng, out);
    }
}

/// One sentence of at most `max_chars` characters.
pub fn sentence(rng: &mut KeyedRng, max_chars: usize) -> String {
    sentence_from(&Grammar::new(), rng, max_chars)
}

fn sentence_from(g: &Grammar, rng: &mut KeyedRng, max_chars: usize) -> String {
    loop {
        let mut words = Vec::new();
        clause(g, rng, &mut words);
        if rng.uniform() < 0.35 {
            words.push(pick(rng, CONJUNCTIONS).to_string());
            clause(g, rng, &mut words);
        }
        let s = words.join(" ");
        if s.chars().count() <= max_chars {
            return s;
        }
    }
}

/// Deterministic corpus of roughly `target_bytes` bytes (one sentence per
/// line, trailing newline included in the count).
pub fn corpus(seed: u64, target_bytes: usize, max_chars: usize) -> Vec<String> {
    let mut rng = KeyedRng::new(seed, Stream::Synth);
    let mut lines = Vec::new();
    let g = Grammar::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let s = sentence_from(&g, &mut rng, max_chars);
        bytes += s.len() + 1;
        lines.push(s);
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = corpus(5, 20_000, 62);
        let b = corpus(5, 20_000, 62);
        assert_eq!(a, b);
        let bytes: usize = a.iter().map(|l| l.len() + 1).sum();
        assert!((20_000..21_000).contains(&bytes));
        assert!(a.iter().all(|l| l.chars().count() <= 62));
    }

    #[test]
    fn inflection() {
        assert_eq!(plural("city"), "cities");
        assert_eq!(plural("fox"), "foxes");
        assert_eq!(plural("child"), "children");
        assert_eq!(add_s("watch"), "watches");
        assert_eq!(add_s("play"), "plays");
    }

    #[test]
    fn sentences_use_only_lexicon_words() {
        let lex = lexicon();
        for line in corpus(1, 5_000, 62) {
            for w in line.split(' ') {
                assert!(lex.binary_search(&w.to_string()).is_ok(), "{w}");
            }
        }
    }
}
