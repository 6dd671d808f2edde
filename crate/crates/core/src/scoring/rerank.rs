use super::nbest::NBestList;
use super::wer::CorpusWer;
use crate::error::{Error, Result};

/// `{0.05, 0.10, ..., 1.00}`
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// Index of `argmax f + λ·PLL`; ties go to the lowest original rank.
pub fn rerank(list: &NBestList, plls: &[f64], lambda: f64) -> usize {
    debug_assert_eq!(list.hypotheses.len(), plls.len());
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (h, p)) in list.hypotheses.iter().zip(plls).enumerate() {
        let s = combined_score(h.acoustic_score, *p, lambda);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// `f + λ·PLL`, with `λ = 0` ignoring the PLL entirely.
pub fn combined_score(acoustic: f64, pll: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        acoustic
    } else {
        acoustic + lambda * pll
    }
}

/// Corpus WER of the reranked outputs.
pub fn corpus_wer(lists: &[NBestList], plls: &[Vec<f64>], lambda: f64) -> CorpusWer {
    let mut wer = CorpusWer::default();
    for (list, p) in lists.iter().zip(plls) {
        let choice = rerank(list, p, lambda);
        wer.add(&list.reference, &list.hypotheses[choice].text);
    }
    wer
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub wer: f64,
    /// `(λ, WER)` for every grid value, in grid order.
    pub sweep: Vec<(f64, f64)>,
}

/// Grid λ minimizing corpus WER on `dev`; ties go to the smaller λ.
pub fn select_lambda(dev: &[NBestList], plls: &[Vec<f64>], grid: &[f64]) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::contract("no dev n-best lists"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sweep: Vec<(f64, f64)> = sorted.iter().map(|&l| (l, corpus_wer(dev, plls, l).rate())).collect();
    let (lambda, wer) = sweep
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (l, w)| match best {
            Some((_, bw)) if bw <= w => best,
            _ => Some((l, w)),
        })
        .expect("grid is non-empty");
    Ok(LambdaSelection { lambda, wer, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::nbest::Hypothesis;
    use proptest::prelude::*;

    fn list(scores: &[f64]) -> NBestList {
        NBestList {
            utterance_id: "dev/clean/0".into(),
            reference: "h0".into(),
            hypotheses: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Hypothesis {
                    text: format!("h{i}"),
                    acoustic_score: s,
                })
                .collect(),
        }
    }

    #[test]
    fn grid_has_twenty_values() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[19] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_lambdas() {
        let l = list(&[-3.0, -1.0, -2.0]);
        let p = [-1.0, -9.0, -5.0];
        assert_eq!(rerank(&l, &p, 0.0), 1);
        assert_eq!(rerank(&l, &p, 1e9), 0);
        assert_eq!(rerank(&list(&[-4.0]), &[-2.0], 0.3), 0);
    }

    #[test]
    fn ties_go_to_lowest_rank() {
        let l = list(&[-1.0, -1.0, -1.0]);
        assert_eq!(rerank(&l, &[0.0, 0.0, 0.0], 0.5), 0);
    }

    #[test]
    fn constant_pll_selects_smallest_lambda() {
        let lists = vec![list(&[-1.0, -2.0]), list(&[-2.0, -1.0])];
        let plls = vec![vec![-3.0; 2]; 2];
        let sel = select_lambda(&lists, &plls, &default_lambda_grid()).unwrap();
        assert_eq!(sel.lambda, 0.05);
        assert!(select_lambda(&lists, &plls, &[]).is_err());
    }

    proptest! {
        #[test]
        fn shared_shift_keeps_argmax(
            scores in proptest::collection::vec(-10.0f64..0.0, 1..20),
            seed in proptest::collection::vec(-30.0f64..0.0, 20),
            shift in -100.0f64..100.0,
            lambda in 0.0f64..2.0,
        ) {
            let l = list(&scores);
            let p: Vec<f64> = seed[..scores.len()].to_vec();
            let shifted: Vec<f64> = p.iter().map(|x| x + shift).collect();
            // a shared shift can only move the argmax through rounding ties
            let a = rerank(&l, &p, lambda);
            let b = rerank(&l, &shifted, lambda);
            let s = |i: usize| combined_score(scores[i], p[i], lambda);
            prop_assert!(a == b || (s(a) - s(b)).abs() < 1e-9);
        }
    }
}
