use crate::data::{TokenSequence, MASK};
use crate::electric::EnergyFn;
use crate::error::Result;
use crate::mlm::MaskedLm;
use crate::tensor::ParamStore;

/// `Σ_t -E_t` over content positions, one pass. Not length-normalized.
pub fn pll_electric<M: EnergyFn + ?Sized>(model: &M, tokens: &TokenSequence) -> Result<f64> {
    Ok(-model.energies(tokens)?.iter().sum::<f64>())
}

/// `Σ_t log p(x_t | x with t masked)`, one pass per content position.
pub fn pll_masked_lm(model: &MaskedLm, store: &ParamStore, tokens: &TokenSequence) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..tokens.content_len() {
        let masked = tokens.replaced(t, MASK);
        let row = &model.mlm_logits(store, &masked, &[t])?[0];
        total += row[tokens.at(t) as usize].ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electric::FixedEnergy;
    use crate::rng::{KeyedRng, Stream};
    use crate::transformer::TransformerConfig;

    #[test]
    fn electric_pll_is_negated_energy_sum() {
        let m = FixedEnergy::new(|_: &TokenSequence| vec![1.0, 2.0, 3.0]);
        assert_eq!(pll_electric(&m, &TokenSequence::from_content(vec![5, 6, 7])).unwrap(), -6.0);
        let zero = FixedEnergy::new(|_: &TokenSequence| vec![0.0; 3]);
        assert_eq!(pll_electric(&zero, &TokenSequence::from_content(vec![5, 6, 7])).unwrap(), 0.0);
        assert_eq!(m.passes(), 1);
    }

    #[test]
    fn untrained_mlm_is_uniform_and_costs_n_passes() {
        let mut cfg = TransformerConfig::desk(10);
        cfg.hidden_size = 8;
        cfg.embedding_size = 8;
        cfg.num_heads = 2;
        cfg.ffn_size = 8;
        let mut store = ParamStore::new();
        let m = MaskedLm::init(cfg, &mut store, "mlm", &mut KeyedRng::new(0, Stream::Init)).unwrap();
        let seq = TokenSequence::from_content(vec![5, 6, 7, 8]);
        let pll = pll_masked_lm(&m, &store, &seq).unwrap();
        assert!((pll + 4.0 * 10f64.ln()).abs() < 1e-12);
        assert_eq!(m.passes(), 4);
        let single = TokenSequence::from_content(vec![6]);
        let one = pll_masked_lm(&m, &store, &single).unwrap();
        let row = m.mlm_logits(&store, &single.replaced(0, MASK), &[0]).unwrap();
        assert_eq!(one, row[0][6].ln());
    }
}
