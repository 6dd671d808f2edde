use super::params::{Grads, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// `|analytic - fd| / max(1, |fd|)`
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Compares the tape gradient of `f` against central differences over
/// every coordinate of `params`, returning the maximum relative error.
///
/// `f` must be deterministic: it is re-run twice per coordinate.
pub fn finite_difference_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<f64>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut grads = Grads::for_store(store);
    {
        let mut g = Tape::new();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::contract(format!("non-finite objective {v}")));
        }
        g.backward_into(loss, &mut grads)?;
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Tape::new();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::contract(format!("non-finite objective {v}")))
        }
    };
    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).numel();
        for c in 0..n {
            let orig = store.get(id).values()[c];
            store.get_mut(id).values_mut()[c] = orig + eps;
            let up = eval(store);
            store.get_mut(id).values_mut()[c] = orig - eps;
            let down = eval(store);
            store.get_mut(id).values_mut()[c] = orig;
            let fd = (up? - down?) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[c]);
            worst = worst.max(relative_error(analytic, fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{KeyedRng, Stream};
    use crate::tensor::{AttentionMask, Tensor};

    fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = KeyedRng::new(seed, Stream::Init);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let v = (0..n).map(|_| rng.uniform() * 4.0 - 2.0).collect();
            s.insert(*name, Tensor::new(shape.clone(), v).unwrap(), true);
        }
        s
    }

    #[test]
    fn quadratic_at_three() {
        let mut s = ParamStore::new();
        let x = s.insert("x", Tensor::scalar(3.0), true);
        let err = finite_difference_check(&mut s, &[x], 1e-5, |g, s| {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let mut s = random_store(&[("a", vec![5])], 2);
        let a = s.id("a").unwrap();
        let err = finite_difference_check(&mut s, &[a], 1e-3, |g, s| {
            let v = g.param(s, a);
            let sc = g.scale(v, 3.5);
            Ok(g.sum(sc))
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut s = random_store(&[("a", vec![2])], 2);
        let a = s.id("a").unwrap();
        let r = finite_difference_check(&mut s, &[a], 0.5, |g, s| {
            let v = g.param(s, a);
            Ok(g.sum(v))
        });
        assert!(r.is_err());
    }

    #[test]
    fn composite_affine_gelu_cross_entropy() {
        let mut s = random_store(&[("x", vec![4, 3]), ("w", vec![3, 5]), ("b", vec![5])], 11);
        let ids: Vec<_> = s.ids().collect();
        let (x, w, b) = (ids[0], ids[1], ids[2]);
        let err = finite_difference_check(&mut s, &ids, 1e-5, |g, s| {
            let xv = g.param(s, x);
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let h = g.matmul(xv, wv)?;
            let h = g.add_bias(h, bv)?;
            let h = g.gelu(h);
            let nll = g.nll_rows(h, &[0, 4, 2, 1])?;
            Ok(g.mean(nll))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    // Every differentiable primitive against central differences on inputs
    // drawn from [-2, 2].
    #[test]
    fn every_primitive_matches_finite_differences() {
        let shapes = [
            ("a", vec![3, 4]),
            ("b", vec![4, 2]),
            ("c", vec![3, 4]),
            ("gamma", vec![4]),
            ("beta", vec![4]),
            ("v", vec![4]),
        ];
        for seed in 0..3 {
            let mut s = random_store(&shapes, 100 + seed);
            let ids: Vec<_> = s.ids().collect();
            let [a, b, c, gamma, beta, v] = ids[..] else { unreachable!() };
            let mask = AttentionMask::from_matrix(&[vec![1, 1, 0], vec![1, 1, 1], vec![0, 1, 1]]);
            let err = finite_difference_check(&mut s, &ids, 1e-5, |g, s| {
                let (av, bv, cv) = (g.param(s, a), g.param(s, b), g.param(s, c));
                let (gv, bev, vv) = (g.param(s, gamma), g.param(s, beta), g.param(s, v));
                let mm = g.matmul(av, bv)?;
                let bt = g.matmul_bt(av, cv)?;
                let mv = g.matvec(cv, vv)?;
                let ad = g.add(av, cv)?;
                let ml = g.mul(ad, cv)?;
                let ln = g.layer_norm(ml, gv, bev, 1e-5)?;
                let at = g.attention(ln, av, cv, 2, &mask)?;
                let cc = g.concat_cols(at, mm)?;
                let gr = g.gather_rows(cc, &[2, 0, 2])?;
                let th = g.tanh(gr);
                let sg = g.sigmoid(th);
                let lg = g.log(sg);
                let ex = g.exp(mv);
                let sp = g.softplus(ex);
                let ab = g.add_bias(ad, vv)?;
                let ge = g.gelu(ab);
                let ce = g.nll_rows(bt, &[0, 2, 1])?;
                let parts = [g.sum(lg), g.mean(sp), g.sum(ge), g.sum(ce)];
                let mut total = parts[0];
                for p in &parts[1..] {
                    total = g.add(total, *p)?;
                }
                let sc = g.scale(total, 0.7);
                g.add_const(sc, &[0.25])
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
