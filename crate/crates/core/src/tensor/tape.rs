//! Dynamic tape (Wengert list). Every op appends a node holding its value
//! and whatever the backward rule needs; `backward` walks the list in
//! reverse. Parameters enter as borrowed leaves so building a tape never
//! copies weights.

use std::borrow::Cow;

use super::math::{self, dot};
use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_matrix(rows: &[Vec<u8>]) -> Self {
        let n = rows.len();
        let mut allowed = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "attention mask must be square");
            allowed.extend(r.iter().map(|&v| v != 0));
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Gelu,
    Tanh,
    Exp,
    Log,
    Sigmoid,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
        mask: AttentionMask,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    NllRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// A recorded computation. Borrows the parameter store it reads from.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn t2(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
    Tensor {
        shape,
        values,
        requires_grad: false,
        grad: None,
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn vals(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.values
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// A trainable leaf borrowed from `store`.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf(Some(id)),
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn require_rank2(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_rank2("matmul", a, b)?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        math::matmul_acc(self.vals(a), self.vals(b), &mut out, m, k, n);
        Ok(self.push(t2(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_rank2("matmul_bt", a, b)?;
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        math::matmul_bt_acc(self.vals(a), self.vals(b), &mut out, m, k, n);
        Ok(self.push(t2(vec![m, n], out), Op::MatMulBt(a, b)))
    }

    /// `[m,k] x [k] -> [m]`
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        if self.shape(a).len() != 2 || self.shape(v) != [k] {
            return Err(self.mismatch("matvec", a, v));
        }
        let av = self.vals(a);
        let vv = self.vals(v);
        let out = (0..m).map(|i| dot(&av[i * k..(i + 1) * k], vv)).collect();
        Ok(self.push(t2(vec![m], out), Op::MatVec(a, v)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(t2(shape, out), Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of `[m,n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.shape(bias) != [n] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.vals(bias);
        let out = self
            .vals(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(t2(shape, out), Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(t2(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.vals(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(t2(shape, out), Op::Scale(a, c))
    }

    /// Adds a constant (gradient-free) array of the same length.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if self.vals(a).len() != c.len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.vals(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(t2(shape, out), Op::AddConst(a)))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => math::gelu,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sigmoid => math::sigmoid,
            Unary::Softplus => math::softplus,
        };
        let out = self.vals(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(t2(shape, out), Op::Unary(a, kind))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.shape(gamma) != [n] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.shape(beta) != [n] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = self.vals(x);
        let g = self.vals(gamma);
        let b = self.vals(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            t2(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[L,H]` projections.
    /// Masked pairs are skipped entirely, so a query row never reads a
    /// disallowed key or value.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (l, h) = self.dims(q);
        if self.shape(k) != self.shape(q) {
            return Err(self.mismatch("attention", q, k));
        }
        if self.shape(v) != self.shape(q) {
            return Err(self.mismatch("attention", q, v));
        }
        if mask.len() != l {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: self.shape(q).to_vec(),
                rhs: vec![mask.len(), mask.len()],
            });
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::contract(format!("hidden {h} not divisible by {heads} heads")));
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.vals(q), self.vals(k), self.vals(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * h];
        let mut scores = vec![0.0; l];
        for hd in 0..heads {
            let off = hd * d;
            for i in 0..l {
                let qi = &qv[i * h + off..i * h + off + d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    if mask.allows(i, j) {
                        let s = dot(qi, &kv[j * h + off..j * h + off + d]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                let prow = &mut probs[(hd * l + i) * l..(hd * l + i + 1) * l];
                for j in 0..l {
                    if mask.allows(i, j) {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out[i * h + off..i * h + off + d];
                for j in 0..l {
                    if mask.allows(i, j) {
                        let p = prow[j] / sum;
                        prow[j] = p;
                        let vj = &vv[j * h + off..j * h + off + d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            t2(vec![l, h], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                mask: mask.clone(),
            },
        ))
    }

    /// Selects rows of a 2-D tensor (embedding lookup is this op on a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape(src).to_vec(),
                rhs: vec![bad],
            });
        }
        let sv = self.vals(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        Ok(self.push(t2(vec![idx.len(), n], out), Op::GatherRows(src, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if ma != mb {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&av[i * na..(i + 1) * na]);
            out.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        Ok(self.push(t2(vec![ma, na + nb], out), Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        self.push(t2(vec![1], vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(t2(vec![1], vec![s]), Op::Mean(a))
    }

    /// Per-row negative log-softmax at `targets`: `[m,V] -> [m]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::Shape {
                op: "nll_rows",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let lv = self.vals(logits);
        let mut probs = vec![0.0; m * n];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let lse = math::log_sum_exp(row);
            out[i] = lse - row[targets[i]];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.push(
            t2(vec![m], out),
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut KeyedRng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.vals(a).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let out = self.vals(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(t2(shape, out), Op::Dropout(a, mask))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) -> Result<()> {
        if self.vals(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf(Some(id)) => {
                    let slot = grads.slot(*id, g.len());
                    for (s, x) in slot.iter_mut().zip(&g) {
                        *s += x;
                    }
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (_, n) = self.dims(*b);
                    let mut ga = vec![0.0; m * k];
                    math::matmul_bt_acc(&g, self.vals(*b), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    math::matmul_at_acc(self.vals(*a), &g, &mut gb, m, k, n);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (n, _) = self.dims(*b);
                    // c = a b^T: da = g b, db = g^T a
                    let mut ga = vec![0.0; m * k];
                    math::matmul_acc(&g, self.vals(*b), &mut ga, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    math::matmul_at_acc(&g, self.vals(*a), &mut gb, m, n, k);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatVec(a, v) => {
                    let (m, k) = self.dims(*a);
                    let (av, vv) = (self.vals(*a), self.vals(*v));
                    let mut ga = vec![0.0; m * k];
                    let mut gv = vec![0.0; k];
                    for i in 0..m {
                        let gi = g[i];
                        for p in 0..k {
                            ga[i * k + p] = gi * vv[p];
                            gv[p] += gi * av[i * k + p];
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *v, gv);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddBias(a, b) => {
                    let (_, n) = self.dims(*a);
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.vals(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.vals(*a)).map(|(x, y)| x * y).collect();
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::AddConst(a) => acc(&mut adj, *a, g),
                Op::Unary(a, kind) => {
                    let x = self.vals(*a);
                    let y = &node.value.values;
                    let ga = match kind {
                        Unary::Gelu => g.iter().zip(x).map(|(g, &x)| g * math::gelu_grad(x)).collect(),
                        Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Unary::Softplus => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if *g == 0.0 { 0.0 } else { g * math::sigmoid(x) })
                            .collect(),
                    };
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = self.dims(*x);
                    let gv = self.vals(*gamma);
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let hrow = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                            gbeta[j] += grow[j];
                            dxhat[j] = grow[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hrow[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            gx[i * n + j] = inv_std[i] / nf * (nf * dxhat[j] - sum_d - hrow[j] * sum_dh);
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *gamma, gg);
                    acc(&mut adj, *beta, gbeta);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                    mask,
                } => {
                    let (l, h) = self.dims(*q);
                    let d = h / heads;
                    let scale = 1.0 / (d as f64).sqrt();
                    let (qv, kv, vv) = (self.vals(*q), self.vals(*k), self.vals(*v));
                    let mut gq = vec![0.0; l * h];
                    let mut gk = vec![0.0; l * h];
                    let mut gvv = vec![0.0; l * h];
                    let mut dp = vec![0.0; l];
                    for hd in 0..*heads {
                        let off = hd * d;
                        for i in 0..l {
                            let gi = &g[i * h + off..i * h + off + d];
                            let prow = &probs[(hd * l + i) * l..(hd * l + i + 1) * l];
                            let mut sdp = 0.0;
                            for j in 0..l {
                                if mask.allows(i, j) {
                                    let vj = &vv[j * h + off..j * h + off + d];
                                    dp[j] = dot(gi, vj);
                                    sdp += prow[j] * dp[j];
                                    let gvj = &mut gvv[j * h + off..j * h + off + d];
                                    for (s, x) in gvj.iter_mut().zip(gi) {
                                        *s += prow[j] * x;
                                    }
                                }
                            }
                            for j in 0..l {
                                if mask.allows(i, j) {
                                    let ds = prow[j] * (dp[j] - sdp) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for t in 0..d {
                                        gq[i * h + off + t] += ds * kv[j * h + off + t];
                                        gk[j * h + off + t] += ds * qv[i * h + off + t];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut adj, *q, gq);
                    acc(&mut adj, *k, gk);
                    acc(&mut adj, *v, gvv);
                }
                Op::GatherRows(src, idx) => {
                    let (m, n) = self.dims(*src);
                    let mut gs = vec![0.0; m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for (s, x) in gs[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *s += x;
                        }
                    }
                    acc(&mut adj, *src, gs);
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.dims(*a);
                    let (_, nb) = self.dims(*b);
                    let mut ga = Vec::with_capacity(m * na);
                    let mut gb = Vec::with_capacity(m * nb);
                    for row in g.chunks(na + nb) {
                        ga.extend_from_slice(&row[..na]);
                        gb.extend_from_slice(&row[na..]);
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sum(a) => {
                    let n = self.vals(*a).len();
                    acc(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.vals(*a).len();
                    acc(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::NllRows { logits, targets, probs } => {
                    let (m, n) = self.dims(*logits);
                    let mut gl = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gl[i * n + j] = g[i] * probs[i * n + j];
                        }
                        gl[i * n + targets[i]] -= g[i];
                    }
                    acc(&mut adj, *logits, gl);
                }
                Op::Dropout(a, mask) => {
                    acc(&mut adj, *a, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
        }
        Ok(())
    }

    /// Backward into the store's own gradient slots. Repeated calls
    /// accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let mut grads = Grads::for_store(store);
        self.backward_into(loss, &mut grads)?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{KeyedRng, Stream};

    fn store_with(name: &str, shape: &[usize], values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, Tensor::new(shape.to_vec(), values).unwrap(), true);
        (s, id)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Tape::new();
        let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).values(), &[1.0, 2.0, 3.0, 4.0]);
        let col = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
        let out = g.matmul(m, col).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).values(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Tape::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let (mut s, p) = store_with("p", &[3], vec![0.5, -1.0, 2.0]);
        for _ in 0..2 {
            let snapshot = s.clone();
            let mut g = Tape::new();
            let pv = g.param(&snapshot, p);
            let loss = g.sum(pv);
            g.backward(loss, &mut s).unwrap();
        }
        assert_eq!(s.grad(p), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let (s, p) = store_with("p", &[3], vec![1.0, 2.0, 3.0]);
        let mut g = Tape::new();
        let pv = g.param(&s, p);
        let z = g.scale(pv, 0.0);
        let loss = g.sum(z);
        let mut grads = Grads::for_store(&s);
        g.backward_into(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (s, p) = store_with("p", &[3], vec![1.0, 2.0, 3.0]);
        let mut g = Tape::new();
        let pv = g.param(&s, p);
        let mut grads = Grads::for_store(&s);
        assert!(matches!(g.backward_into(pv, &mut grads), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_attention_row_ignores_future() {
        let mut rng = KeyedRng::new(1, Stream::Init);
        let mk = |rng: &mut KeyedRng| {
            let v: Vec<f64> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
            Tensor::new(vec![3, 4], v).unwrap()
        };
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let mask = AttentionMask::from_matrix(&[vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
        let run = |k: Tensor, v: Tensor| {
            let mut g = Tape::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
            let o = g.attention(qv, kv, vv, 2, &mask).unwrap();
            g.value(o).clone()
        };
        let base = run(k.clone(), v.clone());
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..4 {
            k2.values_mut()[2 * 4 + j] += 10.0;
            v2.values_mut()[2 * 4 + j] -= 5.0;
        }
        let pert = run(k2, v2);
        assert_eq!(&base.values()[..8], &pert.values()[..8]);
        assert_ne!(&base.values()[8..], &pert.values()[8..]);
    }
}
