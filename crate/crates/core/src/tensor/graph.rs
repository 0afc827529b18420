use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{gemm, Scalar, Tensor};
use crate::error::{CaupsiError, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks drawn from a stream seeded with `seed`.
    Train { seed: u64 },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Mean { x: Var, axis: usize },
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log { x: Var, floor: F },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout { x: Var, mask: Vec<F> },
    Grl { x: Var, lambda: F },
}

impl<F> Op<F> {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Mean { x, .. }
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Log { x, .. }
            | Op::Dropout { x, .. }
            | Op::Grl { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so the
/// node list is already a topological order and backward walks it in reverse.
#[derive(Debug)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    rng: Xoshiro256PlusPlus,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(CaupsiError::Shape(msg))
}

/// `b` broadcasts into `a` when its shape is a trailing suffix of `a`'s.
fn check_broadcast(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        shape_err(format!("{op}: cannot broadcast {b:?} into {a:?}"))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<F: Scalar> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        let seed = match mode {
            Mode::Eval => 0,
            Mode::Train { seed } => seed,
        };
        Graph {
            nodes: Vec::new(),
            mode,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train { seed })
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other
                .operands()
                .iter()
                .any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are collected iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Clears every gradient slot, leaves included.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return shape_err(format!("matmul: {sa:?} x {sb:?}")),
        };
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, F::zero(), &mut out);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product over a leading group axis: `[G,m,k] x [G,k,n] -> [G,m,n]`.
    /// With `transpose_b`, `b` is `[G,n,k]` and is used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([g, m, k], [g2, k2, n]) if g == g2 && !transpose_b && k == k2 => (*g, *m, *k, *n),
            ([g, m, k], [g2, n, k2]) if g == g2 && transpose_b && k == k2 => (*g, *m, *k, *n),
            _ => return shape_err(format!("bmm: {sa:?} x {sb:?} (transpose_b={transpose_b})")),
        };
        let mut out = vec![F::zero(); g * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(Tensor::new([g, m, n], out)?, Op::Bmm { a, b, transpose_b }))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        check_broadcast(self.shape(a), self.shape(b), name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.numel();
        let bd = bv.data();
        let out: Vec<F> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    /// `a + b`, with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product, same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, s))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |e| if e > F::zero() { e } else { F::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, |e| e.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, |e| {
            if e >= F::zero() {
                F::one() / (F::one() + (-e).exp())
            } else {
                let z = e.exp();
                z / (F::one() + z)
            }
        });
        self.push(t, Op::Sigmoid(x))
    }

    /// Natural log; inputs below `floor` are clamped (and pass no gradient).
    pub fn log(&mut self, x: Var, floor: F) -> Var {
        let t = self.unary(x, |e| e.max(floor).ln());
        self.push(t, Op::Log { x, floor })
    }

    // ---- structural -------------------------------------------------------

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CaupsiError::Shape("concat of nothing".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return shape_err(format!("concat: leading axes {lead:?} vs {s:?}"));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec())))
    }

    /// `x[..., start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = last_dim(&s);
        if s.is_empty() || len == 0 || start + len > w {
            return shape_err(format!("slice {start}..{} of {s:?}", start + len));
        }
        let rows = self.value(x).numel() / w;
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let mut t = t.reshaped(shape)?;
        t.zero_grad();
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err(format!("mean over axis {axis} of {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.data(x);
        let inv = F::one() / F::lit(len as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    // ---- normalisation & probability --------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.all_finite() {
            return Err(CaupsiError::Numeric("softmax input is not finite".into()));
        }
        let w = last_dim(v.shape());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Layer norm over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = last_dim(&s);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err(format!(
                "layer_norm: x {s:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= F::zero() {
            return Err(CaupsiError::Contract("layer_norm eps must be positive".into()));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let nf = F::lit(n as f64);
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: identity in eval mode, or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CaupsiError::Config(format!("dropout p={p} outside [0,1)")));
        }
        if !self.is_train() || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() >= p {
                    keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: F) -> Var {
        let mut t = self.value(x).clone();
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Grl { x, lambda })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`];
    /// intermediate gradients are recomputed on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CaupsiError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.value.zero_grad();
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            propagate(before, &rest[0], &g);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }
}

fn acc<F: Scalar>(nodes: &mut [Node<F>], v: Var, delta: &[F]) {
    let n = &mut nodes[v.0];
    if n.needs_grad {
        n.value.accumulate_grad(delta);
    }
}

fn wants<F: Scalar>(nodes: &[Node<F>], v: Var) -> bool {
    nodes[v.0].needs_grad
}

/// Pushes `g` (gradient of the node's output) into its operands.
fn propagate<F: Scalar>(nodes: &mut [Node<F>], node: &Node<F>, g: &[F]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if wants(nodes, *a) {
                let mut da = vec![F::zero(); m * k];
                gemm(m, n, k, g, false, nodes[b.0].value.data(), true, F::zero(), &mut da);
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let mut db = vec![F::zero(); k * n];
                gemm(k, m, n, nodes[a.0].value.data(), true, g, false, F::zero(), &mut db);
                acc(nodes, *b, &db);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let sa = nodes[a.0].value.shape().to_vec();
            let (gr, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.value.shape()[2];
            if wants(nodes, *a) {
                let bd = nodes[b.0].value.data();
                let mut da = vec![F::zero(); gr * m * k];
                for i in 0..gr {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        !transpose_b,
                        F::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let ad = nodes[a.0].value.data();
                let mut db = vec![F::zero(); gr * k * n];
                for i in 0..gr {
                    let (ga, aa) = (&g[i * m * n..(i + 1) * m * n], &ad[i * m * k..(i + 1) * m * k]);
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        gemm(n, m, k, ga, true, aa, false, F::zero(), dst);
                    } else {
                        gemm(k, m, n, aa, true, ga, false, F::zero(), dst);
                    }
                }
                acc(nodes, *b, &db);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            acc(nodes, *a, g);
            if wants(nodes, *b) {
                let nb = nodes[b.0].value.numel();
                let mut db = vec![F::zero(); nb];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % nb] += gi;
                }
                if neg {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                acc(nodes, *b, &db);
            }
        }
        Op::Mul(a, b) => {
            let nb = nodes[b.0].value.numel();
            let da: Option<Vec<F>> = wants(nodes, *a).then(|| {
                let bd = nodes[b.0].value.data();
                g.iter().enumerate().map(|(i, &gi)| gi * bd[i % nb]).collect()
            });
            let db: Option<Vec<F>> = wants(nodes, *b).then(|| {
                let ad = nodes[a.0].value.data();
                let mut db = vec![F::zero(); nb];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % nb] += gi * ad[i];
                }
                db
            });
            if let Some(da) = da {
                acc(nodes, *a, &da);
            }
            if let Some(db) = db {
                acc(nodes, *b, &db);
            }
        }
        Op::Scale(x, s) => {
            let d: Vec<F> = g.iter().map(|&e| e * *s).collect();
            acc(nodes, *x, &d);
        }
        Op::Concat(parts) => {
            let total = *node.value.shape().last().unwrap();
            let rows = g.len() / total;
            let mut offset = 0;
            for p in parts {
                let w = *nodes[p.0].value.shape().last().unwrap();
                if wants(nodes, *p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(nodes, *p, &d);
                }
                offset += w;
            }
        }
        Op::Slice { x, start } => {
            let w = *nodes[x.0].value.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            let rows = g.len() / len;
            let mut d = vec![F::zero(); rows * w];
            for r in 0..rows {
                d[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            acc(nodes, *x, &d);
        }
        Op::Reshape(x) => acc(nodes, *x, g),
        Op::Mean { x, axis } => {
            let s = nodes[x.0].value.shape().to_vec();
            let outer: usize = s[..*axis].iter().product();
            let len = s[*axis];
            let inner: usize = s[axis + 1..].iter().product();
            let inv = F::one() / F::lit(len as f64);
            let mut d = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        d[(o * len + a) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            acc(nodes, *x, &d);
        }
        Op::Sum(x) => {
            let d = vec![g[0]; nodes[x.0].value.numel()];
            acc(nodes, *x, &d);
        }
        Op::Relu(x) => {
            let xd = nodes[x.0].value.data();
            let d: Vec<F> = g
                .iter()
                .zip(xd)
                .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                .collect();
            acc(nodes, *x, &d);
        }
        Op::Tanh(x) => {
            let d: Vec<F> = g
                .iter()
                .zip(out)
                .map(|(&gi, &y)| gi * (F::one() - y * y))
                .collect();
            acc(nodes, *x, &d);
        }
        Op::Sigmoid(x) => {
            let d: Vec<F> = g
                .iter()
                .zip(out)
                .map(|(&gi, &y)| gi * y * (F::one() - y))
                .collect();
            acc(nodes, *x, &d);
        }
        Op::Softmax(x) => {
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut d = vec![F::zero(); g.len()];
            for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..w {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(nodes, *x, &d);
        }
        Op::Log { x, floor } => {
            let xd = nodes[x.0].value.data();
            let d: Vec<F> = g
                .iter()
                .zip(xd)
                .map(|(&gi, &xi)| if xi > *floor { gi / xi } else { F::zero() })
                .collect();
            acc(nodes, *x, &d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = nodes[gamma.0].value.numel();
            let rows = g.len() / n;
            let nf = F::lit(n as f64);
            if wants(nodes, *x) {
                let gd = nodes[gamma.0].value.data();
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..n {
                        let dh = gr[j] * gd[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for j in 0..n {
                        let dh = gr[j] * gd[j];
                        dx[r * n + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                    }
                }
                acc(nodes, *x, &dx);
            }
            let mut dg = vec![F::zero(); n];
            let mut db = vec![F::zero(); n];
            for r in 0..rows {
                for j in 0..n {
                    dg[j] += g[r * n + j] * xhat[r * n + j];
                    db[j] += g[r * n + j];
                }
            }
            acc(nodes, *gamma, &dg);
            acc(nodes, *beta, &db);
        }
        Op::Dropout { x, mask } => {
            let d: Vec<F> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
            acc(nodes, *x, &d);
        }
        Op::Grl { x, lambda } => {
            let d: Vec<F> = g.iter().map(|&e| -*lambda * e).collect();
            acc(nodes, *x, &d);
        }
    }
}
