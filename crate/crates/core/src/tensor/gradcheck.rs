use rand::Rng;

use super::{Graph, Mode, Tensor, Var};
use crate::error::{CaupsiError, Result};
use crate::rng::{self, Prng};

fn eval_at<Func>(f: &Func, x: &Tensor<f64>, mode: Mode) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(CaupsiError::Contract("grad_check needs a scalar function".into()));
    }
    Ok(g.value(out).item())
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient<Func>(f: &Func, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    numeric_gradient_in(Mode::Eval, f, x, h)
}

fn numeric_gradient_in<Func>(mode: Mode, f: &Func, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_at(f, &probe, mode)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_at(f, &probe, mode)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over the coordinates of `x`.
pub fn grad_check<Func>(f: Func, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_in(Mode::Eval, f, x, h)
}

/// [`grad_check`] on graphs built in `mode`; a train-mode seed fixes dropout masks
/// across all evaluations.
pub fn grad_check_in<Func>(mode: Mode, f: Func, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(CaupsiError::Config(format!("grad_check step {h} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new(mode);
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = numeric_gradient_in(mode, &f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Outcome of checking one op over several random shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: usize,
    pub max_error: f64,
}

fn uniform(r: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(lo..hi)).collect::<Vec<_>>();
    Tensor::from_f64(shape.to_vec(), &data).expect("consistent shape")
}

/// Random magnitudes in `[0.1, 1)` with random sign, away from kinks at zero.
fn off_zero(r: &mut Prng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(r, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if r.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Contracts `y` with fixed irregular weights so every output coordinate matters.
fn probe_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.618_034 + 0.3).fract() - 0.5) * 2.0).collect();
    let w = g.constant(Tensor::from_f64(shape, &w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn dims(r: &mut Prng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| r.gen_range(1..=5)).collect()
}

/// Central-difference check of every differentiable graph op, in 64-bit, over
/// `shapes` random shapes each. Binary ops are checked with respect to every operand.
pub fn op_suite(seed: u64, shapes: usize, h: f64) -> Result<Vec<OpCheck>> {
    let mut r = rng::named(seed, "gradcheck.suite");
    let mut out: Vec<OpCheck> = Vec::new();
    let mut record = |op: &'static str, e: f64| match out.iter_mut().find(|c| c.op == op) {
        Some(c) => {
            c.shapes += 1;
            c.max_error = c.max_error.max(e);
        }
        None => out.push(OpCheck { op, shapes: 1, max_error: e }),
    };
    for _ in 0..shapes {
        let d = dims(&mut r, 3);
        let (m, k, n) = (d[0], d[1], d[2]);
        let a = uniform(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, n], -1.0, 1.0);
        let bc = b.clone();
        record("matmul", grad_check(|g, x| { let y = g.constant(bc.clone()); let o = g.matmul(x, y)?; probe_sum(g, o) }, &a, h)?);
        let ac = a.clone();
        record("matmul", grad_check(|g, x| { let y = g.constant(ac.clone()); let o = g.matmul(y, x)?; probe_sum(g, o) }, &b, h)?);

        let gr = r.gen_range(1..=3);
        for transpose_b in [false, true] {
            let a3 = uniform(&mut r, &[gr, m, k], -1.0, 1.0);
            let b3 = if transpose_b { uniform(&mut r, &[gr, n, k], -1.0, 1.0) } else { uniform(&mut r, &[gr, k, n], -1.0, 1.0) };
            let (ac, bc) = (a3.clone(), b3.clone());
            record("bmm", grad_check(|g, x| { let y = g.constant(bc.clone()); let o = g.bmm(x, y, transpose_b)?; probe_sum(g, o) }, &a3, h)?);
            record("bmm", grad_check(|g, x| { let y = g.constant(ac.clone()); let o = g.bmm(y, x, transpose_b)?; probe_sum(g, o) }, &b3, h)?);
        }

        let full = dims(&mut r, 3);
        let suffix = full[1..].to_vec();
        let x = uniform(&mut r, &full, -1.0, 1.0);
        for other_shape in [full.clone(), suffix.clone()] {
            let y = uniform(&mut r, &other_shape, -1.0, 1.0);
            type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
            let ops: [(&'static str, Bin); 3] = [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b))];
            for (name, op) in ops {
                let (xc, yc) = (x.clone(), y.clone());
                record(name, grad_check(|g, v| { let c = g.constant(yc.clone()); let o = op(g, v, c)?; probe_sum(g, o) }, &x, h)?);
                record(name, grad_check(|g, v| { let c = g.constant(xc.clone()); let o = op(g, c, v)?; probe_sum(g, o) }, &y, h)?);
            }
        }

        let s = r.gen_range(-2.0..2.0);
        record("scale", grad_check(|g, v| { let o = g.scale(v, s); probe_sum(g, o) }, &x, h)?);
        let kinked = off_zero(&mut r, &full);
        record("relu", grad_check(|g, v| { let o = g.relu(v); probe_sum(g, o) }, &kinked, h)?);
        let wide = uniform(&mut r, &full, -3.0, 3.0);
        record("tanh", grad_check(|g, v| { let o = g.tanh(v); probe_sum(g, o) }, &wide, h)?);
        record("sigmoid", grad_check(|g, v| { let o = g.sigmoid(v); probe_sum(g, o) }, &wide, h)?);
        let pos = uniform(&mut r, &full, 0.5, 2.0);
        record("log", grad_check(|g, v| { let o = g.log(v, 1e-12); probe_sum(g, o) }, &pos, h)?);
        let dseed: u64 = r.gen();
        record(
            "dropout",
            grad_check_in(Mode::Train { seed: dseed }, |g, v| { let o = g.dropout(v, 0.3)?; probe_sum(g, o) }, &x, h)?,
        );

        let lead = full[..2].to_vec();
        let w2 = r.gen_range(1..=4);
        let mut other = lead.clone();
        other.push(w2);
        let side = uniform(&mut r, &other, -1.0, 1.0);
        let sc = side.clone();
        record("concat", grad_check(|g, v| { let c = g.constant(sc.clone()); let o = g.concat(&[c, v, c])?; probe_sum(g, o) }, &x, h)?);
        let last = full[2];
        let start = r.gen_range(0..last);
        let len = r.gen_range(1..=last - start);
        record("slice", grad_check(|g, v| { let o = g.slice(v, start, len)?; probe_sum(g, o) }, &x, h)?);
        let flat: usize = full.iter().product();
        record("reshape", grad_check(|g, v| { let o = g.reshape(v, vec![flat])?; probe_sum(g, o) }, &x, h)?);
        for axis in 0..3 {
            record("mean", grad_check(|g, v| { let o = g.mean(v, axis)?; probe_sum(g, o) }, &x, h)?);
        }
        record("sum", grad_check(|g, v| { let o = g.sum(v); let o = g.mul(o, o)?; probe_sum(g, o) }, &x, h)?);
        record("softmax", grad_check(|g, v| { let o = g.softmax(v)?; probe_sum(g, o) }, &wide, h)?);

        let feat = r.gen_range(2..=6);
        let mut ln_shape = lead.clone();
        ln_shape.push(feat);
        let lx = uniform(&mut r, &ln_shape, -2.0, 2.0);
        let gamma = uniform(&mut r, &[feat], 0.5, 1.5);
        let beta = uniform(&mut r, &[feat], -0.5, 0.5);
        let (gc, bc, xc) = (gamma.clone(), beta.clone(), lx.clone());
        record("layer_norm", grad_check(|g, v| { let ga = g.constant(gc.clone()); let be = g.constant(bc.clone()); let o = g.layer_norm(v, ga, be, 1e-5)?; probe_sum(g, o) }, &lx, h)?);
        record("layer_norm", grad_check(|g, v| { let xx = g.constant(xc.clone()); let be = g.constant(bc.clone()); let o = g.layer_norm(xx, v, be, 1e-5)?; probe_sum(g, o) }, &gamma, h)?);
        record("layer_norm", grad_check(|g, v| { let xx = g.constant(xc.clone()); let ga = g.constant(gc.clone()); let o = g.layer_norm(xx, ga, v, 1e-5)?; probe_sum(g, o) }, &beta, h)?);
    }
    Ok(out)
}
