use super::layers::{add_linear, linear};
use super::params::{Bindings, ParamStore};
use crate::error::{CaupsiError, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Registers q/k/v/out projections (`d_model -> d_model`, with biases) under `prefix`.
pub fn add_mha_params<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d_model: usize, seed: u64) -> Result<()> {
    for name in ["q", "k", "v", "out"] {
        add_linear(store, &format!("{prefix}.{name}"), d_model, d_model, true, seed)?;
    }
    Ok(())
}

pub fn mha_param_count(d_model: usize) -> usize {
    4 * (d_model * d_model + d_model)
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    /// `[batch * t_q, d_model]`
    pub out: Var,
    /// Per head, `[batch, t_q, t_kv]` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention.
///
/// `q_tokens` is `[batch * t_q, d]` and `kv_tokens` is `[batch * t_kv, d]`,
/// grouped by sample. Each head attends with scale `1/sqrt(d / heads)`.
pub fn mha<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bindings,
    prefix: &str,
    q_tokens: Var,
    kv_tokens: Var,
    batch: usize,
    heads: usize,
) -> Result<MhaOutput> {
    let (rq, d) = match g.shape(q_tokens) {
        [r, d] => (*r, *d),
        s => return Err(CaupsiError::Shape(format!("{prefix}: query tokens {s:?}"))),
    };
    let rkv = match g.shape(kv_tokens) {
        [r, d2] if *d2 == d => *r,
        s => return Err(CaupsiError::Shape(format!("{prefix}: key/value tokens {s:?} vs width {d}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(CaupsiError::Config(format!("{d} not divisible by {heads} heads")));
    }
    if batch == 0 || rq % batch != 0 || rkv % batch != 0 {
        return Err(CaupsiError::Shape(format!("{prefix}: {rq}/{rkv} rows for batch {batch}")));
    }
    let (tq, tkv, dh) = (rq / batch, rkv / batch, d / heads);

    let q = linear(g, p, &format!("{prefix}.q"), q_tokens)?;
    let k = linear(g, p, &format!("{prefix}.k"), kv_tokens)?;
    let v = linear(g, p, &format!("{prefix}.v"), kv_tokens)?;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, h * dh, dh)?;
        let qh = g.reshape(qh, [batch, tq, dh])?;
        let kh = g.slice(k, h * dh, dh)?;
        let kh = g.reshape(kh, [batch, tkv, dh])?;
        let vh = g.slice(v, h * dh, dh)?;
        let vh = g.reshape(vh, [batch, tkv, dh])?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, scale);
        let att = g.softmax(scores)?;
        let oh = g.bmm(att, vh, false)?;
        outs.push(g.reshape(oh, [batch * tq, dh])?);
        weights.push(att);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    let out = linear(g, p, &format!("{prefix}.out"), merged)?;
    Ok(MhaOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut rand_xoshiro::Xoshiro256PlusPlus, shape: [usize; 2]) -> Tensor<f64> {
        let n = shape[0] * shape[1];
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight per-head loop over plain arrays.
    fn naive_mha(
        s: &ParamStore<f64>,
        q: &Tensor<f64>,
        kv: &Tensor<f64>,
        batch: usize,
        heads: usize,
    ) -> Vec<f64> {
        let d = q.shape()[1];
        let (tq, tkv, dh) = (q.shape()[0] / batch, kv.shape()[0] / batch, d / heads);
        let proj = |x: &[f64], name: &str| -> Vec<f64> {
            let w = s.get(&format!("m.{name}.weight")).unwrap().data();
            let b = s.get(&format!("m.{name}.bias")).unwrap().data();
            (0..d)
                .map(|o| b[o] + (0..d).map(|i| x[i] * w[i * d + o]).sum::<f64>())
                .collect()
        };
        let mut out = Vec::new();
        for bi in 0..batch {
            let qs: Vec<Vec<f64>> = (0..tq)
                .map(|t| proj(&q.data()[(bi * tq + t) * d..(bi * tq + t + 1) * d], "q"))
                .collect();
            let ks: Vec<Vec<f64>> = (0..tkv)
                .map(|t| proj(&kv.data()[(bi * tkv + t) * d..(bi * tkv + t + 1) * d], "k"))
                .collect();
            let vs: Vec<Vec<f64>> = (0..tkv)
                .map(|t| proj(&kv.data()[(bi * tkv + t) * d..(bi * tkv + t + 1) * d], "v"))
                .collect();
            for qt in &qs {
                let mut merged = vec![0.0; d];
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let sc: Vec<f64> = ks
                        .iter()
                        .map(|kt| {
                            r.clone().map(|j| qt[j] * kt[j]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (a, vt) in e.iter().zip(&vs) {
                        for j in r.clone() {
                            merged[j] += a / z * vt[j];
                        }
                    }
                }
                out.extend(proj(&merged, "out"));
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(42);
        for trial in 0..6 {
            let heads = [1, 2, 4][trial % 3];
            let d = heads * (2 + trial % 3);
            let batch = 1 + trial % 2;
            let tq = 1 + (trial * 3) % 8;
            let tkv = 1 + (trial * 5) % 8;
            let mut s = ParamStore::<f64>::new();
            add_mha_params(&mut s, "m", d, trial as u64).unwrap();
            for (_, p) in s.iter_mut() {
                for v in p.tensor.data_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
            let q = rand_tensor(&mut rng, [batch * tq, d]);
            let kv = rand_tensor(&mut rng, [batch * tkv, d]);
            let mut g = Graph::eval();
            let b = s.bind(&mut g);
            let qv = g.constant(q.clone());
            let kvv = g.constant(kv.clone());
            let res = mha(&mut g, &b, "m", qv, kvv, batch, heads).unwrap();
            let want = naive_mha(&s, &q, &kv, batch, heads);
            for (a, w) in g.data(res.out).iter().zip(&want) {
                assert!((a - w).abs() < 1e-6, "trial {trial}: {a} vs {w}");
            }
            for wv in res.weights {
                for row in g.data(wv).chunks(tkv) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_key_ignores_query_values() {
        let mut s = ParamStore::<f64>::new();
        add_mha_params(&mut s, "m", 8, 3).unwrap();
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(1);
        let kv = rand_tensor(&mut rng, [1, 8]);
        let run = |q: Tensor<f64>| {
            let mut g = Graph::eval();
            let b = s.bind(&mut g);
            let qv = g.constant(q);
            let kvv = g.constant(kv.clone());
            let r = mha(&mut g, &b, "m", qv, kvv, 1, 4).unwrap();
            for w in &r.weights {
                assert_eq!(g.data(*w), &[1.0]);
            }
            g.data(r.out).to_vec()
        };
        let a = run(rand_tensor(&mut rng, [1, 8]));
        let b = run(rand_tensor(&mut rng, [1, 8]));
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut s = ParamStore::<f32>::new();
        add_mha_params(&mut s, "m", 6, 0).unwrap();
        let mut g = Graph::eval();
        let b = s.bind(&mut g);
        let q = g.constant(Tensor::zeros([1, 6]));
        let r = mha(&mut g, &b, "m", q, q, 1, 4);
        assert!(matches!(r, Err(CaupsiError::Config(_))));
    }
}
