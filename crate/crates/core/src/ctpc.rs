//! Psychological conditioning signal: a bounded vector estimated from face and
//! body features through structurally separate pathways, trained only by the
//! task losses.

use crate::chain::Task;
use crate::error::{CaupsiError, Result};
use crate::nn::{add_linear, linear, Bindings, Init, MlpSpec, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

pub const PREFIX: &str = "ctpc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtpcSpec {
    pub d_f: usize,
    pub d_psi: usize,
    pub ln_eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PsiOut {
    pub psi: Var,
    pub affect: Var,
    pub action: Var,
}

impl CtpcSpec {
    pub fn new(d_f: usize, d_psi: usize) -> Self {
        CtpcSpec { d_f, d_psi, ln_eps: 1e-5 }
    }

    fn pathway(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.d_f, 2 * self.d_psi, self.d_psi, 0.0)
    }

    pub fn param_count(&self) -> usize {
        let mlp = 2 * (self.d_f * 2 * self.d_psi + 2 * self.d_psi + 2 * self.d_psi * self.d_psi + self.d_psi);
        mlp + 2 * self.d_psi * self.d_psi + self.d_psi + 2 * self.d_psi
    }

    pub fn add_params<F: Scalar>(&self, store: &mut ParamStore<F>, seed: u64) -> Result<()> {
        let mlp = self.pathway()?;
        mlp.add_params(store, &format!("{PREFIX}.affect"), seed)?;
        mlp.add_params(store, &format!("{PREFIX}.action"), seed)?;
        add_linear(store, &format!("{PREFIX}.fuse"), 2 * self.d_psi, self.d_psi, true, seed)?;
        store.add(&format!("{PREFIX}.ln.gamma"), &[self.d_psi], Init::Constant(1.0), true, seed)?;
        store.add(&format!("{PREFIX}.ln.beta"), &[self.d_psi], Init::Constant(0.0), true, seed)
    }

    /// `psi = tanh(LN(W_psi [affect(f_face); action(f_body)] + b_psi))`.
    pub fn compute_psi<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, f_face: Var, f_body: Var) -> Result<PsiOut> {
        let mlp = self.pathway()?;
        let affect = mlp.forward(g, p, &format!("{PREFIX}.affect"), f_face)?;
        let action = mlp.forward(g, p, &format!("{PREFIX}.action"), f_body)?;
        let cat = g.concat(&[affect, action])?;
        let pre = linear(g, p, &format!("{PREFIX}.fuse"), cat)?;
        let gamma = p.get(&format!("{PREFIX}.ln.gamma"))?;
        let beta = p.get(&format!("{PREFIX}.ln.beta"))?;
        let normed = g.layer_norm(pre, gamma, beta, F::lit(self.ln_eps))?;
        let psi = g.tanh(normed);
        Ok(PsiOut { psi, affect, action })
    }
}

/// Mean psi per class for one task; `None` for classes with no samples.
pub type ClassMeans = Vec<Option<Vec<f64>>>;

/// Groups `psi` rows (`n x d`, row-major) by each task's labels.
pub fn psi_class_means(psi: &[f64], dim: usize, labels: &[[usize; 4]]) -> Result<[ClassMeans; 4]> {
    if dim == 0 || psi.len() != labels.len() * dim {
        return Err(CaupsiError::Shape(format!(
            "psi buffer of {} values for {} samples of width {dim}",
            psi.len(),
            labels.len()
        )));
    }
    let per_task = |ti: usize| -> Result<ClassMeans> {
        let task = Task::ALL[ti];
        let c = task.num_classes();
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (row, lab) in psi.chunks(dim).zip(labels) {
            let y = lab[ti];
            if y >= c {
                return Err(CaupsiError::Data(format!("{} label {y} out of range", task.name())));
            }
            counts[y] += 1;
            sums[y].iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect())
    };
    Ok([per_task(0)?, per_task(1)?, per_task(2)?, per_task(3)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rnd(r: &mut impl Rng, shape: [usize; 2], scale: f64) -> Tensor<f64> {
        Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_psi() {
        let spec = CtpcSpec::new(8, 4);
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, 0).unwrap();
        for (path, p) in s.iter_mut() {
            if !path.ends_with("gamma") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(0);
        let mut g = Graph::eval();
        let b = s.bind(&mut g);
        let ff = g.constant(rnd(&mut r, [3, 8], 1.0));
        let fb = g.constant(rnd(&mut r, [3, 8], 1.0));
        let out = spec.compute_psi(&mut g, &b, ff, fb).unwrap();
        assert!(g.data(out.psi).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_bounded_even_with_huge_weights() {
        let spec = CtpcSpec::new(16, 16);
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, 1).unwrap();
        for (_, p) in s.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= 100.0);
        }
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(1);
        let mut g = Graph::eval();
        let b = s.bind(&mut g);
        let ff = g.constant(rnd(&mut r, [1000, 16], 5.0));
        let fb = g.constant(rnd(&mut r, [1000, 16], 5.0));
        let out = spec.compute_psi(&mut g, &b, ff, fb).unwrap();
        assert!(g.data(out.psi).iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn pathways_are_separated() {
        let spec = CtpcSpec::new(8, 4);
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, 2).unwrap();
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(2);
        let face = rnd(&mut r, [2, 8], 1.0);
        let body = rnd(&mut r, [2, 8], 1.0);
        let run = |f: Tensor<f64>, bd: Tensor<f64>| {
            let mut g = Graph::eval();
            let b = s.bind(&mut g);
            let ff = g.constant(f);
            let fb = g.constant(bd);
            let o = spec.compute_psi(&mut g, &b, ff, fb).unwrap();
            (g.data(o.affect).to_vec(), g.data(o.action).to_vec())
        };
        let (a0, r0) = run(face.clone(), body.clone());
        let (a1, r1) = run(face.clone(), Tensor::zeros([2, 8]));
        assert_eq!(a0, a1);
        assert_ne!(r0, r1);
        let (a2, r2) = run(Tensor::zeros([2, 8]), body);
        assert_eq!(r0, r2);
        assert_ne!(a0, a2);
    }

    #[test]
    fn class_means_match_group_by() {
        let labels = vec![[0, 1, 2, 3], [0, 1, 4, 6], [2, 0, 2, 3]];
        let psi = vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6];
        let m = psi_class_means(&psi, 2, &labels).unwrap();
        assert_eq!(m[0][0], Some(vec![0.2, 0.30000000000000004]));
        assert_eq!(m[0][1], None);
        assert_eq!(m[0][2], Some(vec![-0.5, 0.6]));
        // every sample in one class: row equals the batch mean
        let mean: Vec<f64> = (0..2).map(|j| psi.iter().skip(j).step_by(2).sum::<f64>() / 3.0).collect();
        let same = vec![[1, 1, 1, 1]; 3];
        let m = psi_class_means(&psi, 2, &same).unwrap();
        for (a, b) in m[3][1].as_ref().unwrap().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(psi_class_means(&psi, 4, &labels).is_err());
    }
}
