use super::params::{Bindings, Init, ParamStore};
use crate::error::{CaupsiError, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Registers `{path}.weight` (`[in, out]`) and optionally `{path}.bias`.
pub fn add_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    path: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    seed: u64,
) -> Result<()> {
    store.add(&format!("{path}.weight"), &[in_dim, out_dim], Init::XavierUniform, true, seed)?;
    if bias {
        store.add(&format!("{path}.bias"), &[out_dim], Init::Constant(0.0), true, seed)?;
    }
    Ok(())
}

/// `x · W (+ b)` for `x` of shape `[rows, in]`.
pub fn linear<F: Scalar>(g: &mut Graph<F>, p: &Bindings, path: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{path}.weight"))?;
    let y = g.matmul(x, w)?;
    match p.get_opt(&format!("{path}.bias")) {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub dropout_p: f64,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, dropout_p: f64) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(CaupsiError::Config(format!(
                "mlp dims must be positive: {in_dim}->{hidden_dim}->{out_dim}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(CaupsiError::Config(format!("dropout p={dropout_p} outside [0,1)")));
        }
        Ok(MlpSpec {
            in_dim,
            hidden_dim,
            out_dim,
            dropout_p,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.out_dim + self.out_dim
    }

    pub fn add_params<F: Scalar>(&self, store: &mut ParamStore<F>, prefix: &str, seed: u64) -> Result<()> {
        add_linear(store, &format!("{prefix}.fc1"), self.in_dim, self.hidden_dim, true, seed)?;
        add_linear(store, &format!("{prefix}.fc2"), self.hidden_dim, self.out_dim, true, seed)
    }

    /// Linear → ReLU → Dropout (train graphs only) → Linear.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
        match g.shape(x).last() {
            Some(&d) if d == self.in_dim => {}
            _ => {
                return Err(CaupsiError::Shape(format!(
                    "{prefix}: expected input width {}, got {:?}",
                    self.in_dim,
                    g.shape(x)
                )))
            }
        }
        let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout_p)?;
        linear(g, p, &format!("{prefix}.fc2"), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(4, 6, 3, 0.1).unwrap();
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, "m", 0).unwrap();
        for (_, p) in s.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::train(1);
        let b = s.bind(&mut g);
        let x = g.constant(Tensor::from_f64([2, 4], &[1., 2., 3., 4., -1., -2., -3., -4.]).unwrap());
        let y = spec.forward(&mut g, &b, "m", x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic() {
        let spec = MlpSpec::new(5, 8, 2, 0.5).unwrap();
        let mut s = ParamStore::<f32>::new();
        spec.add_params(&mut s, "m", 3).unwrap();
        let run = || {
            let mut g = Graph::eval();
            let b = s.bind(&mut g);
            let x = g.constant(Tensor::from_f64([1, 5], &[0.1, 0.2, -0.3, 0.4, 0.5]).unwrap());
            let y = spec.forward(&mut g, &b, "m", x).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = MlpSpec::new(4, 7, 3, 0.0).unwrap();
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, "m", 9).unwrap();
        let w = s.get("m.fc1.weight").unwrap().clone();
        let x = Tensor::from_f64([2, 4], &[0.3, -0.8, 1.1, 0.5, -0.2, 0.9, -1.3, 0.4]).unwrap();
        // differentiate wrt fc1 weights with the input fixed
        let err = grad_check(
            |g, wv| {
                let mut b = s.bind(g);
                b = rebind(b, "m.fc1.weight", wv);
                let xv = g.constant(x.clone());
                let y = spec.forward(g, &b, "m", xv)?;
                let t = g.tanh(y);
                Ok(g.sum(t))
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    fn rebind(b: Bindings, path: &str, v: Var) -> Bindings {
        let mut b = b;
        b.override_var(path, v);
        b
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(0, 2, 2, 0.0).is_err());
        assert!(MlpSpec::new(2, 2, 2, 1.0).is_err());
    }
}
