use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CaupsiError, Result};
use crate::rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, fans read from a `[in, out]` shape.
    XavierUniform,
    /// Uniform in `±sqrt(6 / fan_in)` for `[out, in, kh, kw]` kernels.
    HeUniform,
    Normal(f64),
    Constant(f64),
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut rng::Prng) -> Vec<f64> {
        let n: usize = shape.iter().product();
        match self {
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    [o] => (*o, *o),
                    s => (s[1..].iter().product(), s[0] * s[2..].iter().product::<usize>()),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::HeUniform => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Named parameters, iterated in path order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `path` with values drawn from a stream keyed by `(seed, path)`,
    /// so adding or removing other entries never changes this one.
    pub fn add(&mut self, path: &str, shape: &[usize], init: Init, trainable: bool, seed: u64) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CaupsiError::Config(format!("parameter {path} has degenerate shape {shape:?}")));
        }
        let mut r = rng::named(seed, path);
        let values = init.sample(shape, &mut r);
        self.insert(path, Tensor::from_f64(shape.to_vec(), &values)?, trainable)
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(CaupsiError::Config(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(path.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| CaupsiError::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| CaupsiError::MissingParam(path.to_string()))
    }

    pub fn param(&self, path: &str) -> Option<&Param<F>> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Marks every entry under `prefix` as (non-)trainable; returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) -> usize {
        let mut n = 0;
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = flag;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every entry as a leaf on `g`; only trainable ones collect gradients.
    pub fn bind(&self, g: &mut Graph<F>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let mut t = p.tensor.clone();
                t.zero_grad();
                t.set_requires_grad(p.trainable);
                (k.clone(), g.leaf(t))
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the graph's leaf gradients into the store's gradient slots.
    pub fn collect_grads(&mut self, g: &Graph<F>, b: &Bindings) {
        for (k, p) in self.entries.iter_mut() {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = b.vars.get(k).and_then(|&v| g.grad(v)) {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    /// Global L2 norm over all trainable gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Path → graph variable map produced by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| CaupsiError::MissingParam(path.to_string()))
    }

    pub fn get_opt(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    /// Routes `path` to another variable (used to differentiate wrt one entry).
    pub fn override_var(&mut self, path: &str, v: Var) {
        self.vars.insert(path.to_string(), v);
    }
}
