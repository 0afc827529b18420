//! Weighted, label-smoothed task losses and the adversarial domain term.

use crate::chain::Task;
use crate::error::{CaupsiError, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: [f64; 4],
    pub epsilon: f64,
    pub gamma_adv: f64,
    pub lambda_grl: f64,
    pub class_weights: [Vec<f64>; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: [1.0, 1.0, 1.5, 2.0],
            epsilon: 0.1,
            gamma_adv: 0.5,
            lambda_grl: 1.0,
            class_weights: Task::ALL.map(|t| vec![1.0; t.num_classes()]),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(CaupsiError::Config(format!("task weights {:?} must be non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(CaupsiError::Config(format!("label smoothing {} outside [0,1)", self.epsilon)));
        }
        if !(self.gamma_adv >= 0.0) || !(self.lambda_grl >= 0.0) {
            return Err(CaupsiError::Config("adversarial weights must be non-negative".into()));
        }
        for t in Task::ALL {
            let w = &self.class_weights[t.index()];
            if w.len() != t.num_classes() || w.iter().any(|&v| !(v > 0.0)) {
                return Err(CaupsiError::Config(format!("{t} class weights {w:?} invalid")));
            }
        }
        Ok(())
    }
}

/// `-w[target] * sum_c q_c ln p_c` with `q = (1-eps) onehot + eps/C`, logs floored at 1e-12.
pub fn ls_ce(probs: &[f64], target: usize, weights: &[f64], eps: f64) -> Result<f64> {
    let c = probs.len();
    if target >= c || weights.len() != c {
        return Err(CaupsiError::Data(format!("target {target} for {c} classes")));
    }
    let loss: f64 = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let q = eps / c as f64 + if k == target { 1.0 - eps } else { 0.0 };
            q * p.max(LOG_FLOOR).ln()
        })
        .sum();
    Ok(-weights[target] * loss)
}

/// Inverse-frequency weights normalised to mean 1; absent classes get weight 1.
pub fn compute_class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() || classes == 0 {
        return Err(CaupsiError::Data("class weights need at least one label".into()));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(CaupsiError::Data(format!("label {y} for {classes} classes")));
        }
        counts[y] += 1;
    }
    Ok(weights_from_counts(&counts))
}

pub fn weights_from_counts(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<Option<f64>> = counts.iter().map(|&n| (n > 0).then(|| 1.0 / n as f64)).collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.iter().map(|v| v.map_or(1.0, |x| x / mean)).collect()
}

/// One sample's target for one task: a convex mix of two classes (mixup) or a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixTarget {
    pub a: usize,
    pub b: usize,
    pub lam: f64,
}

impl MixTarget {
    pub fn single(y: usize) -> Self {
        MixTarget { a: y, b: y, lam: 1.0 }
    }
}

/// Coefficient matrix `M` with `loss = -sum(M ⊙ ln p)` equal to the batch mean of
/// `lam * ls_ce(p, a) + (1 - lam) * ls_ce(p, b)`.
pub fn target_matrix<F: Scalar>(targets: &[MixTarget], classes: usize, weights: &[f64], eps: f64) -> Result<Tensor<F>> {
    let n = targets.len();
    if n == 0 {
        return Err(CaupsiError::Data("empty target batch".into()));
    }
    let mut m = vec![0.0f64; n * classes];
    for (i, t) in targets.iter().enumerate() {
        if t.a >= classes || t.b >= classes {
            return Err(CaupsiError::Data(format!("target {}/{} for {classes} classes", t.a, t.b)));
        }
        for (y, share) in [(t.a, t.lam), (t.b, 1.0 - t.lam)] {
            let w = weights[y] * share / n as f64;
            let row = &mut m[i * classes..(i + 1) * classes];
            row.iter_mut().for_each(|v| *v += w * eps / classes as f64);
            row[y] += w * (1.0 - eps);
        }
    }
    Tensor::from_f64([n, classes], &m)
}

/// `-sum(coeffs ⊙ ln(max(probs, 1e-12)))` on the graph.
pub fn weighted_nll<F: Scalar>(g: &mut Graph<F>, probs: Var, coeffs: Tensor<F>) -> Result<Var> {
    let logp = g.log(probs, F::lit(LOG_FLOOR));
    let m = g.constant(coeffs);
    let prod = g.mul(logp, m)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -F::one()))
}

/// Per-term values of the last [`total_loss`] evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub task: [f64; 4],
    pub adversarial: f64,
    pub total: f64,
}

/// `sum_r lambda_r L_r + gamma_adv * CE(domain)`; `domain` is `(logits, labels)` when present.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    probs: &[Var; 4],
    targets: &[Vec<MixTarget>; 4],
    domain: Option<(Var, &[usize])>,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let mut terms = Vec::with_capacity(5);
    for t in Task::ALL {
        let i = t.index();
        let m = target_matrix::<F>(&targets[i], t.num_classes(), &cfg.class_weights[i], cfg.epsilon)?;
        let l = weighted_nll(g, probs[i], m)?;
        parts.task[i] = g.data(l)[0].to_f64_lossy();
        terms.push(g.scale(l, F::lit(cfg.lambda[i])));
    }
    if let Some((logits, labels)) = domain {
        let k = *g.shape(logits).last().unwrap_or(&0);
        let p = g.softmax(logits)?;
        let tg: Vec<MixTarget> = labels.iter().map(|&d| MixTarget::single(d)).collect();
        let m = target_matrix::<F>(&tg, k, &vec![1.0; k], 0.0)?;
        let l = weighted_nll(g, p, m)?;
        parts.adversarial = g.data(l)[0].to_f64_lossy();
        terms.push(g.scale(l, F::lit(cfg.gamma_adv)));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = g.data(total)[0].to_f64_lossy();
    Ok((total, parts))
}
