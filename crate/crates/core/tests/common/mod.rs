#![allow(dead_code)]

use caupsi::chain::{head_path, Task};
use caupsi::model::{Ablation, CauPsi, ModelConfig, PooledBatch};
use caupsi::nn::ParamStore;
use caupsi::objective::{total_loss, LossConfig, MixTarget};
use caupsi::rng;
use caupsi::tensor::{Graph, Mode, Scalar, Tensor};
use caupsi::train::{micro_step, scale_grads};
use rand::Rng;

/// Small dimensions for derivative checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_c: 16,
        d_f: 16,
        d_z: 32,
        d_t: 8,
        d_e: 4,
        d_psi: 4,
        heads: 2,
        head_hidden: 16,
        scene_hidden: 8,
        adv_hidden: 8,
        domain_k: 3,
        ..Default::default()
    }
}

pub struct ToyBatch {
    pub rows: Vec<Vec<f32>>,
    pub labels: Vec<[usize; 4]>,
    pub domains: Vec<usize>,
}

pub fn toy_batch(cfg: &ModelConfig, n: usize, seed: u64) -> ToyBatch {
    let mut r = rng::named(seed, "toy.batch");
    let width = 6 * cfg.enc_dim();
    let rows = (0..n).map(|_| (0..width).map(|_| r.gen_range(-1.0f32..1.0)).collect()).collect();
    let labels = (0..n).map(|_| Task::ALL.map(|t| r.gen_range(0..t.num_classes()))).collect();
    let domains = (0..n).map(|_| r.gen_range(0..cfg.domain_k)).collect();
    ToyBatch { rows, labels, domains }
}

impl ToyBatch {
    pub fn pooled<F: Scalar>(&self, cfg: &ModelConfig, range: std::ops::Range<usize>) -> PooledBatch<F> {
        let refs: Vec<&[f32]> = self.rows[range].iter().map(|v| v.as_slice()).collect();
        PooledBatch::from_rows(&refs, cfg.enc_dim()).unwrap()
    }

    pub fn targets(&self, range: std::ops::Range<usize>) -> [Vec<MixTarget>; 4] {
        std::array::from_fn(|t| self.labels[range.clone()].iter().map(|l| MixTarget::single(l[t])).collect())
    }
}

pub fn nonuniform_loss() -> LossConfig {
    LossConfig {
        class_weights: Task::ALL.map(|t| (0..t.num_classes()).map(|k| 0.5 + 0.25 * k as f64).collect()),
        lambda_grl: 0.7,
        ..Default::default()
    }
}

/// `(weighted task loss, adversarial CE)` of an eval-mode forward pass.
fn loss_terms(model: &CauPsi, store: &ParamStore<f64>, b: &PooledBatch<f64>, tg: &[Vec<MixTarget>; 4], dom: &[usize], loss: &LossConfig) -> (f64, f64) {
    let mut g = Graph::eval();
    let p = store.bind(&mut g);
    let x = CauPsi::bind_inputs(&mut g, b);
    let out = model.forward(&mut g, &p, &x).unwrap();
    let logits = model.adversary(&mut g, &p, out.trunk.z, loss.lambda_grl).unwrap();
    let (_, parts) = total_loss(&mut g, &out.chain.probs, tg, Some((logits, dom)), loss).unwrap();
    let task: f64 = parts.task.iter().zip(loss.lambda).map(|(l, w)| l * w).sum();
    (task, parts.adversarial)
}

/// Compares backprop through the whole model against central differences at
/// `n_params` random trainable scalars. Through the reversal layer the expected
/// derivative is `dT - lambda_grl * gamma * dA` for trunk entries and `gamma * dA`
/// for adversary entries. Returns the largest relative error.
pub fn end_to_end_grad_check(seed: u64, n_params: usize) -> f64 {
    let cfg = toy_config();
    let model = CauPsi::new(cfg, Ablation::none()).unwrap();
    let mut store: ParamStore<f64> = model.init_params(seed).unwrap();
    let batch = toy_batch(&cfg, 6, seed);
    let pb = batch.pooled::<f64>(&cfg, 0..6);
    let tg = batch.targets(0..6);
    let loss = nonuniform_loss();
    micro_step(&model, &mut store, &pb, None, &tg, &batch.domains, &loss, Mode::Eval).unwrap();

    let trainable: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
    let mut r = rng::named(seed, "toy.pick");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..n_params {
        let path = &trainable[r.gen_range(0..trainable.len())];
        let n = store.get(path).unwrap().numel();
        let i = r.gen_range(0..n);
        let analytic = store.get(path).unwrap().grad().unwrap()[i];
        let mut probe = store.clone();
        let orig = probe.get(path).unwrap().data()[i];
        probe.get_mut(path).unwrap().data_mut()[i] = orig + h;
        let up = loss_terms(&model, &probe, &pb, &tg, &batch.domains, &loss);
        probe.get_mut(path).unwrap().data_mut()[i] = orig - h;
        let down = loss_terms(&model, &probe, &pb, &tg, &batch.domains, &loss);
        let dt = (up.0 - down.0) / (2.0 * h);
        let da = (up.1 - down.1) / (2.0 * h);
        let adv_sign = if path.starts_with("adversary.") { 1.0 } else { -loss.lambda_grl };
        let expected = dt + adv_sign * loss.gamma_adv * da;
        let err = (analytic - expected).abs() / analytic.abs().max(expected.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// L2 norm of the gradient of the DBR loss alone with respect to the TCR head.
pub fn dbr_grad_into_tcr_head(ablation: Ablation) -> f64 {
    let cfg = toy_config();
    let model = CauPsi::new(cfg, ablation).unwrap();
    let mut store: ParamStore<f64> = model.init_params(3).unwrap();
    let batch = toy_batch(&cfg, 8, 3);
    let loss = LossConfig {
        lambda: [0.0, 0.0, 0.0, 1.0],
        gamma_adv: 0.0,
        ..Default::default()
    };
    micro_step(&model, &mut store, &batch.pooled(&cfg, 0..8), None, &batch.targets(0..8), &batch.domains, &loss, Mode::Eval).unwrap();
    let prefix = format!("{}.", head_path(Task::Tcr));
    store
        .iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .flat_map(|(_, p)| p.tensor.grad().unwrap_or(&[]).to_vec())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Relative L2 error between the gradient of one batch of `micro * accum` samples
/// and `accum` accumulated micro-batches divided by `accum`, dropout off, no mixup.
pub fn accumulation_error<F: Scalar>(micro: usize, accum: usize, seed: u64) -> f64 {
    let cfg = toy_config();
    let model = CauPsi::new(cfg, Ablation::none()).unwrap();
    let n = micro * accum;
    let batch = toy_batch(&cfg, n, seed);
    let loss = nonuniform_loss();
    let base: ParamStore<F> = model.init_params(seed).unwrap();

    let mut big = base.clone();
    micro_step(&model, &mut big, &batch.pooled(&cfg, 0..n), None, &batch.targets(0..n), &batch.domains, &loss, Mode::Eval).unwrap();

    let mut acc = base;
    for k in 0..accum {
        let r = k * micro..(k + 1) * micro;
        micro_step(&model, &mut acc, &batch.pooled(&cfg, r.clone()), None, &batch.targets(r.clone()), &batch.domains[r], &loss, Mode::Eval).unwrap();
    }
    scale_grads(&mut acc, 1.0 / accum as f64);

    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for ((_, a), (_, b)) in big.iter().zip(acc.iter()) {
        if let (Some(ga), Some(gb)) = (a.tensor.grad(), b.tensor.grad()) {
            for (x, y) in ga.iter().zip(gb) {
                let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
                diff += (x - y) * (x - y);
                norm += x * x;
            }
        }
    }
    (diff / norm).sqrt()
}

pub fn tensor_f64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

/// `k` Gaussian blobs of `per` points in `dim` dimensions with centres 10 apart.
pub fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    use rand_distr::StandardNormal;
    let mut r = rng::named(seed, "blobs");
    let mut pts = Vec::with_capacity(k * per * dim);
    let mut truth = Vec::with_capacity(k * per);
    for c in 0..k {
        for _ in 0..per {
            for d in 0..dim {
                let centre = if d == c % dim { 10.0 } else { 0.0 } + if d == (c + 1) % dim { 3.0 * c as f64 } else { 0.0 };
                pts.push(centre + 0.3 * r.sample::<f64, _>(StandardNormal));
            }
            truth.push(c);
        }
    }
    (pts, truth)
}
