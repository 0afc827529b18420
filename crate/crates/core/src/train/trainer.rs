use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use super::metrics::MetricsReport;
use super::optim::{clip_grads, ema_decay, ema_update, scale_grads, AdamW, EarlyStopper};
use super::TrainConfig;
use crate::chain::Task;
use crate::data::{flip_clips, Dataset, Sample, Split};
use crate::domain::{fit_domain_labels, DomainLabeler};
use crate::error::{CaupsiError, Result};
use crate::model::{CauPsi, ModelConfig, PooledBatch};
use crate::nn::ParamStore;
use crate::objective::{compute_class_weights, total_loss, LossConfig, LossParts, MixTarget};
use crate::rng::{self, Prng};
use crate::tensor::{Graph, Mode, Scalar};
use crate::view::{EncoderBank, EncoderKind, FrozenEncoder, ViewClip};

/// Frozen encoders for `cfg`, independent of any training seed.
pub fn encoder_bank(cfg: &ModelConfig) -> Result<EncoderBank> {
    let mut s = ParamStore::<f32>::new();
    for kind in EncoderKind::ALL {
        FrozenEncoder::add_params(&mut s, kind, cfg.channels, cfg.encoder_seed)?;
    }
    EncoderBank::from_params(&s, cfg.height, cfg.width)
}

/// Pooled encoder features of the six views, concatenated in view order.
pub fn encode_sample(bank: &EncoderBank, clips: &[ViewClip; 6]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for c in clips {
        out.extend(bank.pool(c)?);
    }
    Ok(out)
}

/// Encoded features and labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplit {
    pub ids: Vec<String>,
    pub labels: Vec<[usize; 4]>,
    /// `n x (6 * enc_dim)`, row-major.
    pub rows: Vec<f32>,
    pub width: usize,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }
}

/// Loads and encodes every sample of `split`.
pub fn encode_split(data: &Dataset, split: Split, bank: &EncoderBank) -> Result<EncodedSplit> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(CaupsiError::Data(format!("split '{split}' is empty")));
    }
    let encoded: Vec<(String, [usize; 4], Vec<f32>)> = idx
        .par_iter()
        .map(|&i| {
            let s = data.sample(i)?;
            let f = encode_sample(bank, &s.clips)?;
            Ok((s.id, s.labels, f))
        })
        .collect::<Result<_>>()?;
    let width = encoded[0].2.len();
    let mut out = EncodedSplit {
        ids: Vec::with_capacity(encoded.len()),
        labels: Vec::with_capacity(encoded.len()),
        rows: Vec::with_capacity(encoded.len() * width),
        width,
    };
    for (id, l, f) in encoded {
        out.ids.push(id);
        out.labels.push(l);
        out.rows.extend(f);
    }
    Ok(out)
}

/// Per-task inverse-frequency class weights of the training labels.
pub fn class_weights_for(labels: &[[usize; 4]]) -> Result<[Vec<f64>; 4]> {
    let mut out: [Vec<f64>; 4] = Default::default();
    for t in Task::ALL {
        let y: Vec<usize> = labels.iter().map(|l| l[t.index()]).collect();
        out[t.index()] = compute_class_weights(&y, t.num_classes())?;
    }
    Ok(out)
}

/// Random partner and mixing weight per sample; `alpha == 0` or a single sample disables mixing.
pub fn mixup_pairs(n: usize, alpha: f64, r: &mut Prng) -> Result<Vec<(usize, f64)>> {
    if alpha <= 0.0 || n < 2 {
        return Ok((0..n).map(|i| (i, 1.0)).collect());
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| CaupsiError::Config(format!("mixup alpha {alpha}: {e}")))?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    Ok(perm.into_iter().map(|j| (j, beta.sample(r))).collect())
}

/// `lam * a + (1 - lam) * b`, clip by clip, written as `b + lam * (a - b)` so
/// mixing a clip with itself is exact.
pub fn mix_clips(a: &[ViewClip; 6], b: &[ViewClip; 6], lam: f64) -> [ViewClip; 6] {
    if lam == 1.0 {
        return a.clone();
    }
    let la = lam as f32;
    std::array::from_fn(|v| ViewClip {
        view: a[v].view,
        shape: a[v].shape,
        data: a[v].data.iter().zip(&b[v].data).map(|(x, y)| y + la * (x - y)).collect(),
    })
}

/// Forward and backward of one micro-batch; gradients are added into `store`.
///
/// `unmixed` feeds the domain adversary; when absent the adversary reads the
/// same forward pass as the task heads.
#[allow(clippy::too_many_arguments)]
pub fn micro_step<F: Scalar>(
    model: &CauPsi,
    store: &mut ParamStore<F>,
    mixed: &PooledBatch<F>,
    unmixed: Option<&PooledBatch<F>>,
    targets: &[Vec<MixTarget>; 4],
    domains: &[usize],
    loss: &LossConfig,
    mode: Mode,
) -> Result<LossParts> {
    let mut g = Graph::new(mode);
    let p = store.bind(&mut g);
    let inputs = CauPsi::bind_inputs(&mut g, mixed);
    let out = model.forward(&mut g, &p, &inputs)?;
    let z = match unmixed {
        Some(u) if loss.gamma_adv > 0.0 => {
            let ui = CauPsi::bind_inputs(&mut g, u);
            Some(model.trunk(&mut g, &p, &ui)?.z)
        }
        None if loss.gamma_adv > 0.0 => Some(out.trunk.z),
        _ => None,
    };
    let domain = match z {
        Some(z) => Some((model.adversary(&mut g, &p, z, loss.lambda_grl)?, domains)),
        None => None,
    };
    let (total, parts) = total_loss(&mut g, &out.chain.probs, targets, domain, loss)?;
    if !parts.total.is_finite() {
        return Err(CaupsiError::Numeric(format!("loss became {}", parts.total)));
    }
    g.backward(total)?;
    store.collect_grads(&g, &p);
    Ok(parts)
}

/// Eval-mode outputs over a set of encoded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub pred: Vec<[usize; 4]>,
    /// Per task, `n x C_r` probabilities.
    pub probs: [Vec<f64>; 4],
    /// `n x d_psi`.
    pub psi: Vec<f64>,
}

pub fn predict(model: &CauPsi, store: &ParamStore<f32>, enc: &EncodedSplit, batch: usize) -> Result<Predictions> {
    let n = enc.len();
    let enc_dim = enc.width / 6;
    let mut out = Predictions {
        pred: Vec::with_capacity(n),
        probs: Default::default(),
        psi: Vec::with_capacity(n * model.cfg.d_psi),
    };
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch).min(n);
        let rows: Vec<&[f32]> = (start..end).map(|i| enc.row(i)).collect();
        let pb = PooledBatch::<f32>::from_rows(&rows, enc_dim)?;
        let mut g = Graph::eval();
        let p = store.bind(&mut g);
        let inputs = CauPsi::bind_inputs(&mut g, &pb);
        let o = model.forward(&mut g, &p, &inputs)?;
        let mut preds = vec![[0usize; 4]; end - start];
        for t in Task::ALL {
            let c = t.num_classes();
            let pr = g.data(o.chain.probs[t.index()]);
            for (i, row) in pr.chunks(c).enumerate() {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                preds[i][t.index()] = best;
            }
            out.probs[t.index()].extend(pr.iter().map(|&v| v as f64));
        }
        out.pred.extend(preds);
        out.psi.extend(g.data(o.psi).iter().map(|&v| v as f64));
    }
    Ok(out)
}

pub fn evaluate_encoded(model: &CauPsi, store: &ParamStore<f32>, enc: &EncodedSplit, batch: usize) -> Result<MetricsReport> {
    let p = predict(model, store, enc, batch)?;
    MetricsReport::new(&enc.labels, &p.pred, store.trainable_count(), store.frozen_count())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CauPsi,
    /// EMA weights at the best validation epoch (frozen encoders included).
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub epochs_run: usize,
    /// One `key=value` line per epoch.
    pub log: Vec<String>,
    pub domains: DomainLabeler,
    /// `(sample_id, domain)` for the training split.
    pub domain_assignments: Vec<(String, usize)>,
}

struct TrainSet {
    samples: Vec<Sample>,
    plain: Vec<Vec<f32>>,
    flipped: Vec<Vec<f32>>,
}

fn load_train_set(data: &Dataset, bank: &EncoderBank) -> Result<TrainSet> {
    let idx = data.indices(Split::Train);
    if idx.is_empty() {
        return Err(CaupsiError::Data("training split is empty".into()));
    }
    let loaded: Vec<(Sample, Vec<f32>, Vec<f32>)> = idx
        .par_iter()
        .map(|&i| {
            let s = data.sample(i)?;
            let plain = encode_sample(bank, &s.clips)?;
            let flipped = encode_sample(bank, &flip_clips(&s.clips))?;
            Ok((s, plain, flipped))
        })
        .collect::<Result<_>>()?;
    let mut set = TrainSet {
        samples: Vec::with_capacity(loaded.len()),
        plain: Vec::with_capacity(loaded.len()),
        flipped: Vec::with_capacity(loaded.len()),
    };
    for (s, a, b) in loaded {
        set.samples.push(s);
        set.plain.push(a);
        set.flipped.push(b);
    }
    Ok(set)
}

/// Trains `model_cfg` under `ablation` on the dataset's train split, selecting the
/// EMA snapshot with the best validation mean accuracy. `on_epoch` sees each log line.
pub fn train(
    data: &Dataset,
    model_cfg: &ModelConfig,
    ablation: crate::model::Ablation,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.shape.channels != model_cfg.channels || data.shape.height != model_cfg.height || data.shape.width != model_cfg.width {
        return Err(CaupsiError::Config(format!(
            "dataset clips are {} but the model expects {}x*x{}x{}",
            data.shape.descriptor(),
            model_cfg.channels,
            model_cfg.height,
            model_cfg.width
        )));
    }
    let bank = encoder_bank(model_cfg)?;
    let set = load_train_set(data, &bank)?;
    let val = encode_split(data, Split::Val, &bank)?;
    let n = set.samples.len();
    let width = set.plain[0].len();
    let enc_dim = width / 6;

    let feats: Vec<f64> = set.plain.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
    let domains = fit_domain_labels(&feats, width, cfg.domain_k_min..=cfg.domain_k_max, cfg.seed)?;
    drop(feats);

    let mut mcfg = *model_cfg;
    mcfg.domain_k = domains.k;
    let model = CauPsi::new(mcfg, ablation)?;
    let mut store: ParamStore<f32> = model.init_params(cfg.seed)?;
    let mut shadow = store.clone();
    let labels: Vec<[usize; 4]> = set.samples.iter().map(|s| s.labels).collect();
    let loss_cfg = cfg.loss_config(class_weights_for(&labels)?);
    loss_cfg.validate()?;

    let mut opt = AdamW::new(cfg.adamw());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = shadow.clone();
    let mut best_val = None;
    let mut log = Vec::new();
    let mut epochs_run = 0;
    let order_base: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut r = rng::stream(rng::mix(cfg.seed, 0xe90c), epoch as u64);
        let mut order = order_base.clone();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut batches = 0usize;
        let mut pending = 0usize;
        store.zero_grad();

        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, chunk) in chunks.iter().enumerate() {
            let b = chunk.len();
            let flips: Vec<bool> = (0..b).map(|_| cfg.flip_p > 0.0 && r.gen::<f64>() < cfg.flip_p).collect();
            let pairs = mixup_pairs(b, cfg.mixup_alpha, &mut r)?;
            let dropout_seed: u64 = r.gen();
            let mixing = pairs.iter().enumerate().any(|(i, &(j, lam))| j != i && lam != 1.0);

            let cached = |k: usize| -> &[f32] {
                let s = chunk[k];
                if flips[k] {
                    &set.flipped[s]
                } else {
                    &set.plain[s]
                }
            };
            let unmixed_rows: Vec<&[f32]> = (0..b).map(cached).collect();
            let unmixed = PooledBatch::<f32>::from_rows(&unmixed_rows, enc_dim)?;
            let mixed = if mixing {
                let clips_of = |k: usize| -> [ViewClip; 6] {
                    let s = &set.samples[chunk[k]];
                    if flips[k] {
                        flip_clips(&s.clips)
                    } else {
                        s.clips.clone()
                    }
                };
                let rows: Vec<Vec<f32>> = (0..b)
                    .into_par_iter()
                    .map(|k| {
                        let (j, lam) = pairs[k];
                        if j == k || lam == 1.0 {
                            return Ok(cached(k).to_vec());
                        }
                        encode_sample(&bank, &mix_clips(&clips_of(k), &clips_of(j), lam))
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&[f32]> = rows.iter().map(|v| v.as_slice()).collect();
                Some(PooledBatch::<f32>::from_rows(&refs, enc_dim)?)
            } else {
                None
            };
            let targets: [Vec<MixTarget>; 4] = std::array::from_fn(|t| {
                (0..b)
                    .map(|k| {
                        let (j, lam) = pairs[k];
                        MixTarget {
                            a: set.samples[chunk[k]].labels[t],
                            b: set.samples[chunk[j]].labels[t],
                            lam,
                        }
                    })
                    .collect()
            });
            let dom: Vec<usize> = chunk.iter().map(|&s| domains.labels[s]).collect();
            let parts = match &mixed {
                Some(m) => micro_step(&model, &mut store, m, Some(&unmixed), &targets, &dom, &loss_cfg, Mode::Train { seed: dropout_seed })?,
                None => micro_step(&model, &mut store, &unmixed, None, &targets, &dom, &loss_cfg, Mode::Train { seed: dropout_seed })?,
            };
            loss_sum += parts.total;
            adv_sum += parts.adversarial;
            batches += 1;
            pending += 1;

            if pending == cfg.accum_steps || bi + 1 == chunks.len() {
                scale_grads(&mut store, 1.0 / pending as f64);
                clip_grads(&mut store, cfg.clip_norm).map_err(|e| CaupsiError::Numeric(format!("epoch {epoch}, batch {bi}: {e}")))?;
                opt.step(&mut store, lr);
                store.zero_grad();
                let decay = ema_decay(cfg.ema_beta, opt.step - 1, cfg.ema_warmup);
                ema_update(&mut shadow, &store, decay)?;
                pending = 0;
            }
        }

        let report = evaluate_encoded(&model, &shadow, &val, cfg.eval_batch)?;
        let decision = stopper.update(epoch, report.mean_accuracy);
        let line = format!(
            "epoch={epoch} lr={lr:.6e} train_loss={:.6} train_adv={:.6} val_acc_tcr={:.6} val_acc_vcr={:.6} val_acc_der={:.6} val_acc_dbr={:.6} val_macc={:.6} wall_ms={}",
            loss_sum / batches.max(1) as f64,
            adv_sum / batches.max(1) as f64,
            report.accuracy(Task::Tcr),
            report.accuracy(Task::Vcr),
            report.accuracy(Task::Der),
            report.accuracy(Task::Dbr),
            report.mean_accuracy,
            t0.elapsed().as_millis()
        );
        on_epoch(&line);
        log.push(line);
        epochs_run = epoch + 1;
        if decision.improved {
            best = shadow.clone();
            best_val = Some(report);
        }
        if decision.stop {
            break;
        }
    }

    let domain_assignments = set.samples.iter().map(|s| s.id.clone()).zip(domains.labels.iter().copied()).collect();
    Ok(TrainOutcome {
        model,
        best,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val: best_val.ok_or_else(|| CaupsiError::Training("no epoch completed".into()))?,
        epochs_run,
        log,
        domains,
        domain_assignments,
    })
}
