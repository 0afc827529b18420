//! Synthetic multi-view clips with a planted TCR → VCR → DER → DBR label process.
//!
//! Labels are drawn first from each sample's own stream, so [`sample_labels`]
//! reproduces them without rendering any frames.
//!
//! Conditional tables use a quantile coupling: parent configurations, in a fixed
//! order, partition the unit interval by their probability; each parent's sharp
//! conditional is the child's quantile function over its sub-interval. Mixing that
//! with the child marginal by `causal_strength` keeps the marginals fixed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Manifest, ManifestRow, Split};
use crate::chain::Task;
use crate::error::{CaupsiError, Result};
use crate::rng::{self, Prng};
use crate::view::{ClipShape, View};

/// Class supports of the reference dataset, used as label marginals.
pub const CLASS_COUNTS: [&[usize]; 4] = [
    &[77, 133, 399],
    &[154, 56, 39, 32, 328],
    &[84, 363, 67, 50, 45],
    &[28, 94, 129, 12, 248, 30, 68],
];

/// Arousal mean per TCR class plus a per-VCR offset.
const AROUSAL_TCR: [f64; 3] = [0.8, 0.2, -0.4];
const AROUSAL_VCR: [f64; 5] = [-0.3, 0.4, 0.2, 0.6, 0.0];
const VALENCE_TCR: [f64; 3] = [-0.7, -0.2, 0.5];
const VALENCE_VCR: [f64; 5] = [0.2, -0.1, -0.3, -0.2, 0.1];

/// Orders in which parent configurations and child classes are laid along the coupling axis.
const TCR_ORDER: [usize; 3] = [2, 1, 0];
const VCR_ORDER: [usize; 5] = [4, 3, 1, 2, 0];
const DER_ORDER: [usize; 5] = [2, 1, 0, 4, 3];
const DBR_ORDER: [usize; 7] = [3, 4, 5, 1, 0, 2, 6];
/// DER classes ordered from calm to agitated, used to order the DBR parents.
const DER_CALM_ORDER: [usize; 5] = [2, 1, 3, 0, 4];

const PATTERN_SEED: u64 = 0x5eed_0f_c1a5;
const STYLES: usize = 3;
const AR_RHO: f64 = 0.7;

const SCENE_GAIN: f64 = 1.0;
const FACE_GAIN: f64 = 0.5;
/// Fraction of `causal_strength` applied to the DER table; the rest is emotion
/// not explained by context, visible only in the face.
const DER_SHARPNESS: f64 = 0.5;
const AROUSAL_FACE: f64 = 0.7;
const VALENCE_FACE: f64 = 0.7;
const BODY_GAIN: f64 = 0.04;
/// Coarse body posture shared by DBR classes; classes that share a DER parent
/// get different codes, so body and emotion are complementary cues.
pub const DBR_BODY_CODE: [usize; 7] = [1, 0, 0, 1, 0, 1, 0];
const BODY_CODE_GAIN: f64 = 0.6;
const AROUSAL_BODY: f64 = 0.15;
const INSIDE_NOISE: f64 = 2.0;
const STYLE_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub shape: ClipShape,
    /// 0 gives independent labels, 1 the sharpest planted dependencies.
    pub causal_strength: f64,
    /// Multiplies the pixel noise level.
    pub difficulty: f64,
    /// Multiplies every class pattern.
    pub separation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 2898,
            seed: 0,
            shape: ClipShape {
                channels: 3,
                frames: 16,
                height: 8,
                width: 8,
            },
            causal_strength: 1.0,
            difficulty: 1.0,
            separation: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if self.n_samples < 3 {
            return Err(CaupsiError::Config("n_samples must be at least 3".into()));
        }
        if s.channels == 0 || s.frames == 0 || s.height == 0 || s.width == 0 {
            return Err(CaupsiError::Config(format!("clip shape {} has a zero extent", s.descriptor())));
        }
        if !(0.0..=1.0).contains(&self.causal_strength) {
            return Err(CaupsiError::Config(format!("causal_strength {} outside [0,1]", self.causal_strength)));
        }
        if !(self.difficulty >= 0.0) || !(self.separation >= 0.0) {
            return Err(CaupsiError::Config("difficulty and separation must be non-negative".into()));
        }
        Ok(())
    }
}

fn normalise(v: &[usize]) -> Vec<f64> {
    let t: usize = v.iter().sum();
    v.iter().map(|&x| x as f64 / t as f64).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Conditional tables `P(child | parent)` for parents with probabilities `parent_p`.
fn coupled_table(parent_p: &[f64], parent_order: &[usize], child_marginal: &[f64], child_order: &[usize], s: f64) -> Vec<Vec<f64>> {
    let mut child_iv = vec![(0.0, 0.0); child_marginal.len()];
    let mut acc = 0.0;
    for &c in child_order {
        child_iv[c] = (acc, acc + child_marginal[c]);
        acc += child_marginal[c];
    }
    let mut out = vec![child_marginal.to_vec(); parent_p.len()];
    let mut lo = 0.0;
    for &k in parent_order {
        let hi = lo + parent_p[k];
        if parent_p[k] > 0.0 {
            for (c, &(a, b)) in child_iv.iter().enumerate() {
                let overlap = (hi.min(b) - lo.max(a)).max(0.0) / parent_p[k];
                out[k][c] = (1.0 - s) * child_marginal[c] + s * overlap;
            }
        }
        lo = hi;
    }
    out
}

fn draw(p: &[f64], r: &mut Prng) -> usize {
    let mut u: f64 = r.gen();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.len() - 1
}

/// Exact label distributions for one causal strength.
#[derive(Clone, Debug)]
pub struct LabelModel {
    pub marginals: [Vec<f64>; 4],
    pub vcr_given_tcr: Vec<Vec<f64>>,
    /// Indexed by `der_parent(tcr, vcr, arousal > 0, valence > 0)`.
    pub der_given: Vec<Vec<f64>>,
    /// Indexed by `dbr_parent(der, arousal > 0)`.
    pub dbr_given: Vec<Vec<f64>>,
    /// Joint probability of each DBR parent configuration.
    pub dbr_parent_p: Vec<f64>,
}

pub fn der_parent(tcr: usize, vcr: usize, sa: bool, sv: bool) -> usize {
    ((tcr * 5 + vcr) * 2 + sa as usize) * 2 + sv as usize
}

pub fn dbr_parent(der: usize, sa: bool) -> usize {
    der * 2 + sa as usize
}

pub fn arousal_mean(tcr: usize, vcr: usize) -> f64 {
    AROUSAL_TCR[tcr] + AROUSAL_VCR[vcr]
}

pub fn valence_mean(tcr: usize, vcr: usize) -> f64 {
    VALENCE_TCR[tcr] + VALENCE_VCR[vcr]
}

impl LabelModel {
    pub fn new(s: f64) -> Self {
        let marginals = CLASS_COUNTS.map(normalise);
        let vcr_given_tcr = coupled_table(&marginals[0], &TCR_ORDER, &marginals[1], &VCR_ORDER, s);

        // parents of DER: (tcr, vcr, sign a, sign v)
        let mut der_pp = vec![0.0; 60];
        for t in 0..3 {
            for v in 0..5 {
                let pa = std_normal_cdf(arousal_mean(t, v));
                let pv = std_normal_cdf(valence_mean(t, v));
                for sa in [false, true] {
                    for sv in [false, true] {
                        let p = marginals[0][t]
                            * vcr_given_tcr[t][v]
                            * if sa { pa } else { 1.0 - pa }
                            * if sv { pv } else { 1.0 - pv };
                        der_pp[der_parent(t, v, sa, sv)] = p;
                    }
                }
            }
        }
        // calm-to-agitated: low arousal first, then negative valence first
        let mut der_order: Vec<usize> = (0..60).collect();
        der_order.sort_by_key(|&k| {
            let (sv, sa) = (k % 2, (k / 2) % 2);
            let (tv, t) = ((k / 4) % 5, k / 20);
            (sa, sv, TCR_ORDER.iter().position(|&x| x == t), VCR_ORDER.iter().position(|&x| x == tv))
        });
        let der_given = coupled_table(&der_pp, &der_order, &marginals[2], &DER_ORDER, s * DER_SHARPNESS);

        let mut dbr_pp = vec![0.0; 10];
        for (k, &pk) in der_pp.iter().enumerate() {
            let sa = (k / 2) % 2 == 1;
            for d in 0..5 {
                dbr_pp[dbr_parent(d, sa)] += pk * der_given[k][d];
            }
        }
        let mut dbr_order = Vec::with_capacity(10);
        for &d in &DER_CALM_ORDER {
            for sa in [false, true] {
                dbr_order.push(dbr_parent(d, sa));
            }
        }
        let dbr_given = coupled_table(&dbr_pp, &dbr_order, &marginals[3], &DBR_ORDER, s);
        LabelModel {
            marginals,
            vcr_given_tcr,
            der_given,
            dbr_given,
            dbr_parent_p: dbr_pp,
        }
    }

    /// Accuracy of the best classifier that sees only `(der, sign of arousal)`.
    pub fn dbr_bayes_accuracy(&self) -> f64 {
        self.dbr_parent_p
            .iter()
            .zip(&self.dbr_given)
            .map(|(p, row)| p * row.iter().cloned().fold(0.0, f64::max))
            .sum()
    }
}

/// Ground truth drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLatent {
    pub labels: [usize; 4],
    pub arousal: f64,
    pub valence: f64,
    pub style: usize,
}

fn draw_latent(model: &LabelModel, r: &mut Prng) -> SampleLatent {
    let tcr = draw(&model.marginals[0], r);
    let vcr = draw(&model.vcr_given_tcr[tcr], r);
    let a = arousal_mean(tcr, vcr) + r.sample::<f64, _>(StandardNormal);
    let v = valence_mean(tcr, vcr) + r.sample::<f64, _>(StandardNormal);
    let der = draw(&model.der_given[der_parent(tcr, vcr, a > 0.0, v > 0.0)], r);
    let dbr = draw(&model.dbr_given[dbr_parent(der, a > 0.0)], r);
    let style = r.gen_range(0..STYLES);
    SampleLatent {
        labels: [tcr, vcr, der, dbr],
        arousal: a,
        valence: v,
        style,
    }
}

fn sample_stream(seed: u64, i: usize) -> Prng {
    rng::stream(rng::mix(seed, 0x6a7e), i as u64)
}

/// Labels and latents of samples `0..n` without rendering frames.
pub fn sample_labels(cfg: &GeneratorConfig, n: usize) -> Vec<SampleLatent> {
    let model = LabelModel::new(cfg.causal_strength);
    (0..n).map(|i| draw_latent(&model, &mut sample_stream(cfg.seed, i))).collect()
}

/// Fixed class patterns shared by every dataset of a given clip shape.
pub struct PatternBank {
    frame: usize,
    channels: usize,
    tcr: Vec<Vec<f64>>,
    vcr: Vec<Vec<f64>>,
    der: Vec<Vec<f64>>,
    dbr: Vec<Vec<f64>>,
    body_code: Vec<Vec<f64>>,
    vehicle: Vec<Vec<f64>>,
    arousal_face: Vec<f64>,
    valence_face: Vec<f64>,
    arousal_body: Vec<f64>,
    /// Channel mixing for the left and right cameras.
    mix: [[[f64; 3]; 3]; 2],
    style: Vec<Vec<f64>>,
}

impl PatternBank {
    pub fn new(shape: ClipShape) -> Self {
        let frame = shape.frame_len();
        let mut r = rng::named(PATTERN_SEED, &shape.descriptor());
        let mut pat = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..frame).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let tcr = pat(3);
        let vcr = pat(5);
        let der = pat(5);
        let dbr = pat(7);
        let vehicle = pat(5);
        let body_code = pat(2);
        let arousal_face = pat(1).remove(0);
        let arousal_body = pat(1).remove(0);
        let valence_face = pat(1).remove(0);
        let mut mix = [[[0.0; 3]; 3]; 2];
        for (v, m) in mix.iter_mut().enumerate() {
            for (i, row) in m.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    // rotate channels by one (left) or two (right) positions with some leakage
                    *x = if (i + v + 1) % 3 == j { 0.8 } else { 0.1 };
                }
            }
        }
        // per-session lighting: channel tint plus a top-to-bottom gradient (flip invariant)
        let hw = shape.height * shape.width;
        let style = (0..STYLES)
            .map(|st| {
                (0..frame)
                    .map(|i| {
                        let (c, y) = (i / hw, (i % hw) / shape.width);
                        let tint = ((st * shape.channels + c) as f64 * 2.3).sin();
                        let slope = (st as f64 * 2.1 + 0.5).cos();
                        STYLE_GAIN * (tint + slope * (y as f64 / (shape.height.max(2) - 1) as f64 - 0.5) * 2.0)
                    })
                    .collect()
            })
            .collect();
        PatternBank {
            frame,
            channels: shape.channels,
            tcr,
            vcr,
            der,
            dbr,
            body_code,
            vehicle,
            arousal_face,
            valence_face,
            arousal_body,
            mix,
            style,
        }
    }

    fn mix_channels(&self, img: &[f64], which: usize) -> Vec<f64> {
        let c = self.channels;
        let hw = self.frame / c;
        let mut out = vec![0.0; self.frame];
        for o in 0..c {
            for i in 0..c {
                let w = if c == 3 { self.mix[which][o][i] } else if o == i { 1.0 } else { 0.0 };
                if w != 0.0 {
                    for p in 0..hw {
                        out[o * hw + p] += w * img[i * hw + p];
                    }
                }
            }
        }
        out
    }

    /// Noise-free static image of every view, in [`View::ALL`] order.
    pub fn base_images(&self, lat: &SampleLatent, separation: f64) -> [Vec<f64>; 6] {
        let [tcr, vcr, der, dbr] = lat.labels;
        let comb = |parts: &[(&[f64], f64)]| -> Vec<f64> {
            let mut v = vec![0.0; self.frame];
            for (p, w) in parts {
                v.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += w * b * separation);
            }
            v
        };
        let scene = comb(&[(&self.tcr[tcr], SCENE_GAIN), (&self.vcr[vcr], SCENE_GAIN)]);
        let left = self.mix_channels(&scene, 0);
        let right = self.mix_channels(&scene, 1);
        let face = comb(&[
            (&self.der[der], FACE_GAIN),
            (&self.arousal_face, AROUSAL_FACE * lat.arousal),
            (&self.valence_face, VALENCE_FACE * lat.valence),
        ]);
        let body = comb(&[
            (&self.body_code[DBR_BODY_CODE[dbr]], BODY_CODE_GAIN),
            (&self.dbr[dbr], BODY_GAIN),
            (&self.arousal_body, AROUSAL_BODY * lat.arousal),
        ]);
        let inside = comb(&[
            (&self.der[der], 0.5 * FACE_GAIN),
            (&self.dbr[dbr], 0.5 * BODY_GAIN),
            (&self.vehicle[vcr], SCENE_GAIN),
        ]);
        let mut views = [scene, left, right, inside, face, body];
        for v in views.iter_mut() {
            v.iter_mut().zip(&self.style[lat.style]).for_each(|(x, o)| *x += o);
        }
        views
    }
}

/// Renders the six `C x T x H x W` clips of one sample from its stream state after the labels.
fn render(bank: &PatternBank, cfg: &GeneratorConfig, lat: &SampleLatent, r: &mut Prng) -> [Vec<f32>; 6] {
    let s = cfg.shape;
    let hw = s.height * s.width;
    let base = bank.base_images(lat, cfg.separation);
    let innov = (1.0 - AR_RHO * AR_RHO).sqrt();
    let mut out: [Vec<f32>; 6] = Default::default();
    for (vi, img) in base.iter().enumerate() {
        let sigma = cfg.difficulty * if View::ALL[vi] == View::Inside { INSIDE_NOISE } else { 1.0 };
        let mut clip = vec![0.0f32; s.numel()];
        let mut noise: Vec<f64> = (0..s.frame_len()).map(|_| r.sample(StandardNormal)).collect();
        for t in 0..s.frames {
            if t > 0 {
                noise.iter_mut().for_each(|n| *n = AR_RHO * *n + innov * r.sample::<f64, _>(StandardNormal));
            }
            for c in 0..s.channels {
                for p in 0..hw {
                    let src = c * hw + p;
                    clip[(c * s.frames + t) * hw + p] = (img[src] + sigma * noise[src]) as f32;
                }
            }
        }
        out[vi] = clip;
    }
    out
}

/// Draws sample `i` completely: latent plus clips.
pub fn generate_sample(bank: &PatternBank, cfg: &GeneratorConfig, model: &LabelModel, i: usize) -> (SampleLatent, [Vec<f32>; 6]) {
    let mut r = sample_stream(cfg.seed, i);
    let lat = draw_latent(model, &mut r);
    let clips = render(bank, cfg, &lat, &mut r);
    (lat, clips)
}

/// Split sizes: validation and test fractions rounded to nearest, remainder to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (0.15 * n as f64).round() as usize;
    let test = (0.20 * n as f64).round() as usize;
    (n - val - test, val, test)
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Split of each sample index under `seed`.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let (_, val, test) = split_sizes(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::named(seed, "split"));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in idx.iter().enumerate() {
        if rank < val {
            out[i] = Split::Val;
        } else if rank < val + test {
            out[i] = Split::Test;
        }
    }
    out
}

/// Writes a dataset directory: `manifest.tsv`, `latents.tsv` and `clips/`.
pub fn generate(cfg: &GeneratorConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| CaupsiError::io(&clips_dir, e))?;
    let bank = PatternBank::new(cfg.shape);
    let model = LabelModel::new(cfg.causal_strength);
    let splits = assign_splits(cfg.n_samples, cfg.seed);
    let desc = cfg.shape.descriptor();

    let rows: Vec<(ManifestRow, SampleLatent)> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| -> Result<(ManifestRow, SampleLatent)> {
            let (lat, clips) = generate_sample(&bank, cfg, &model, i);
            let id = sample_id(i);
            let mut paths: [String; 6] = Default::default();
            for (v, clip) in View::ALL.iter().zip(clips.iter()) {
                let rel = format!("clips/{id}.{}.f32", v.name());
                let path = out.join(&rel);
                let bytes: Vec<u8> = clip.iter().flat_map(|x| x.to_le_bytes()).collect();
                fs::write(&path, bytes).map_err(|e| CaupsiError::io(&path, e))?;
                paths[v.index()] = rel;
            }
            let row = ManifestRow {
                sample_id: id,
                split: splits[i],
                labels: lat.labels,
                paths,
                shape: desc.clone(),
            };
            Ok((row, lat))
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        rows: rows.iter().map(|(r, _)| r.clone()).collect(),
    };
    manifest.write(&out.join("manifest.tsv"))?;
    let lat_path = out.join("latents.tsv");
    let mut f = fs::File::create(&lat_path).map_err(|e| CaupsiError::io(&lat_path, e))?;
    let mut text = String::from("sample_id\tarousal\tvalence\tstyle\n");
    for (row, lat) in &rows {
        text.push_str(&format!("{}\t{:.6}\t{:.6}\t{}\n", row.sample_id, lat.arousal, lat.valence, lat.style));
    }
    f.write_all(text.as_bytes()).map_err(|e| CaupsiError::io(&lat_path, e))?;
    Ok(manifest)
}

/// Per-task class frequencies of `labels`.
pub fn empirical_marginals(labels: &[[usize; 4]]) -> [Vec<f64>; 4] {
    Task::ALL.map(|t| {
        let mut c = vec![0.0; t.num_classes()];
        labels.iter().for_each(|l| c[l[t.index()]] += 1.0);
        let n = labels.len().max(1) as f64;
        c.iter().map(|x| x / n).collect()
    })
}
