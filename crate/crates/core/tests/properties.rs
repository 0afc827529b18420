use caupsi::chain::Task;
use caupsi::checkpoint::Checkpoint;
use caupsi::config::RunConfig;
use caupsi::ctpc::CtpcSpec;
use caupsi::data::{mirror_clip, mutual_information};
use caupsi::model::{Ablation, CauPsi, ModelConfig};
use caupsi::nn::ParamStore;
use caupsi::objective::ls_ce;
use caupsi::tensor::{Graph, Tensor};
use caupsi::train::{clip_grads, ema_update, lr_at, MetricsReport};
use caupsi::view::{ClipShape, View, ViewClip};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64 - 500.0) / 7.0).collect();
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::from_f64([rows, cols], &data).unwrap());
        let p = g.softmax(x).unwrap();
        for row in g.data(p).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn grl_is_identity_forward_and_negated_backward(data in matrix(3, 4, 5.0), lambda in 0.0f64..3.0) {
        let mut g = Graph::<f64>::eval();
        let x = g.param(Tensor::from_f64([3, 4], &data).unwrap());
        let r = g.grl(x, lambda);
        prop_assert_eq!(g.data(r), &data[..]);
        let w = g.constant(Tensor::from_f64([3, 4], &(0..12).map(|i| i as f64 - 5.5).collect::<Vec<_>>()).unwrap());
        let y = g.mul(r, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        for (i, &gr) in g.grad(x).unwrap().iter().enumerate() {
            prop_assert_eq!(gr, -lambda * (i as f64 - 5.5));
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm(vals in prop::collection::vec(-100.0f64..100.0, 1..40), max_norm in 0.1f64..10.0) {
        let mut s = ParamStore::<f64>::new();
        let mut t = Tensor::from_f64([vals.len()], &vals).unwrap().with_requires_grad(true);
        t.accumulate_grad(&vals);
        s.insert("w", t, true).unwrap();
        let before = s.grad_norm();
        let scale = clip_grads(&mut s, max_norm).unwrap();
        prop_assert!(s.grad_norm() <= max_norm + 1e-6);
        prop_assert!(scale <= 1.0);
        if before <= max_norm {
            prop_assert_eq!(scale, 1.0);
        }
    }

    #[test]
    fn schedule_stays_between_bounds(e in 0usize..=100, warm in 1usize..20) {
        let lr = lr_at(e, 3e-4, 1e-6, warm, 100);
        prop_assert!((1e-6 - 1e-15..=3e-4 + 1e-15).contains(&lr));
    }

    #[test]
    fn ema_moves_shadow_towards_params(a in matrix(1, 6, 3.0), b in matrix(1, 6, 3.0), beta in 0.0f64..=1.0) {
        let mk = |v: &[f64]| {
            let mut s = ParamStore::<f64>::new();
            s.insert("p", Tensor::from_f64([6], v).unwrap(), true).unwrap();
            s
        };
        let mut shadow = mk(&a);
        ema_update(&mut shadow, &mk(&b), beta).unwrap();
        for ((s, x), y) in shadow.get("p").unwrap().data().iter().zip(&a).zip(&b) {
            prop_assert!(*s >= x.min(*y) - 1e-12 && *s <= x.max(*y) + 1e-12);
            prop_assert!((s - (beta * x + (1.0 - beta) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_ce_matches_definition(raw in prop::collection::vec(0.01f64..1.0, 2..8), eps in 0.0f64..0.5, w in 0.1f64..3.0, pick in any::<prop::sample::Index>()) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let c = p.len();
        let y = pick.index(c);
        let mut weights = vec![1.0; c];
        weights[y] = w;
        let got = ls_ce(&p, y, &weights, eps).unwrap();
        let want: f64 = -w * (0..c).map(|k| ((1.0 - eps) * (k == y) as u8 as f64 + eps / c as f64) * p[k].ln()).sum::<f64>();
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_consistent(pairs in prop::collection::vec((0usize..3, 0usize..5, 0usize..5, 0usize..7, any::<u8>()), 1..60)) {
        let truth: Vec<[usize; 4]> = pairs.iter().map(|p| [p.0, p.1, p.2, p.3]).collect();
        let pred: Vec<[usize; 4]> = pairs.iter().map(|p| {
            let k = p.4 as usize;
            [(p.0 + k) % 3, (p.1 + k / 3) % 5, (p.2 + k % 2) % 5, (p.3 + k / 5) % 7]
        }).collect();
        let r = MetricsReport::new(&truth, &pred, 1, 1).unwrap();
        let mean = Task::ALL.iter().map(|&t| r.accuracy(t)).sum::<f64>() / 4.0;
        prop_assert!((r.mean_accuracy - mean).abs() < 1e-9);
        for t in &r.tasks {
            for (k, row) in t.confusion.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), t.per_class[k].support);
            }
            prop_assert_eq!(t.per_class.iter().map(|c| c.support).sum::<usize>(), truth.len());
            prop_assert!((0.0..=1.0).contains(&t.macro_f1));
            for (row, c) in t.normalized_confusion().iter().zip(&t.per_class) {
                if c.support > 0 {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mutual_information_is_bounded(x in prop::collection::vec(0usize..4, 1..200), shift in 0usize..4) {
        let y: Vec<usize> = x.iter().enumerate().map(|(i, v)| (v + shift * (i % 2)) % 4).collect();
        let h = |v: &[usize]| {
            let mut c = [0.0; 4];
            v.iter().for_each(|&a| c[a] += 1.0);
            let n = v.len() as f64;
            c.iter().filter(|&&k| k > 0.0).map(|k| -(k / n) * (k / n).ln()).sum::<f64>()
        };
        let mi = mutual_information(&x, &y, 4, 4);
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= h(&x).min(h(&y)) + 1e-9);
        prop_assert!((mutual_information(&x, &x, 4, 4) - h(&x)).abs() < 1e-9);
    }

    #[test]
    fn mirroring_twice_is_identity(c in 1usize..4, t in 1usize..4, h in 1usize..5, w in 1usize..6, seed in any::<u32>()) {
        let shape = ClipShape { channels: c, frames: t, height: h, width: w };
        let data: Vec<f32> = (0..shape.numel()).map(|i| (i as u32 ^ seed) as f32).collect();
        let clip = ViewClip::new(View::Face, shape, data).unwrap();
        prop_assert_eq!(mirror_clip(&mirror_clip(&clip)), clip);
    }

    #[test]
    fn psi_is_bounded(scale in 0.1f64..1e3, seed in any::<u64>()) {
        let spec = CtpcSpec::new(8, 4);
        let mut s = ParamStore::<f64>::new();
        spec.add_params(&mut s, seed).unwrap();
        let mut g = Graph::<f64>::eval();
        let p = s.bind(&mut g);
        let face: Vec<f64> = (0..24).map(|i| scale * ((i as f64) * 1.7 + seed as f64 % 13.0).sin()).collect();
        let body: Vec<f64> = face.iter().rev().map(|v| -v).collect();
        let f = g.constant(Tensor::from_f64([3, 8], &face).unwrap());
        let b = g.constant(Tensor::from_f64([3, 8], &body).unwrap());
        let out = spec.compute_psi(&mut g, &p, f, b).unwrap();
        prop_assert!(g.data(out.psi).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn config_snapshot_roundtrips(lr in 1e-6f64..1e-2, wd in 0.0f64..1e-2, batch in 1usize..64, seed in any::<u64>(), cs in 0.0f64..=1.0, abl in 0usize..16) {
        let mut rc = RunConfig::default();
        rc.train.lr_max = lr;
        rc.train.lr_min = lr / 10.0;
        rc.train.weight_decay = wd;
        rc.train.batch_size = batch;
        rc.train.seed = seed;
        rc.data.causal_strength = cs;
        let names: Vec<&str> = Ablation::NAMES.iter().enumerate().filter(|(i, _)| abl >> i & 1 == 1).map(|(_, n)| *n).collect();
        rc.ablation = Ablation::parse_list(&names).unwrap();
        prop_assert_eq!(RunConfig::parse(&rc.to_text()).unwrap(), rc);
    }

    #[test]
    fn checkpoint_roundtrips_bit_exact(seed in any::<u64>(), k in 2usize..6, abl in 0usize..16) {
        let names: Vec<&str> = Ablation::NAMES.iter().enumerate().filter(|(i, _)| abl >> i & 1 == 1).map(|(_, n)| *n).collect();
        let cfg = ModelConfig { d_c: 8, d_f: 8, d_z: 8, d_t: 4, d_e: 4, d_psi: 4, heads: 2, head_hidden: 4, scene_hidden: 4, adv_hidden: 4, domain_k: k, ..Default::default() };
        let m = CauPsi::new(cfg, Ablation::parse_list(&names).unwrap()).unwrap();
        let ck = Checkpoint::new(&m, m.init_params(seed).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.instantiate().unwrap(), m);
        prop_assert_eq!(back, ck);
    }
}
