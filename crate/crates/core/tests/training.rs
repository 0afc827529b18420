mod common;

use caupsi::chain::Task;
use caupsi::checkpoint::Checkpoint;
use caupsi::config::RunConfig;
use caupsi::data::{generate, Dataset, GeneratorConfig, Split};
use caupsi::model::{Ablation, ModelConfig};
use caupsi::objective::{total_loss, LossConfig, MixTarget};
use caupsi::run::{evaluate_checkpoint, train_run, CHECKPOINT_FILE, CONFIG_FILE, DOMAINS_FILE, LOG_FILE};
use caupsi::tensor::{Graph, Tensor};
use common::*;

#[test]
fn accumulated_micro_batches_match_one_large_batch() {
    let e32 = accumulation_error::<f32>(16, 4, 1);
    let e64 = accumulation_error::<f64>(16, 4, 1);
    assert!(e32 < 1e-4, "f32 {e32}");
    assert!(e64 < 1e-6, "f64 {e64}");
}

#[test]
fn mixed_loss_is_convex_combination_of_single_losses() {
    let probs: [Vec<f64>; 4] = Task::ALL.map(|t| {
        let c = t.num_classes();
        (0..3 * c).map(|i| (i * 7 % 11) as f64 + 1.0).collect()
    });
    let normalised: [Vec<f64>; 4] = std::array::from_fn(|t| {
        let c = Task::ALL[t].num_classes();
        probs[t].chunks(c).flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        }).collect()
    });
    let loss = nonuniform_loss();
    let eval = |targets: [Vec<MixTarget>; 4]| {
        let mut g = Graph::<f64>::eval();
        let vars: [_; 4] = std::array::from_fn(|t| {
            let c = Task::ALL[t].num_classes();
            g.constant(Tensor::from_f64([3, c], &normalised[t]).unwrap())
        });
        total_loss(&mut g, &vars, &targets, None, &loss).unwrap().1.total
    };
    let a = [0usize, 1, 2];
    let b = [2usize, 0, 1];
    for lam in [0.0, 0.3, 0.77, 1.0] {
        let mixed = eval(std::array::from_fn(|_| (0..3).map(|i| MixTarget { a: a[i], b: b[i], lam }).collect()));
        let la = eval(std::array::from_fn(|_| a.iter().map(|&y| MixTarget::single(y)).collect()));
        let lb = eval(std::array::from_fn(|_| b.iter().map(|&y| MixTarget::single(y)).collect()));
        assert!((mixed - (lam * la + (1.0 - lam) * lb)).abs() < 1e-6, "lam {lam}");
    }
}

fn tiny_run_config(seed: u64) -> RunConfig {
    let mut rc = RunConfig {
        model: toy_config(),
        ..Default::default()
    };
    for (k, v) in [
        ("train.max_epochs", "3"),
        ("train.warmup_epochs", "1"),
        ("train.batch_size", "8"),
        ("train.accum_steps", "2"),
        ("train.domain_k_max", "3"),
        ("train.eval_batch", "32"),
    ] {
        rc.set(k, v).unwrap();
    }
    rc.train.seed = seed;
    // fitted by clustering during training, so not part of the snapshot
    rc.model.domain_k = ModelConfig::default().domain_k;
    rc
}

fn strip_wall(log: &str) -> Vec<String> {
    log.lines().map(|l| l.split(" wall_ms=").next().unwrap().to_string()).collect()
}

#[test]
fn training_is_deterministic_and_run_dir_is_self_contained() {
    let data = tempfile::tempdir().unwrap();
    generate(
        &GeneratorConfig {
            n_samples: 60,
            seed: 2,
            ..Default::default()
        },
        data.path(),
    )
    .unwrap();
    let rc = tiny_run_config(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = train_run(&rc, data.path(), a.path(), |_| {}).unwrap();
    train_run(&rc, data.path(), b.path(), |_| {}).unwrap();
    assert_eq!(oa.epochs_run, 3);
    for f in [CONFIG_FILE, CHECKPOINT_FILE, DOMAINS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log_a = std::fs::read_to_string(a.path().join(LOG_FILE)).unwrap();
    let log_b = std::fs::read_to_string(b.path().join(LOG_FILE)).unwrap();
    assert_eq!(strip_wall(&log_a), strip_wall(&log_b));
    assert_eq!(log_a.lines().count(), 3);

    let snapshot = RunConfig::load(&a.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(snapshot, rc);

    let ds = Dataset::load(data.path()).unwrap();
    let ck = Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap();
    let ev1 = evaluate_checkpoint(&ck, &ds, Split::Val, 7).unwrap();
    let ev2 = evaluate_checkpoint(&ck, &ds, Split::Val, 64).unwrap();
    assert_eq!(ev1.report, ev2.report);
    assert_eq!(ev1.report.tasks, oa.best_val.tasks);
    assert_eq!(ev1.report.mean_accuracy, oa.best_val.mean_accuracy);
}

#[test]
fn ablated_run_records_forced_zero_psi() {
    let data = tempfile::tempdir().unwrap();
    generate(
        &GeneratorConfig {
            n_samples: 30,
            seed: 3,
            ..Default::default()
        },
        data.path(),
    )
    .unwrap();
    let mut rc = tiny_run_config(1);
    rc.train.max_epochs = 2;
    rc.ablation = Ablation::parse_list(&["facebody"]).unwrap();
    let out = tempfile::tempdir().unwrap();
    train_run(&rc, data.path(), out.path(), |_| {}).unwrap();
    let text = std::fs::read_to_string(out.path().join(CONFIG_FILE)).unwrap();
    assert!(text.contains("psi_forced_zero = true"));
    assert!(text.contains("ablation = facebody"));
    let ck = Checkpoint::load(&out.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(ck.ablation.facebody);
    let ds = Dataset::load(data.path()).unwrap();
    assert!(caupsi::run::psi_export(&ck, &ds, Split::Test, out.path(), 16).is_err());
}

#[test]
fn loss_config_defaults_validate() {
    LossConfig::default().validate().unwrap();
    RunConfig::default().validate().unwrap();
}
