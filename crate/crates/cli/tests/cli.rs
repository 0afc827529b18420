use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn caupsi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caupsi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = caupsi(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

fn stat(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key} = "))).unwrap().split_whitespace().next().unwrap().parse().unwrap()
}

const TINY: &[&str] = &[
    "--set", "model.d_c=8", "--set", "model.d_f=8", "--set", "model.d_z=16", "--set", "model.d_t=4",
    "--set", "model.d_e=4", "--set", "model.d_psi=4", "--set", "model.heads=2", "--set", "model.head_hidden=8",
    "--set", "model.scene_hidden=4", "--set", "model.adv_hidden=4", "--set", "train.batch_size=8",
    "--set", "train.warmup_epochs=1", "--set", "train.domain_k_max=3",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--epochs", "2", "--seed", "3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = ok(&["gen-data", "--out", p(a.path()), "--n", "100", "--seed", "7", "--force"]);
    let sb = ok(&["gen-data", "--out", p(b.path()), "--n", "100", "--seed", "7", "--force"]);
    assert_eq!(sa, sb);
    assert!(sa.contains("samples = 100"));
    let m = |d: &Path| fs::read(d.join("manifest.tsv")).unwrap();
    assert_eq!(m(a.path()), m(b.path()));
}

#[test]
fn zero_causal_strength_decouples_labels() {
    let d = tempfile::tempdir().unwrap();
    let s = ok(&["gen-data", "--out", p(d.path()), "--n", "50", "--causal-strength", "0", "--force"]);
    assert!(stat(&s, "mi_der_dbr_10k") < 0.01, "{s}");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    assert_eq!(caupsi(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(caupsi(&[]).status.code(), Some(1));

    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("keep"), "x").unwrap();
    assert_eq!(caupsi(&["gen-data", "--out", p(d.path()), "--n", "10"]).status.code(), Some(2));
    assert_eq!(caupsi(&["train", "--data", p(d.path()), "--out", p(d.path())]).status.code(), Some(2));
    assert_eq!(caupsi(&["train", "--data", p(d.path()), "--out", p(&d.path().join("o")), "--set", "train.nope=1"]).status.code(), Some(2));
    assert_eq!(caupsi(&["train", "--data", p(&d.path().join("none")), "--out", p(&d.path().join("o2"))]).status.code(), Some(3));
    assert_eq!(caupsi(&["report", "--checkpoint", p(&d.path().join("keep"))]).status.code(), Some(3));
}

#[test]
fn train_eval_export_and_report() {
    let data = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", p(data.path()), "--n", "80", "--seed", "1", "--force"]);
    let run = tempfile::tempdir().unwrap();
    let log = train(data.path(), run.path(), &[]);
    assert!(log.contains("best_epoch = "));
    for f in ["config.txt", "metrics.log", "checkpoint.bin", "domains.tsv", "summary.txt"] {
        assert!(run.path().join(f).is_file(), "{f}");
    }
    let ck = run.path().join("checkpoint.bin");

    let ev = tempfile::tempdir().unwrap();
    let text = ok(&["eval", "--checkpoint", p(&ck), "--data", p(data.path()), "--split", "test", "--out", p(ev.path())]);
    let accs: Vec<f64> = ["tcr", "vcr", "der", "dbr"].iter().map(|t| stat(&text, &format!("acc_{t}"))).collect();
    assert!((stat(&text, "mean_acc") - accs.iter().sum::<f64>() / 4.0).abs() < 1e-5);

    let per_class = csv(&ev.path().join("per_class.csv"));
    assert_eq!(per_class[0], ["task", "class", "precision", "recall", "f1", "support"]);
    let mut supports: BTreeMap<String, usize> = BTreeMap::new();
    for row in &per_class[1..] {
        let v: Vec<f64> = row[2..5].iter().map(|x| x.parse().unwrap()).collect();
        let f1 = if v[0] + v[1] > 0.0 { 2.0 * v[0] * v[1] / (v[0] + v[1]) } else { 0.0 };
        assert!((f1 - v[2]).abs() < 2e-6, "{row:?}");
        *supports.entry(row[0].clone()).or_default() += row[5].parse::<usize>().unwrap();
    }
    let n_test = 16;
    assert!(supports.values().all(|&s| s == n_test), "{supports:?}");
    for t in ["tcr", "vcr", "der", "dbr"] {
        let conf = csv(&ev.path().join(format!("confusion_{t}.csv")));
        for row in &conf[1..] {
            let s: f64 = row[1..].iter().map(|x| x.parse::<f64>().unwrap()).sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-5, "{t} {row:?}");
        }
    }

    let px = tempfile::tempdir().unwrap();
    let out = ok(&["psi-export", "--checkpoint", p(&ck), "--data", p(data.path()), "--out", p(px.path())]);
    assert!(out.contains("samples = 16"));
    let raw = csv(&px.path().join("psi_raw.csv"));
    assert_eq!(raw[0][..5], ["sample_id", "psi_0", "psi_1", "psi_2", "psi_3"]);
    assert_eq!(raw.len(), 1 + n_test);
    let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for row in &raw[1..] {
        let psi: Vec<f64> = row[1..5].iter().map(|x| x.parse().unwrap()).collect();
        assert!(psi.iter().all(|v| (-1.0..=1.0).contains(v)));
        let g = groups.entry(row[7].parse().unwrap()).or_insert((0, vec![0.0; 4]));
        g.0 += 1;
        g.1.iter_mut().zip(&psi).for_each(|(a, b)| *a += b);
    }
    let means = csv(&px.path().join("psi_class_means_der.csv"));
    assert_eq!(means.len() - 1, groups.len());
    for (row, (_, (n, sum))) in means[1..].iter().zip(&groups) {
        assert_eq!(row[1].parse::<usize>().unwrap(), *n);
        for (cell, s) in row[2..].iter().zip(sum) {
            assert!((cell.parse::<f64>().unwrap() - s / *n as f64).abs() < 1e-6);
        }
    }

    let rep = ok(&["report", "--checkpoint", p(&ck)]);
    let total = stat(&rep, "total") as usize;
    assert_eq!(total, stat(&rep, "total_trainable") as usize + stat(&rep, "total_frozen") as usize);
    assert!(rep.contains("adversary"));
}

#[test]
fn psi_export_refuses_ablated_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", p(data.path()), "--n", "40", "--seed", "2", "--force"]);
    let run = tempfile::tempdir().unwrap();
    train(data.path(), run.path(), &["--ablate", "ctpc"]);
    assert!(fs::read_to_string(run.path().join("config.txt")).unwrap().contains("psi_forced_zero = true"));
    let px = tempfile::tempdir().unwrap();
    let out = caupsi(&["psi-export", "--checkpoint", p(&run.path().join("checkpoint.bin")), "--data", p(data.path()), "--out", p(px.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!px.path().join("psi_raw.csv").exists());
}
