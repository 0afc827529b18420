//! Run directories and the file outputs of training, evaluation, conditioning
//! export and parameter reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::chain::Task;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{CaupsiError, Result};
use crate::model::{param_summary, CauPsi};
use crate::train::{encode_split, predict, train, EncodedSplit, MetricsReport, Predictions, TrainOutcome};
use crate::view::EncoderBank;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DOMAINS_FILE: &str = "domains.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CaupsiError::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| CaupsiError::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CaupsiError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CaupsiError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CaupsiError::io(path, e))
}

/// Trains per `rc` on the dataset at `data_dir` and fills `out` with the config
/// snapshot, per-epoch log, best EMA checkpoint, domain assignments and a summary.
pub fn train_run(rc: &RunConfig, data_dir: &Path, out: &Path, mut on_epoch: impl FnMut(&str)) -> Result<TrainOutcome> {
    rc.validate()?;
    let data = Dataset::load(data_dir)?;
    write(&out.join(CONFIG_FILE), &rc.to_text())?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| CaupsiError::io(&log_path, e))?;
    let mut log_err = None;
    let outcome = train(&data, &rc.model, rc.ablation, &rc.train, |line| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log_err = Some(e);
            }
        }
        on_epoch(line);
    })?;
    if let Some(e) = log_err {
        return Err(CaupsiError::io(&log_path, e));
    }

    Checkpoint::new(&outcome.model, outcome.best.clone()).save(&out.join(CHECKPOINT_FILE))?;

    let mut dom = String::from("sample_id\tdomain\n");
    for (id, d) in &outcome.domain_assignments {
        let _ = writeln!(dom, "{id}\t{d}");
    }
    write(&out.join(DOMAINS_FILE), &dom)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "best_epoch = {}", outcome.best_epoch);
    let _ = writeln!(summary, "epochs_run = {}", outcome.epochs_run);
    let _ = writeln!(summary, "domain_k = {}", outcome.domains.k);
    let _ = writeln!(summary, "domain_silhouette = {:.6}", outcome.domains.silhouette);
    let _ = writeln!(summary, "ablation = {}", rc.ablation);
    let _ = writeln!(summary, "psi_forced_zero = {}", rc.ablation.psi_forced_zero());
    for line in outcome.best_val.to_text().lines() {
        let _ = writeln!(summary, "val_{line}");
    }
    write(&out.join(SUMMARY_FILE), &summary)?;
    Ok(outcome)
}

/// Everything computed by evaluating a checkpoint on one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: CauPsi,
    pub encoded: EncodedSplit,
    pub predictions: Predictions,
    pub report: MetricsReport,
}

/// Eval-mode pass of the checkpoint's weights over `split`. Clips are encoded
/// with the encoder weights stored in the checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, split: Split, batch: usize) -> Result<Evaluation> {
    let model = ck.instantiate()?;
    let c = &model.cfg;
    if data.shape.channels != c.channels || data.shape.height != c.height || data.shape.width != c.width {
        return Err(CaupsiError::Config(format!(
            "checkpoint expects {}x*x{}x{} clips but the dataset has {}",
            c.channels,
            c.height,
            c.width,
            data.shape.descriptor()
        )));
    }
    let bank = EncoderBank::from_params(&ck.params, c.height, c.width)?;
    let encoded = encode_split(data, split, &bank)?;
    let predictions = predict(&model, &ck.params, &encoded, batch)?;
    let report = MetricsReport::new(&encoded.labels, &predictions.pred, ck.params.trainable_count(), ck.params.frozen_count())?;
    Ok(Evaluation {
        model,
        encoded,
        predictions,
        report,
    })
}

/// `metrics.txt`, `per_class.csv` and one `confusion_<task>.csv` per task.
pub fn write_eval_reports(report: &MetricsReport, out: &Path) -> Result<()> {
    write(&out.join("metrics.txt"), &report.to_text())?;
    write(&out.join("per_class.csv"), &report.per_class_csv())?;
    for t in Task::ALL {
        write(&out.join(format!("confusion_{}.csv", t.name())), &report.confusion_csv(t))?;
    }
    Ok(())
}

/// Per-task class means of the conditioning signal; classes absent from the
/// split are omitted. Returns `(class, count, mean)` rows per task.
pub fn psi_class_means(labels: &[[usize; 4]], psi: &[f64], d: usize) -> [Vec<(usize, usize, Vec<f64>)>; 4] {
    Task::ALL.map(|t| {
        let c = t.num_classes();
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for (l, row) in labels.iter().zip(psi.chunks(d)) {
            let k = l[t.index()];
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(row) {
                *s += v;
            }
        }
        (0..c)
            .filter(|&k| counts[k] > 0)
            .map(|k| (k, counts[k], sums[k].iter().map(|s| s / counts[k] as f64).collect()))
            .collect()
    })
}

/// Largest L-infinity distance between any two class-mean rows of one task.
pub fn max_pairwise_linf(rows: &[(usize, usize, Vec<f64>)]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let d = a.2.iter().zip(&b.2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            best = best.max(d);
        }
    }
    best
}

/// Writes `psi_raw.csv` and `psi_class_means_<task>.csv`. Refuses checkpoints
/// whose conditioning signal was ablated.
pub fn psi_export(ck: &Checkpoint, data: &Dataset, split: Split, out: &Path, batch: usize) -> Result<Evaluation> {
    if ck.ablation.psi_forced_zero() {
        return Err(CaupsiError::Contract(format!(
            "checkpoint was trained with ablation '{}'; its conditioning signal is identically zero and cannot be exported",
            ck.ablation
        )));
    }
    let ev = evaluate_checkpoint(ck, data, split, batch)?;
    let d = ev.model.cfg.d_psi;
    let psi = &ev.predictions.psi;

    let cols: Vec<String> = (0..d).map(|j| format!("psi_{j}")).collect();
    let mut raw = format!("sample_id,{},tcr,vcr,der,dbr\n", cols.join(","));
    for (i, (id, row)) in ev.encoded.ids.iter().zip(psi.chunks(d)).enumerate() {
        let vals: Vec<String> = row.iter().map(|&v| (v as f32).to_string()).collect();
        let l = ev.encoded.labels[i];
        let _ = writeln!(raw, "{id},{},{},{},{},{}", vals.join(","), l[0], l[1], l[2], l[3]);
    }
    write(&out.join("psi_raw.csv"), &raw)?;

    let means = psi_class_means(&ev.encoded.labels, psi, d);
    for t in Task::ALL {
        let mut s = format!("class,count,{}\n", cols.join(","));
        for (k, n, m) in &means[t.index()] {
            let vals: Vec<String> = m.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "{},{n},{}", t.class_names()[*k], vals.join(","));
        }
        write(&out.join(format!("psi_class_means_{}.csv", t.name())), &s)?;
    }
    Ok(ev)
}

/// Trainable and frozen parameter counts per module path, then totals.
pub fn report_text(ck: &Checkpoint) -> String {
    let rows = param_summary(&ck.params);
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut s = format!("ablation = {}\n{:<w$}  {:>10}  {:>10}\n", ck.ablation, "module", "trainable", "frozen");
    for (m, t, f) in &rows {
        let _ = writeln!(s, "{m:<w$}  {t:>10}  {f:>10}");
    }
    let _ = writeln!(s, "total_trainable = {}", ck.params.trainable_count());
    let _ = writeln!(s, "total_frozen = {}", ck.params.frozen_count());
    let _ = writeln!(s, "total = {}", ck.params.trainable_count() + ck.params.frozen_count());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_means_and_distance() {
        let labels = vec![[0, 0, 0, 0], [0, 1, 0, 0], [1, 1, 0, 0]];
        let psi = vec![0.0, 1.0, 0.5, 0.0, -1.0, 0.25];
        let m = psi_class_means(&labels, &psi, 2);
        assert_eq!(m[0].len(), 2);
        assert_eq!(m[0][0], (0, 2, vec![0.25, 0.5]));
        assert_eq!(m[0][1], (1, 1, vec![-1.0, 0.25]));
        assert_eq!(m[2].len(), 1);
        assert!((max_pairwise_linf(&m[0]) - 1.25).abs() < 1e-12);
        assert_eq!(max_pairwise_linf(&m[2]), 0.0);
    }

    #[test]
    fn refuses_non_empty_dir() {
        let d = tempfile::tempdir().unwrap();
        prepare_out_dir(d.path(), false).unwrap();
        fs::write(d.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_out_dir(d.path(), false), Err(CaupsiError::Config(_))));
        prepare_out_dir(d.path(), true).unwrap();
        prepare_out_dir(&d.path().join("new/sub"), false).unwrap();
    }
}
