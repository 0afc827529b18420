use std::fmt::Write as _;

use crate::chain::Task;
use crate::error::{CaupsiError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
}

impl TaskMetrics {
    pub fn from_predictions(task: Task, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let c = task.num_classes();
        if truth.is_empty() || truth.len() != pred.len() {
            return Err(CaupsiError::Data(format!("{task}: {} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut confusion = vec![vec![0usize; c]; c];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= c || p >= c {
                return Err(CaupsiError::Data(format!("{task}: class {t}/{p} out of range")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
        let mut per_class = Vec::with_capacity(c);
        let mut f1_sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
            let tp = confusion[k][k] as f64;
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if support > 0 || predicted > 0 {
                f1_sum += f1;
                present += 1;
            }
            per_class.push(ClassStats {
                precision,
                recall,
                f1,
                support,
            });
        }
        Ok(TaskMetrics {
            task,
            confusion,
            accuracy: correct as f64 / truth.len() as f64,
            macro_f1: f1_sum / present.max(1) as f64,
            per_class,
        })
    }

    /// Confusion rows divided by their support; empty rows stay zero.
    pub fn normalized_confusion(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let s: usize = row.iter().sum();
                row.iter().map(|&v| if s > 0 { v as f64 / s as f64 } else { 0.0 }).collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub tasks: [TaskMetrics; 4],
    pub mean_accuracy: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl MetricsReport {
    pub fn new(truth: &[[usize; 4]], pred: &[[usize; 4]], trainable_params: usize, frozen_params: usize) -> Result<Self> {
        let mut tasks = Vec::with_capacity(4);
        for t in Task::ALL {
            let y: Vec<usize> = truth.iter().map(|l| l[t.index()]).collect();
            let p: Vec<usize> = pred.iter().map(|l| l[t.index()]).collect();
            tasks.push(TaskMetrics::from_predictions(t, &y, &p)?);
        }
        let tasks: [TaskMetrics; 4] = tasks.try_into().expect("four tasks");
        let mean_accuracy = tasks.iter().map(|t| t.accuracy).sum::<f64>() / 4.0;
        Ok(MetricsReport {
            tasks,
            mean_accuracy,
            trainable_params,
            frozen_params,
        })
    }

    pub fn accuracy(&self, t: Task) -> f64 {
        self.tasks[t.index()].accuracy
    }

    /// `key = value` summary lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            let _ = writeln!(s, "acc_{} = {:.6}", t.task.name(), t.accuracy);
        }
        let _ = writeln!(s, "mean_acc = {:.6}", self.mean_accuracy);
        for t in &self.tasks {
            let _ = writeln!(s, "macro_f1_{} = {:.6}", t.task.name(), t.macro_f1);
        }
        let _ = writeln!(s, "trainable_params = {}", self.trainable_params);
        let _ = writeln!(s, "frozen_params = {}", self.frozen_params);
        s
    }

    /// `task,class,precision,recall,f1,support` rows with header.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("task,class,precision,recall,f1,support\n");
        for t in &self.tasks {
            for (name, c) in t.task.class_names().iter().zip(&t.per_class) {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6},{}",
                    t.task.name(),
                    name,
                    c.precision,
                    c.recall,
                    c.f1,
                    c.support
                );
            }
        }
        s
    }

    /// Row-normalised confusion matrix with class names, 6-decimal fixed point.
    pub fn confusion_csv(&self, task: Task) -> String {
        let t = &self.tasks[task.index()];
        let names = task.class_names();
        let mut s = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(t.normalized_confusion()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let truth: Vec<[usize; 4]> = (0..20).map(|i| [i % 3, i % 5, (i + 1) % 5, i % 7]).collect();
        let r = MetricsReport::new(&truth, &truth, 10, 5).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        for t in &r.tasks {
            assert_eq!(t.macro_f1, 1.0);
        }
    }

    #[test]
    fn macro_f1_matches_brute_force() {
        let y = [0, 0, 1, 1, 2, 2, 2, 0, 1, 2];
        let p = [0, 1, 1, 1, 2, 0, 2, 0, 2, 2];
        let m = TaskMetrics::from_predictions(Task::Tcr, &y, &p).unwrap();
        let mut f1s = Vec::new();
        for k in 0..3 {
            let tp = y.iter().zip(&p).filter(|(a, b)| **a == k && **b == k).count() as f64;
            let fp = y.iter().zip(&p).filter(|(a, b)| **a != k && **b == k).count() as f64;
            let fn_ = y.iter().zip(&p).filter(|(a, b)| **a == k && **b != k).count() as f64;
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
        assert!((m.macro_f1 - f1s.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        for (row, k) in m.confusion.iter().zip(0..) {
            assert_eq!(row.iter().sum::<usize>(), y.iter().filter(|&&v| v == k).count());
        }
        for row in m.normalized_confusion() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
