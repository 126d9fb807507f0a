//! Side-by-side comparison of finished runs.
//!
//! Two tables are produced, each relative to the first run:
//! the metric at fixed epoch budgets, and the first epoch at which the metric
//! reaches each threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics, MetricsRecord, Summary};
use super::run::{METRICS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TestAccuracy,
    RobustAccuracy,
    TrainLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::TestAccuracy => "test_accuracy",
            Metric::RobustAccuracy => "robust_accuracy",
            Metric::TrainLoss => "train_loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "test_accuracy" => Ok(Metric::TestAccuracy),
            "robust_accuracy" => Ok(Metric::RobustAccuracy),
            "train_loss" => Ok(Metric::TrainLoss),
            _ => Err(Error::Argument(format!(
                "unknown metric `{s}` (expected test_accuracy, robust_accuracy or train_loss)"
            ))),
        }
    }

    fn value(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            Metric::TestAccuracy => Some(r.test_accuracy),
            Metric::RobustAccuracy => r.robust_accuracy,
            Metric::TrainLoss => Some(r.train_loss),
        }
    }

    /// Whether reaching a threshold means going at or below it.
    fn lower_is_better(self) -> bool {
        self == Metric::TrainLoss
    }

    fn default_thresholds(self) -> Vec<f64> {
        match self {
            Metric::TrainLoss => vec![1.0, 0.5, 0.1],
            _ => vec![0.5, 0.75, 0.9],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub label: String,
    pub dir: PathBuf,
    pub summary: Summary,
    pub metrics: Vec<MetricsRecord>,
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let summary = Summary::from_json(&read(SUMMARY_FILE)?)?;
    let metrics = read_metrics(read(METRICS_FILE)?.as_bytes())?;
    let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunRecord { label, dir: dir.to_path_buf(), summary, metrics })
}

/// First epoch whose value reaches `threshold`.
pub fn epochs_to_threshold(metrics: &[MetricsRecord], metric: Metric, threshold: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|r| {
            metric.value(r).is_some_and(|v| if metric.lower_is_better() { v <= threshold } else { v >= threshold })
        })
        .map(|r| r.epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub epoch: usize,
    pub values: Vec<Option<f64>>,
    /// `value − first run's value`.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub epochs: Vec<Option<usize>>,
    /// `epochs − first run's epochs`.
    pub deltas: Vec<Option<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    pub labels: Vec<String>,
    pub budgets: Vec<BudgetRow>,
    pub thresholds: Vec<ThresholdRow>,
}

fn check_compatible(runs: &[RunRecord]) -> Result<()> {
    let first = &runs[0];
    for r in &runs[1..] {
        if r.summary.dataset_fingerprint != first.summary.dataset_fingerprint {
            return Err(Error::Compare(format!(
                "{} and {} were trained on different datasets (fingerprints {} vs {})",
                first.label, r.label, first.summary.dataset_fingerprint, r.summary.dataset_fingerprint
            )));
        }
        if r.summary.model_widths != first.summary.model_widths {
            return Err(Error::Compare(format!(
                "{} and {} use different models ({:?} vs {:?})",
                first.label, r.label, first.summary.model_widths, r.summary.model_widths
            )));
        }
    }
    Ok(())
}

/// Build both tables. Empty `budgets` means the quarter points of the longest
/// run; empty `thresholds` picks metric-specific defaults.
pub fn compare(runs: &[RunRecord], metric: Metric, budgets: &[usize], thresholds: &[f64]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::Compare("no runs given".into()));
    }
    check_compatible(runs)?;
    let longest = runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
    let mut budgets = if budgets.is_empty() {
        (1..=4).map(|q| longest * q / 4).filter(|&e| e > 0).collect()
    } else {
        budgets.to_vec()
    };
    budgets.dedup();
    let thresholds = if thresholds.is_empty() { metric.default_thresholds() } else { thresholds.to_vec() };

    let budget_rows = budgets
        .iter()
        .map(|&epoch| {
            let values: Vec<Option<f64>> = runs
                .iter()
                .map(|r| r.metrics.iter().find(|m| m.epoch == epoch).and_then(|m| metric.value(m)))
                .collect();
            let deltas = values.iter().map(|v| Some(v.as_ref()? - values[0]?)).collect();
            BudgetRow { epoch, values, deltas }
        })
        .collect();
    let threshold_rows = thresholds
        .iter()
        .map(|&threshold| {
            let epochs: Vec<Option<usize>> =
                runs.iter().map(|r| epochs_to_threshold(&r.metrics, metric, threshold)).collect();
            let deltas = epochs.iter().map(|e| Some(e.as_ref()?.to_owned() as i64 - epochs[0]? as i64)).collect();
            ThresholdRow { threshold, epochs, deltas }
        })
        .collect();
    Ok(Comparison {
        metric,
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        budgets: budget_rows,
        thresholds: threshold_rows,
    })
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "-".into())
}

fn fixed(v: &Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn signed(v: &Option<f64>) -> String {
    v.map(|x| format!("{x:+.4}")).unwrap_or_else(|| "-".into())
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    };
    line(header, &mut out);
    for r in rows {
        line(r, &mut out);
    }
    out
}

impl Comparison {
    fn header(&self, first: &str) -> Vec<String> {
        let mut h = vec![first.to_string()];
        h.extend(self.labels.iter().cloned());
        h.extend(self.labels.iter().skip(1).map(|l| format!("Δ{l}")));
        h
    }

    pub fn budget_csv(&self) -> String {
        let mut out = String::from("epoch");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        for l in &self.labels {
            write!(out, ",delta_{l}").unwrap();
        }
        out.push('\n');
        for r in &self.budgets {
            let mut cells = vec![r.epoch.to_string()];
            cells.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            cells.extend(r.deltas.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn threshold_csv(&self) -> String {
        let mut out = String::from("threshold");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        for l in &self.labels {
            write!(out, ",delta_{l}").unwrap();
        }
        out.push('\n');
        for r in &self.thresholds {
            let mut cells = vec![r.threshold.to_string()];
            cells.extend(r.epochs.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            cells.extend(r.deltas.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Both tables as aligned plain text; deltas are against the first run.
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .budgets
            .iter()
            .map(|r| {
                let mut c = vec![r.epoch.to_string()];
                c.extend(r.values.iter().map(fixed));
                c.extend(r.deltas.iter().skip(1).map(signed));
                c
            })
            .collect();
        let mut out = format!("{} at epoch budget\n", self.metric.name());
        out += &table(&self.header("epoch"), &rows);
        let rows: Vec<Vec<String>> = self
            .thresholds
            .iter()
            .map(|r| {
                let mut c = vec![r.threshold.to_string()];
                c.extend(r.epochs.iter().map(cell));
                c.extend(r.deltas.iter().skip(1).map(|d| d.map(|x| format!("{x:+}")).unwrap_or_else(|| "-".into())));
                c
            })
            .collect();
        out += &format!("\nepochs to reach {}\n", self.metric.name());
        out += &table(&self.header("threshold"), &rows);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(label: &str, accs: &[f64]) -> RunRecord {
        RunRecord {
            label: label.into(),
            dir: PathBuf::from(label),
            summary: Summary {
                code_version: String::new(),
                code_hash: String::new(),
                config_hash: String::new(),
                dataset_fingerprint: "abc".into(),
                model_widths: vec![2, 3],
                optimizer: "sgd".into(),
                objective: "standard".into(),
                seed: 0,
                epochs_planned: accs.len(),
                epochs_completed: accs.len(),
                final_train_loss: None,
                final_test_accuracy: None,
                final_robust_accuracy: None,
                best_test_accuracy: None,
                fault: None,
                epoch_seconds: Vec::new(),
            },
            metrics: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| MetricsRecord {
                    epoch: i + 1,
                    test_accuracy: a,
                    train_loss: 1.0 - a,
                    ..MetricsRecord::default()
                })
                .collect(),
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let a = run("a", &[0.3, 0.6, 0.8, 0.9]);
        let c = compare(&[a.clone(), a], Metric::TestAccuracy, &[], &[]).unwrap();
        assert!(c.budgets.iter().all(|r| r.deltas.iter().all(|d| *d == Some(0.0))));
        assert!(c.thresholds.iter().all(|r| r.deltas.iter().all(|d| *d == Some(0))));
    }

    #[test]
    fn dominating_run_gives_one_signed_deltas() {
        let a = run("a", &[0.3, 0.5, 0.7, 0.8]);
        let b = run("b", &[0.5, 0.8, 0.9, 0.95]);
        let c = compare(&[a, b], Metric::TestAccuracy, &[1, 2, 3, 4], &[0.5, 0.8]).unwrap();
        assert!(c.budgets.iter().all(|r| r.deltas[1].unwrap() > 0.0));
        assert!(c.thresholds.iter().all(|r| r.deltas[1].unwrap() < 0));
        let text = c.to_text();
        assert!(text.contains("epochs to reach test_accuracy"));
        assert!(c.budget_csv().starts_with("epoch,a,b,delta_a,delta_b\n"));
    }

    #[test]
    fn loss_thresholds_count_downward() {
        let a = run("a", &[0.3, 0.6, 0.8]);
        assert_eq!(epochs_to_threshold(&a.metrics, Metric::TrainLoss, 0.45), Some(2));
        assert_eq!(epochs_to_threshold(&a.metrics, Metric::TestAccuracy, 0.95), None);
    }

    #[test]
    fn refuses_different_datasets() {
        let a = run("a", &[0.3]);
        let mut b = run("b", &[0.3]);
        b.summary.dataset_fingerprint = "xyz".into();
        assert!(matches!(compare(&[a, b], Metric::TestAccuracy, &[], &[]), Err(Error::Compare(_))));
    }
}
