//! Per-epoch metrics and the run summary.
//!
//! `metrics.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `epoch` | epochs completed (1-based) |
//! | `lr` | learning rate used in the epoch |
//! | `train_loss` | mean minibatch loss over the epoch (on the training objective) |
//! | `test_accuracy` | clean test accuracy after the epoch |
//! | `robust_accuracy` | robust test accuracy, empty when not evaluated |
//! | `c_hat` | unclamped loss-covariance estimate from the epoch's snapshot, empty if undefined |
//! | `c_smoothed` | smoothed weight after the snapshot, empty for non-adaptive optimizers |
//! | `weight` | effective correction weight `γ·c` used during the epoch |
//! | `anchor_correlation` | gradient correlation between consecutive anchors, empty unless traced |
//! | `grad_norm` | mean L2 norm of the step directions |
//! | `sparsity` | weight sparsity during the epoch |
//! | `fault` | empty, or why the run stopped |
//!
//! Reals are written in shortest round-trip form, so the file is a bit-exact
//! record. Wall-clock time is kept out of it and reported in `summary.json`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "lr",
    "train_loss",
    "test_accuracy",
    "robust_accuracy",
    "c_hat",
    "c_smoothed",
    "weight",
    "anchor_correlation",
    "grad_norm",
    "sparsity",
    "fault",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub robust_accuracy: Option<f64>,
    pub c_hat: Option<f64>,
    pub c_smoothed: Option<f64>,
    pub weight: f64,
    pub anchor_correlation: Option<f64>,
    pub grad_norm: f64,
    pub sparsity: f64,
    pub fault: Option<String>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Argument(format!("metrics csv: {e}"))
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.test_accuracy.to_string(),
            opt(r.robust_accuracy),
            opt(r.c_hat),
            opt(r.c_smoothed),
            r.weight.to_string(),
            opt(r.anchor_correlation),
            r.grad_norm.to_string(),
            r.sparsity.to_string(),
            r.fault.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Argument(format!("metrics csv: {e}")))
}

pub fn metrics_to_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_metrics(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Argument(format!(
            "unexpected metrics header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let real = |s: &str, col: &str, line: usize| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Argument(format!("metrics line {line}: bad `{col}` value `{s}`")))
    };
    let maybe = |s: &str, col: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            real(s, col, line).map(Some)
        }
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Argument(format!("metrics line {line}: expected {} columns", METRICS_HEADER.len())));
        }
        out.push(MetricsRecord {
            epoch: rec[0].parse().map_err(|_| Error::Argument(format!("metrics line {line}: bad epoch")))?,
            lr: real(&rec[1], "lr", line)?,
            train_loss: real(&rec[2], "train_loss", line)?,
            test_accuracy: real(&rec[3], "test_accuracy", line)?,
            robust_accuracy: maybe(&rec[4], "robust_accuracy", line)?,
            c_hat: maybe(&rec[5], "c_hat", line)?,
            c_smoothed: maybe(&rec[6], "c_smoothed", line)?,
            weight: real(&rec[7], "weight", line)?,
            anchor_correlation: maybe(&rec[8], "anchor_correlation", line)?,
            grad_norm: real(&rec[9], "grad_norm", line)?,
            sparsity: real(&rec[10], "sparsity", line)?,
            fault: (!rec[11].is_empty()).then(|| rec[11].to_string()),
        });
    }
    Ok(out)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub code_version: String,
    /// Git-style blob hash (SHA-256) of `code_version`.
    pub code_hash: String,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    /// Layer widths, input to output.
    pub model_widths: Vec<usize>,
    pub optimizer: String,
    pub objective: String,
    pub seed: u64,
    pub epochs_planned: usize,
    pub epochs_completed: usize,
    pub final_train_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_robust_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub fault: Option<String>,
    /// Wall-clock seconds per epoch run in this process (resumed epochs excluded).
    pub epoch_seconds: Vec<f64>,
}

impl Summary {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("summary.json: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                epoch: 1,
                lr: 0.1,
                train_loss: 1.0 / 3.0,
                test_accuracy: 0.75,
                weight: 0.0,
                grad_norm: 2.5e-17,
                sparsity: 0.9,
                ..MetricsRecord::default()
            },
            MetricsRecord {
                epoch: 2,
                lr: 0.1,
                train_loss: f64::NAN,
                test_accuracy: 0.5,
                robust_accuracy: Some(0.25),
                c_hat: Some(-0.125),
                c_smoothed: Some(0.0),
                weight: 0.0,
                anchor_correlation: Some(0.9),
                grad_norm: 1.0,
                sparsity: 0.9,
                fault: Some("non-finite gradient, epoch 2".into()),
            },
        ]
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let text = metrics_to_string(&sample());
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        let back = read_metrics(text.as_bytes()).unwrap();
        assert_eq!(back[0], sample()[0]);
        assert!(back[1].train_loss.is_nan());
        assert_eq!(back[1].fault, sample()[1].fault);
        assert_eq!(metrics_to_string(&back), text);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_metrics("a,b\n1,2\n".as_bytes()).is_err());
    }
}
