//! Gradient variance and correlation probes around a checkpoint.
//!
//! Perturbations touch every weight, pruned ones included. Statistics are
//! taken over active (unmasked) coordinates only, since pruned coordinates
//! have identically zero masked gradients.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::{self, Dataset, ParamSet};
use crate::rng::RngStream;
use crate::sparsity::{apply_mask_in_place, Mask};

/// Default perturbation standard deviation.
pub const DEFAULT_PERTURBATION_STD: f64 = 0.015;
/// Default number of replicates per checkpoint.
pub const DEFAULT_REPLICATES: usize = 3;

fn active_values(g: &ParamSet, mask: &Mask) -> Vec<f64> {
    let mut out = Vec::new();
    for (p, m) in g.iter().zip(mask.as_params().iter()) {
        for (&x, &keep) in p.value.data().iter().zip(m.value.data()) {
            if keep == 1.0 {
                out.push(x);
            }
        }
    }
    out
}

/// Pearson correlation of two same-layout vectors over the mask's active entries.
pub fn masked_pearson(a: &ParamSet, b: &ParamSet, mask: &Mask) -> Result<f64> {
    if !a.same_layout(b) || !a.same_layout(mask.as_params()) {
        return Err(Error::Dimension("correlation operands have different layouts".into()));
    }
    pearson(&active_values(a, mask), &active_values(b, mask))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension("correlation operands differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two coordinates".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().fold(0.0, |s, &v| s + v) / n;
    let my = y.iter().fold(0.0, |s, &v| s + v) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a gradient vector has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `params + N(0, std²)` on every entry, pruned ones included. The perturbed
/// network is evaluated as is; only gradient statistics are restricted to
/// active coordinates.
pub fn perturb(params: &ParamSet, std: f64, rng: &mut RngStream) -> Result<ParamSet> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("perturbation std must be finite and >= 0, got {std}")));
    }
    let mut out = params.clone();
    if std > 0.0 {
        for p in out.iter_mut() {
            for x in p.value.data_mut() {
                *x += std * rng.next_gaussian();
            }
        }
    }
    Ok(out)
}

fn masked_full_gradient(params: &ParamSet, mask: &Mask, data: &Dataset) -> ParamSet {
    let mut g = nn::full_gradient(params, data);
    apply_mask_in_place(&mut g, mask);
    g
}

/// Correlation between full-dataset gradients at `params` and at a Gaussian
/// perturbation of `params`.
pub fn gradient_correlation_under_perturbation(
    params: &ParamSet,
    mask: &Mask,
    dataset: &Dataset,
    std: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let perturbed = perturb(params, std, rng)?;
    let g0 = masked_full_gradient(params, mask, dataset);
    let g1 = masked_full_gradient(&perturbed, mask, dataset);
    masked_pearson(&g0, &g1, mask)
}

/// Mean over active coordinates of the across-batch (population) variance of
/// minibatch gradients at perturbed parameters. Batches are the consecutive
/// disjoint chunks `[0, n), [n, 2n), ...`; a short final chunk is dropped.
pub fn gradient_variance_under_perturbation(
    params: &ParamSet,
    mask: &Mask,
    dataset: &Dataset,
    batch_size: usize,
    std: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Argument(format!("batch size {batch_size} must lie in [1, {}]", dataset.len())));
    }
    let perturbed = perturb(params, std, rng)?;
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let grads: Vec<Vec<f64>> = ids
        .chunks_exact(batch_size)
        .map(|c| {
            let (_, mut g) = nn::loss_and_grad(&perturbed, &dataset.batch(c));
            apply_mask_in_place(&mut g, mask);
            active_values(&g, mask)
        })
        .collect();
    let b = grads.len() as f64;
    let dims = grads[0].len();
    if dims == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..dims {
        let mean = grads.iter().fold(0.0, |s, g| s + g[j]) / b;
        total += grads.iter().fold(0.0, |s, g| s + (g[j] - mean) * (g[j] - mean)) / b;
    }
    Ok(total / dims as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Variance,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub sparsity: f64,
    pub replicate: usize,
    pub statistic: f64,
}

/// One statistic per (sparsity level, replicate).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub measure: Measure,
    pub perturbation_std: f64,
    pub seed: u64,
    pub rows: Vec<DiagnosticRow>,
}

impl DiagnosticReport {
    pub fn new(measure: Measure, perturbation_std: f64, seed: u64) -> Self {
        DiagnosticReport { measure, perturbation_std, seed, rows: Vec::new() }
    }

    /// Measure one checkpoint `replicates` times, each replicate on its own substream.
    #[allow(clippy::too_many_arguments)]
    pub fn add_checkpoint(
        &mut self,
        params: &ParamSet,
        mask: &Mask,
        dataset: &Dataset,
        batch_size: usize,
        replicates: usize,
        level_index: u64,
    ) -> Result<()> {
        let root = RngStream::new(self.seed).substream(level_index);
        for r in 0..replicates {
            let mut rng = root.substream(r as u64);
            let statistic = match self.measure {
                Measure::Variance => gradient_variance_under_perturbation(
                    params,
                    mask,
                    dataset,
                    batch_size,
                    self.perturbation_std,
                    &mut rng,
                )?,
                Measure::Correlation => {
                    gradient_correlation_under_perturbation(params, mask, dataset, self.perturbation_std, &mut rng)?
                }
            };
            self.rows.push(DiagnosticRow { sparsity: mask.sparsity(), replicate: r, statistic });
        }
        Ok(())
    }

    /// Sparsity levels in first-seen order.
    pub fn levels(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.sparsity) {
                out.push(r.sparsity);
            }
        }
        out
    }

    /// Arithmetic mean over the replicates of one level.
    pub fn mean_at(&self, sparsity: f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.sparsity == sparsity).map(|r| r.statistic).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// CSV with header `sparsity,replicate,statistic,std,seed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Argument(format!("writing diagnostics csv: {e}"));
        w.write_record(["sparsity", "replicate", "statistic", "std", "seed"]).map_err(wrap)?;
        for r in &self.rows {
            w.write_record([
                r.sparsity.to_string(),
                r.replicate.to_string(),
                r.statistic.to_string(),
                self.perturbation_std.to_string(),
                self.seed.to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Argument(format!("writing diagnostics csv: {e}")))
    }
}

/// Fraction of steps where the first differences of `a` and `b` have the same
/// sign (both zero counts as agreement). `None` for fewer than two points.
pub fn sign_agreement(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let agree = (1..n).filter(|&i| sign(a[i] - a[i - 1]) == sign(b[i] - b[i - 1])).count();
    Some(agree as f64 / (n - 1) as f64)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, BlobsSpec, ModelSpec};
    use crate::sparsity::{apply_mask, init_mask, SparsitySchedule, UpdateRule};
    use crate::tensor::Tensor;

    fn setup(sparsity: f64) -> (ParamSet, Mask, Dataset) {
        let spec = ModelSpec::mlp(4, &[8], 3).unwrap();
        let params = init_params(&spec, &mut RngStream::new(6));
        let mask =
            init_mask(&params, &SparsitySchedule::new(sparsity, UpdateRule::Set), &mut RngStream::new(7)).unwrap();
        let (data, _) =
            BlobsSpec { classes: 3, dim: 4, train_size: 48, test_size: 3, separation: 0.7, noise: 0.2, seed: 3 }
                .generate()
                .unwrap();
        (apply_mask(&params, &mask).unwrap(), mask, data)
    }

    #[test]
    fn zero_std_correlation_is_exactly_one() {
        let (params, mask, data) = setup(0.5);
        let c = gradient_correlation_under_perturbation(&params, &mask, &data, 0.0, &mut RngStream::new(1)).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn sign_flipped_copy_correlates_at_minus_one() {
        let (params, mask, data) = setup(0.0);
        let g = nn::full_gradient(&params, &data);
        assert_eq!(masked_pearson(&g, &g.scale(-1.0), &mask).unwrap(), -1.0);
    }

    #[test]
    fn constant_vectors_are_undefined() {
        let (params, mask, _) = setup(0.0);
        let z = params.zeros_like();
        assert!(matches!(masked_pearson(&z, &z, &mask), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn correlation_is_bounded_and_deterministic() {
        let (params, mask, data) = setup(0.5);
        let a = gradient_correlation_under_perturbation(&params, &mask, &data, 0.2, &mut RngStream::new(4)).unwrap();
        let b = gradient_correlation_under_perturbation(&params, &mask, &data, 0.2, &mut RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn identical_batches_have_zero_variance() {
        let (params, mask, data) = setup(0.5);
        let twice = data.subset(&[0, 1, 2, 0, 1, 2]);
        let v = gradient_variance_under_perturbation(&params, &mask, &twice, 3, 0.015, &mut RngStream::new(2)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn one_dimensional_variance_matches_hand_enumeration() {
        // one input feature, two classes, no hidden layer
        let spec = ModelSpec::mlp(1, &[], 2).unwrap();
        let params = ParamSet::zeros(&spec).unflatten(&[0.7, -0.4, 0.1, 0.05]).unwrap();
        let mask = Mask::dense(&spec);
        let xs = [0.2, 0.9, 0.5, 0.35];
        let ys = [0usize, 1, 1, 0];
        let data = Dataset::new(Tensor::new(vec![4, 1], xs.to_vec()).unwrap(), ys.to_vec(), 2).unwrap();
        let v = gradient_variance_under_perturbation(&params, &mask, &data, 2, 0.0, &mut RngStream::new(0)).unwrap();

        // per-example gradient: dW[0,c] = x (p_c - y_c), db_c = p_c - y_c
        let per_example = |i: usize| -> [f64; 4] {
            let z = [0.7 * xs[i] + 0.1, -0.4 * xs[i] + 0.05];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let r = [p[0] - (ys[i] == 0) as u8 as f64, p[1] - (ys[i] == 1) as u8 as f64];
            [xs[i] * r[0], xs[i] * r[1], r[0], r[1]]
        };
        let batch = |a: usize, b: usize| -> [f64; 4] {
            let (ga, gb) = (per_example(a), per_example(b));
            [0, 1, 2, 3].map(|j| 0.5 * (ga[j] + gb[j]))
        };
        let (b1, b2) = (batch(0, 1), batch(2, 3));
        let hand = (0..4)
            .map(|j| {
                let m = 0.5 * (b1[j] + b2[j]);
                0.5 * ((b1[j] - m).powi(2) + (b2[j] - m).powi(2))
            })
            .sum::<f64>()
            / 4.0;
        assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");
    }

    #[test]
    fn perturbation_reaches_pruned_entries() {
        let (params, mask, _) = setup(0.7);
        let p = perturb(&params, 0.5, &mut RngStream::new(3)).unwrap();
        let flat = p.flatten();
        assert!(params.flatten().iter().zip(&flat).all(|(a, b)| a != b));
        assert_ne!(apply_mask(&p, &mask).unwrap(), p);
        assert_eq!(perturb(&params, 0.0, &mut RngStream::new(3)).unwrap(), params);
        assert!(perturb(&params, -1.0, &mut RngStream::new(3)).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let (params, mask, data) = setup(0.5);
        let mut report = DiagnosticReport::new(Measure::Correlation, 0.015, 9);
        report.add_checkpoint(&params, &mask, &data, 16, 3, 0).unwrap();
        assert_eq!(report.rows.len(), 3);
        let level = report.levels()[0];
        let mean = report.mean_at(level).unwrap();
        let by_hand = report.rows.iter().map(|r| r.statistic).sum::<f64>() / 3.0;
        assert_eq!(mean, by_hand);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sparsity,replicate,statistic,std,seed\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn sign_agreement_counts_co_movement() {
        assert_eq!(sign_agreement(&[0.1, 0.3, 0.2, 0.5], &[1.0, 2.0, 1.5, 1.6]), Some(1.0));
        assert_eq!(sign_agreement(&[0.1, 0.3, 0.2], &[1.0, 0.0, 1.5]), Some(0.0));
        assert_eq!(sign_agreement(&[1.0], &[1.0]), None);
    }
}
