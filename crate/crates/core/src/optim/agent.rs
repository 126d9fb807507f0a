//! Adaptive gradient correction.
//!
//! The corrected minibatch gradient is
//!
//! ```text
//! ĝ = g_new − w·g_old + w·g̃,   w = γ·c
//! ```
//!
//! where `g_new` and `g_old` are gradients of the same minibatch at the
//! current and anchor parameters and `g̃` is the full gradient at the anchor.
//! At every snapshot the weight `c` is refreshed from probe losses:
//! `ĉ = clamp(Cov(L(θ), L(θ̃)) / Var(L(θ̃)), 0, 1)` followed by
//! `c ← (1 − α)·c + α·ĉ`. The first snapshot leaves `c = 0`.

use serde::{Deserialize, Serialize};

use super::estimate::{estimate_c_hat, loss_covariance_ratio};
use super::oracle::GradientOracle;
use crate::checkpoint::Checkpoint;
use crate::diagnostics::masked_pearson;
use crate::error::{Error, Result};
use crate::nn::{self, Dataset, ModelSpec, ParamSet};
use crate::sparsity::{apply_mask_in_place, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Scaling applied to the smoothed weight.
    #[serde(default = "AgentConfig::default_gamma")]
    pub gamma: f64,
    /// Exponential smoothing factor for the weight.
    #[serde(default = "AgentConfig::default_alpha")]
    pub alpha: f64,
    /// Bypass estimation and use this effective weight `γ·c` at every step.
    #[serde(default)]
    pub fixed_weight: Option<f64>,
    /// Number of training examples in the fixed probe set.
    #[serde(default = "AgentConfig::default_probe_size")]
    pub probe_size: usize,
}

impl AgentConfig {
    fn default_gamma() -> f64 {
        0.1
    }
    fn default_alpha() -> f64 {
        0.5
    }
    fn default_probe_size() -> usize {
        256
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("optimizer.agent.gamma", "must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("optimizer.agent.alpha", "must lie in (0, 1]"));
        }
        if let Some(w) = self.fixed_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config("optimizer.agent.fixed_weight", "must lie in [0, 1]"));
            }
        }
        if self.probe_size < 2 {
            return Err(Error::config("optimizer.agent.probe_size", "must be at least 2"));
        }
        Ok(())
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: Self::default_gamma(),
            alpha: Self::default_alpha(),
            fixed_weight: None,
            probe_size: Self::default_probe_size(),
        }
    }
}

/// What a snapshot measured.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SnapshotReport {
    /// Unclamped covariance ratio; `None` at the first snapshot or when the
    /// anchor probe losses have no variance.
    pub c_hat_raw: Option<f64>,
    /// Clamped estimate that entered the smoothing.
    pub c_hat: Option<f64>,
    pub c_smoothed: f64,
    /// Pearson correlation between probe-set gradients at the new and the
    /// previous anchor, over active coordinates (only when tracing).
    pub anchor_correlation: Option<f64>,
}

/// Combine the three gradients as `g_new − w·g_old + w·g̃`.
///
/// `w == 0` returns `g_new` untouched so that a zero weight reproduces plain
/// minibatch SGD bit for bit.
pub(crate) fn combine(g_new: ParamSet, g_old: &ParamSet, g_tilde: &ParamSet, w: f64) -> ParamSet {
    if w == 0.0 {
        return g_new;
    }
    let mut out = g_new;
    for ((p, o), t) in out.iter_mut().zip(g_old.iter()).zip(g_tilde.iter()) {
        for ((v, &go), &gt) in p.value.data_mut().iter_mut().zip(o.value.data()).zip(t.value.data()) {
            *v = (*v - w * go) + w * gt;
        }
    }
    out
}

/// `(1 − α)·prev + α·ĉ`, kept inside `[0, 1]`.
pub fn smooth_weight(prev: f64, c_hat: f64, alpha: f64) -> f64 {
    ((1.0 - alpha) * prev + alpha * c_hat).clamp(0.0, 1.0)
}

/// Anchor parameters and mask, with the anchor's full gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub params: ParamSet,
    pub mask: Mask,
    pub full_grad: ParamSet,
}

impl Anchor {
    /// Full gradient of the masked model at `params`.
    pub fn take(params: &ParamSet, mask: &Mask, data: &Dataset) -> Self {
        let mut full_grad = nn::full_gradient(params, data);
        apply_mask_in_place(&mut full_grad, mask);
        Anchor { params: params.clone(), mask: mask.clone(), full_grad }
    }

    /// Minibatch gradient at the anchor, masked with the anchor-time mask.
    pub fn batch_grad(&self, oracle: &dyn GradientOracle) -> ParamSet {
        let mut g = oracle.grad(&self.params);
        apply_mask_in_place(&mut g, &self.mask);
        g
    }

    pub(crate) fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_params(&format!("{prefix}.params"), &self.params);
        ck.put_params(&format!("{prefix}.mask"), self.mask.as_params());
        ck.put_params(&format!("{prefix}.full_grad"), &self.full_grad);
    }

    pub(crate) fn load(ck: &Checkpoint, prefix: &str, spec: &ModelSpec) -> Result<Self> {
        Ok(Anchor {
            params: ck.params(&format!("{prefix}.params"), spec)?,
            mask: Mask::from_params(ck.params(&format!("{prefix}.mask"), spec)?)?,
            full_grad: ck.params(&format!("{prefix}.full_grad"), spec)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub config: AgentConfig,
    pub anchor: Option<Anchor>,
    /// Smoothed weight before scaling by γ; always in `[0, 1]`.
    pub c_smoothed: f64,
    /// Probe losses cached at the current anchor.
    pub probe_losses_anchor: Vec<f64>,
    /// Minibatch steps per epoch (snapshot period).
    pub epoch_length: usize,
}

impl AgentState {
    pub fn new(config: AgentConfig, epoch_length: usize) -> Self {
        AgentState { config, anchor: None, c_smoothed: 0.0, probe_losses_anchor: Vec::new(), epoch_length }
    }

    /// Effective weight `γ·c` applied to the old-gradient terms.
    pub fn weight(&self) -> f64 {
        match self.config.fixed_weight {
            Some(w) => w,
            None => self.config.gamma * self.c_smoothed,
        }
    }

    /// Epoch-boundary snapshot: refresh `c` from probe losses, then move the
    /// anchor to `params` and recompute its full gradient on `full_data`.
    pub fn snapshot(
        &mut self,
        params: &ParamSet,
        mask: &Mask,
        full_data: &Dataset,
        probe: &Dataset,
        epoch: usize,
        trace: bool,
    ) -> Result<SnapshotReport> {
        if probe.len() < 2 {
            return Err(Error::Argument("probe set needs at least two examples".into()));
        }
        let probe_batch = probe.all();
        let new_losses = nn::per_example_losses(params, &probe_batch).into_data();
        let mut report = SnapshotReport::default();
        if epoch == 0 || self.probe_losses_anchor.is_empty() {
            self.c_smoothed = 0.0;
        } else {
            report.c_hat_raw = loss_covariance_ratio(&new_losses, &self.probe_losses_anchor)?;
            report.c_hat = estimate_c_hat(&new_losses, &self.probe_losses_anchor)?;
            if let Some(c_hat) = report.c_hat {
                self.c_smoothed = smooth_weight(self.c_smoothed, c_hat, self.config.alpha);
            }
            if trace {
                if let Some(prev) = &self.anchor {
                    let g_now = nn::full_gradient(params, probe);
                    let g_prev = nn::full_gradient(&prev.params, probe);
                    report.anchor_correlation = masked_pearson(&g_now, &g_prev, mask).ok();
                }
            }
        }
        report.c_smoothed = self.c_smoothed;
        self.anchor = Some(Anchor::take(params, mask, full_data));
        self.probe_losses_anchor = new_losses;
        Ok(report)
    }

    /// Corrected gradient on the oracle's minibatch; also returns the
    /// minibatch loss at `params`.
    ///
    /// Panics if called before the first snapshot with a nonzero weight.
    pub fn corrected_loss_and_gradient(&self, params: &ParamSet, oracle: &dyn GradientOracle) -> (f64, ParamSet) {
        let (loss, g_new) = oracle.loss_and_grad(params);
        let w = self.weight();
        if w == 0.0 {
            return (loss, g_new);
        }
        let anchor = self.anchor.as_ref().expect("snapshot before correcting gradients");
        let g_old = anchor.batch_grad(oracle);
        (loss, combine(g_new, &g_old, &anchor.full_grad, w))
    }

    pub fn corrected_gradient(&self, params: &ParamSet, oracle: &dyn GradientOracle) -> ParamSet {
        self.corrected_loss_and_gradient(params, oracle).1
    }

    pub(crate) fn save(&self, ck: &mut Checkpoint) {
        ck.put_f64("agent.c_smoothed", self.c_smoothed);
        let cached =
            if self.probe_losses_anchor.is_empty() { vec![f64::NAN] } else { self.probe_losses_anchor.clone() };
        ck.put_tensor("agent.probe_losses", &crate::Tensor::vector(cached));
        ck.put_u64("agent.has_anchor", self.anchor.is_some() as u64);
        if let Some(a) = &self.anchor {
            a.save(ck, "agent.anchor");
        }
    }

    pub(crate) fn load(&mut self, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
        self.c_smoothed = ck.f64("agent.c_smoothed")?;
        let losses = ck.tensor("agent.probe_losses")?.data().to_vec();
        // an empty cache is stored as the single NaN sentinel
        self.probe_losses_anchor = if losses.len() == 1 && losses[0].is_nan() { Vec::new() } else { losses };
        self.anchor = match ck.u64("agent.has_anchor")? {
            0 => None,
            _ => Some(Anchor::load(ck, "agent.anchor", spec)?),
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, BlobsSpec};
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    fn scalar_params(v: f64) -> ParamSet {
        let spec = ModelSpec::mlp(1, &[], 2).unwrap();
        ParamSet::zeros(&spec).unflatten(&[v, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn combine_scalar_arithmetic() {
        let out = combine(scalar_params(3.0), &scalar_params(2.0), &scalar_params(1.0), 0.5);
        assert_eq!(out.flatten()[0], 2.5);
        let zero = combine(scalar_params(3.0), &scalar_params(2.0), &scalar_params(1.0), 0.0);
        assert_eq!(zero.flatten()[0], 3.0);
    }

    fn setup() -> (ParamSet, Mask, Dataset) {
        let spec = ModelSpec::mlp(3, &[4], 3).unwrap();
        let params = init_params(&spec, &mut RngStream::new(4));
        let (train, _) =
            BlobsSpec { classes: 3, dim: 3, train_size: 30, test_size: 3, separation: 0.8, noise: 0.2, seed: 1 }
                .generate()
                .unwrap();
        (params.clone(), Mask::dense(&spec), train)
    }

    #[test]
    fn first_snapshot_sets_c_to_zero() {
        let (params, mask, data) = setup();
        let mut st = AgentState::new(AgentConfig::default(), 3);
        st.c_smoothed = 0.7;
        let r = st.snapshot(&params, &mask, &data, &data, 0, false).unwrap();
        assert_eq!(r.c_smoothed, 0.0);
        assert_eq!(r.c_hat, None);
        assert_eq!(st.weight(), 0.0);
    }

    #[test]
    fn smoothing_with_alpha_one_and_one_half() {
        let (params, mask, data) = setup();
        let mut st = AgentState::new(AgentConfig { alpha: 1.0, ..AgentConfig::default() }, 3);
        st.snapshot(&params, &mask, &data, &data, 0, false).unwrap();
        let moved = params.map(|x| 0.9 * x + 0.01);
        let r = st.snapshot(&moved, &mask, &data, &data, 1, false).unwrap();
        assert_eq!(r.c_smoothed, r.c_hat.unwrap());

        assert!((smooth_weight(0.4, 0.8, 0.5) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_returns_plain_gradient() {
        let (params, mask, data) = setup();
        let mut st = AgentState::new(AgentConfig::default(), 3);
        st.snapshot(&params, &mask, &data, &data, 0, false).unwrap();
        let batch = data.batch(&[1, 5, 7]);
        let moved = params.map(|x| x * 1.1);
        assert_eq!(st.corrected_gradient(&moved, &batch), nn::loss_and_grad(&moved, &batch).1);
    }

    #[test]
    fn unit_weight_at_anchor_returns_full_gradient() {
        let (params, mask, data) = setup();
        let cfg = AgentConfig { fixed_weight: Some(1.0), gamma: 1.0, ..AgentConfig::default() };
        let mut st = AgentState::new(cfg, 3);
        st.snapshot(&params, &mask, &data, &data, 0, false).unwrap();
        let g = st.corrected_gradient(&params, &data.batch(&[2, 3]));
        assert_eq!(g, st.anchor.as_ref().unwrap().full_grad);
    }

    #[test]
    fn constant_probe_keeps_previous_weight() {
        let spec = ModelSpec::mlp(1, &[], 2).unwrap();
        let params = ParamSet::zeros(&spec);
        let ds =
            Dataset::new(Tensor::from_rows(&[vec![0.1], vec![0.2], vec![0.3]]).unwrap(), vec![0, 1, 0], 2).unwrap();
        let mask = Mask::dense(&spec);
        let mut st = AgentState::new(AgentConfig::default(), 1);
        st.snapshot(&params, &mask, &ds, &ds, 0, false).unwrap();
        st.c_smoothed = 0.3;
        // zero network: every probe loss is ln 2
        let r = st.snapshot(&params, &mask, &ds, &ds, 1, false).unwrap();
        assert_eq!(r.c_hat, None);
        assert_eq!(r.c_smoothed, 0.3);
    }

    #[test]
    fn empty_probe_is_rejected() {
        let (params, mask, data) = setup();
        let mut st = AgentState::new(AgentConfig::default(), 3);
        assert!(st.snapshot(&params, &mask, &data, &data.subset(&[0]), 0, false).is_err());
    }
}
