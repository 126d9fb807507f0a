//! Binary weight masks and the SET / RigL prune–grow rules.
//!
//! Only weight matrices are sparsified; bias entries of a [`Mask`] are always 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamKind, ParamSet};
use crate::rng::RngStream;
use crate::tensor::topk_indices;

/// A 0/1 tensor per parameter, laid out like the [`ParamSet`] it masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask(ParamSet);

impl Mask {
    pub fn dense(spec: &ModelSpec) -> Self {
        Mask(ParamSet::filled(spec, 1.0))
    }

    /// Wrap a 0/1 parameter set; rejects other values and inactive biases.
    pub fn from_params(values: ParamSet) -> Result<Self> {
        for p in values.iter() {
            if p.value.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Argument(format!("mask {} has non-binary entries", p.name)));
            }
            if p.kind == ParamKind::Bias && p.value.data().iter().any(|&v| v != 1.0) {
                return Err(Error::Argument(format!("bias mask {} must be all ones", p.name)));
            }
        }
        Ok(Mask(values))
    }

    pub fn as_params(&self) -> &ParamSet {
        &self.0
    }

    pub fn into_params(self) -> ParamSet {
        self.0
    }

    pub fn spec(&self) -> &ModelSpec {
        self.0.spec()
    }

    /// Active count of every parameter tensor, in layout order.
    pub fn nnz_per_tensor(&self) -> Vec<usize> {
        self.0.iter().map(|p| p.value.data().iter().filter(|&&v| v == 1.0).count()).collect()
    }

    pub fn weight_nnz(&self) -> usize {
        self.0
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.data().iter().filter(|&&v| v == 1.0).count())
            .sum()
    }

    pub fn weight_total(&self) -> usize {
        self.0.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.len()).sum()
    }

    /// `1 - nnz / total` over weight tensors.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.weight_nnz() as f64 / self.weight_total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    Uniform,
    #[serde(alias = "erk")]
    ErdosRenyiKernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Set,
    Rigl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropDecay {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    pub target_sparsity: f64,
    #[serde(default = "SparsitySchedule::default_distribution")]
    pub distribution: Distribution,
    #[serde(default = "SparsitySchedule::default_rule")]
    pub rule: UpdateRule,
    /// Epochs between mask updates; 0 keeps the initial mask fixed.
    #[serde(default = "SparsitySchedule::default_interval")]
    pub update_interval: usize,
    #[serde(default = "SparsitySchedule::default_drop_fraction")]
    pub drop_fraction: f64,
    #[serde(default = "SparsitySchedule::default_decay")]
    pub decay: DropDecay,
}

impl SparsitySchedule {
    fn default_distribution() -> Distribution {
        Distribution::Uniform
    }
    fn default_rule() -> UpdateRule {
        UpdateRule::Set
    }
    fn default_interval() -> usize {
        1
    }
    fn default_drop_fraction() -> f64 {
        0.3
    }
    fn default_decay() -> DropDecay {
        DropDecay::Cosine
    }

    pub fn new(target_sparsity: f64, rule: UpdateRule) -> Self {
        SparsitySchedule {
            target_sparsity,
            distribution: Self::default_distribution(),
            rule,
            update_interval: Self::default_interval(),
            drop_fraction: Self::default_drop_fraction(),
            decay: Self::default_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::config("sparsity.target_sparsity", "must lie in [0, 1)"));
        }
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(Error::config("sparsity.drop_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Drop fraction at `epoch`: constant, or `p0/2 · (1 + cos(π·epoch/total))`.
    pub fn drop_fraction_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        cosine_or_constant(self.drop_fraction, self.decay, epoch, total_epochs)
    }

    /// Mask updates happen at epoch boundaries `ΔT, 2ΔT, ...`, never before epoch 0.
    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        self.update_interval > 0 && epoch > 0 && epoch % self.update_interval == 0
    }
}

fn cosine_or_constant(p0: f64, decay: DropDecay, epoch: usize, total: usize) -> f64 {
    match decay {
        DropDecay::Constant => p0,
        DropDecay::Cosine if total == 0 => p0,
        DropDecay::Cosine => {
            let t = (epoch.min(total)) as f64 / total as f64;
            0.5 * p0 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Target density of each weight tensor (in layer order).
///
/// ERK densities are `ε·(fan_in + fan_out)/(fan_in·fan_out)`, with `ε` solved so
/// the total active count is `(1 - s)·total`; layers that would exceed density
/// 1 are made dense and `ε` is re-solved over the rest.
pub fn layer_densities(spec: &ModelSpec, sparsity: f64, distribution: Distribution) -> Vec<f64> {
    let sizes: Vec<f64> = spec.layers.iter().map(|l| (l.in_dim * l.out_dim) as f64).collect();
    match distribution {
        Distribution::Uniform => vec![1.0 - sparsity; sizes.len()],
        Distribution::ErdosRenyiKernel => {
            let raw: Vec<f64> =
                spec.layers.iter().map(|l| (l.in_dim + l.out_dim) as f64 / (l.in_dim * l.out_dim) as f64).collect();
            let target: f64 = (1.0 - sparsity) * sizes.iter().sum::<f64>();
            let mut dense = vec![false; sizes.len()];
            loop {
                let fixed: f64 = (0..sizes.len()).filter(|&i| dense[i]).map(|i| sizes[i]).sum();
                let weighted: f64 = (0..sizes.len()).filter(|&i| !dense[i]).map(|i| raw[i] * sizes[i]).sum();
                let eps = if weighted > 0.0 { (target - fixed) / weighted } else { 0.0 };
                let newly: Vec<usize> = (0..sizes.len()).filter(|&i| !dense[i] && eps * raw[i] > 1.0).collect();
                if newly.is_empty() {
                    return (0..sizes.len()).map(|i| if dense[i] { 1.0 } else { (eps * raw[i]).max(0.0) }).collect();
                }
                for i in newly {
                    dense[i] = true;
                }
            }
        }
    }
}

/// Random mask with per-tensor density given by the schedule's distribution.
pub fn init_mask(params: &ParamSet, schedule: &SparsitySchedule, rng: &mut RngStream) -> Result<Mask> {
    if !(0.0..1.0).contains(&schedule.target_sparsity) {
        return Err(Error::Argument(format!("sparsity {} outside [0, 1)", schedule.target_sparsity)));
    }
    let spec = params.spec();
    let densities = layer_densities(spec, schedule.target_sparsity, schedule.distribution);
    let mut mask = ParamSet::filled(spec, 1.0);
    for (layer, density) in densities.into_iter().enumerate() {
        let w = mask.weight_mut(layer);
        let n = w.len();
        let keep = ((density * n as f64).round() as usize).min(n);
        if keep == n {
            continue;
        }
        let pool: Vec<usize> = (0..n).collect();
        w.fill(0.0);
        for i in rng.choose_distinct(&pool, keep) {
            w.data_mut()[i] = 1.0;
        }
    }
    Ok(Mask(mask))
}

/// Elementwise product of parameters and mask.
pub fn apply_mask(params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    params.mul(&mask.0)
}

/// In-place [`apply_mask`]; panics on layout mismatch.
pub fn apply_mask_in_place(params: &mut ParamSet, mask: &Mask) {
    assert!(params.same_layout(&mask.0), "mask layout mismatch");
    for (p, m) in params.iter_mut().zip(mask.0.iter()) {
        for (v, &keep) in p.value.data_mut().iter_mut().zip(m.value.data()) {
            if keep == 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Result of a prune–grow step. `pruned[i]` / `grown[i]` list flat positions in
/// parameter tensor `i` (empty for biases).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskUpdate {
    pub mask: Mask,
    pub pruned: Vec<Vec<usize>>,
    pub grown: Vec<Vec<usize>>,
}

impl MaskUpdate {
    /// Apply the new mask and zero every grown position, including positions
    /// that were pruned and regrown in the same step.
    pub fn apply(&self, params: &mut ParamSet) {
        apply_mask_in_place(params, &self.mask);
        for (i, grown) in self.grown.iter().enumerate() {
            let t = params.tensor_mut(i);
            for &j in grown {
                t.data_mut()[j] = 0.0;
            }
        }
    }
}

fn check_drop_fraction(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("drop fraction {p} outside (0, 1)")))
    }
}

/// Prune `⌊p·nnz⌋` active entries of smallest magnitude, lowest index first on ties.
fn prune_smallest(values: &[f64], mask: &mut [f64], p: f64) -> Vec<usize> {
    let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 1.0).collect();
    let k = (p * active.len() as f64).floor() as usize;
    let neg_mag: Vec<f64> = active.iter().map(|&i| -values[i].abs()).collect();
    let picked: Vec<usize> = topk_indices(&neg_mag, k).expect("k <= nnz").into_iter().map(|j| active[j]).collect();
    for &i in &picked {
        mask[i] = 0.0;
    }
    picked
}

fn prune_and_grow(
    params: &ParamSet,
    mask: &Mask,
    p: f64,
    mut grow: impl FnMut(usize, &[usize], usize) -> Vec<usize>,
) -> Result<MaskUpdate> {
    check_drop_fraction(p)?;
    if !params.same_layout(&mask.0) {
        return Err(Error::Dimension("mask layout does not match parameters".into()));
    }
    let mut next = mask.0.clone();
    let mut pruned = vec![Vec::new(); params.len()];
    let mut grown = vec![Vec::new(); params.len()];
    for (i, param) in params.iter().enumerate() {
        if param.kind != ParamKind::Weight {
            continue;
        }
        let m = next.tensor_mut(i).data_mut();
        let dropped = prune_smallest(param.value.data(), m, p);
        if dropped.is_empty() {
            continue;
        }
        let inactive: Vec<usize> = (0..m.len()).filter(|&j| m[j] == 0.0).collect();
        let mut chosen = grow(i, &inactive, dropped.len());
        for &j in &chosen {
            m[j] = 1.0;
        }
        chosen.sort_unstable();
        pruned[i] = dropped;
        grown[i] = chosen;
    }
    Ok(MaskUpdate { mask: Mask(next), pruned, grown })
}

/// SET: prune by weight magnitude, regrow uniformly at random among inactive positions.
pub fn set_update(params: &ParamSet, mask: &Mask, p: f64, rng: &mut RngStream) -> Result<MaskUpdate> {
    prune_and_grow(params, mask, p, |_, inactive, k| rng.choose_distinct(inactive, k))
}

/// RigL: prune by weight magnitude, regrow where the dense (unmasked) gradient
/// is largest in magnitude, lowest index first on ties.
pub fn rigl_update(params: &ParamSet, mask: &Mask, dense_grad: &ParamSet, p: f64) -> Result<MaskUpdate> {
    if !params.same_layout(dense_grad) {
        return Err(Error::Dimension("gradient layout does not match parameters".into()));
    }
    prune_and_grow(params, mask, p, |i, inactive, k| {
        let g = dense_grad.tensor(i).data();
        let scores: Vec<f64> = inactive.iter().map(|&j| g[j].abs()).collect();
        topk_indices(&scores, k).expect("k <= inactive").into_iter().map(|j| inactive[j]).collect()
    })
}
