use serde::{Deserialize, Serialize};

use super::oracle::GradientOracle;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamSet};
use crate::sparsity::{apply_mask_in_place, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvrConfig {
    /// Mixing weight `a ∈ (0, 1]`; `a = 1` keeps no memory.
    #[serde(default = "MvrConfig::default_a")]
    pub a: f64,
}

impl MvrConfig {
    fn default_a() -> f64 {
        0.1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::config("optimizer.mvr.a", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for MvrConfig {
    fn default() -> Self {
        MvrConfig { a: Self::default_a() }
    }
}

/// Momentum-based variance reduction:
/// `d_t = f_t + (1 − a)·(d_{t−1} − g_B(θ_{t−1}))`, with `g_B(θ_{t−1})` taken
/// on the current minibatch and `f_t` the fresh gradient (the plain minibatch
/// gradient, or the corrected one when combined with adaptive correction).
#[derive(Debug, Clone, PartialEq)]
pub struct MvrState {
    pub config: MvrConfig,
    pub direction: Option<ParamSet>,
    pub prev_params: Option<ParamSet>,
}

impl MvrState {
    pub fn new(config: MvrConfig) -> Self {
        MvrState { config, direction: None, prev_params: None }
    }

    /// Advance the recursion and return the new direction (masked).
    pub fn update(&mut self, params: &ParamSet, mask: &Mask, oracle: &dyn GradientOracle, fresh: ParamSet) -> ParamSet {
        let mut d = match (&self.direction, &self.prev_params) {
            (Some(prev_d), Some(prev_p)) if self.config.a < 1.0 => {
                let g_prev = oracle.grad(prev_p);
                let keep = 1.0 - self.config.a;
                let mut d = fresh;
                for ((v, pd), gp) in d.iter_mut().zip(prev_d.iter()).zip(g_prev.iter()) {
                    for ((x, &a), &b) in v.value.data_mut().iter_mut().zip(pd.value.data()).zip(gp.value.data()) {
                        *x += keep * (a - b);
                    }
                }
                d
            }
            _ => fresh,
        };
        apply_mask_in_place(&mut d, mask);
        self.direction = Some(d.clone());
        self.prev_params = Some(params.clone());
        d
    }

    pub(crate) fn save(&self, ck: &mut Checkpoint) {
        ck.put_u64("mvr.started", self.direction.is_some() as u64);
        if let (Some(d), Some(p)) = (&self.direction, &self.prev_params) {
            ck.put_params("mvr.direction", d);
            ck.put_params("mvr.prev_params", p);
        }
    }

    pub(crate) fn load(&mut self, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
        if ck.u64("mvr.started")? == 1 {
            self.direction = Some(ck.params("mvr.direction", spec)?);
            self.prev_params = Some(ck.params("mvr.prev_params", spec)?);
        } else {
            self.direction = None;
            self.prev_params = None;
        }
        Ok(())
    }
}
