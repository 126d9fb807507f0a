//! Parameter update rules. Every rule masks the incoming gradient, its own
//! buffers and the updated parameters, so pruned entries stay exactly zero.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamSet};
use crate::sparsity::{apply_mask_in_place, Mask};

/// Where a step happened, for fault reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepPosition {
    pub epoch: usize,
    pub iteration: usize,
}

fn check_inputs(grad: &ParamSet, lr: f64, at: StepPosition) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient { epoch: at.epoch, iteration: at.iteration });
    }
    Ok(())
}

/// Heavy-ball SGD, `v ← β·v + g`, `θ ← θ − lr·v − lr·λ·θ` (decoupled decay).
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Option<ParamSet>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { momentum, weight_decay, velocity: None }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mask: &Mask,
        grad: &ParamSet,
        lr: f64,
        at: StepPosition,
    ) -> Result<()> {
        check_inputs(grad, lr, at)?;
        let mut g = grad.clone();
        apply_mask_in_place(&mut g, mask);
        let v = match self.velocity.take() {
            Some(mut v) if self.momentum != 0.0 => {
                for (vp, gp) in v.iter_mut().zip(g.iter()) {
                    for (x, &gi) in vp.value.data_mut().iter_mut().zip(gp.value.data()) {
                        *x = self.momentum * *x + gi;
                    }
                }
                apply_mask_in_place(&mut v, mask);
                v
            }
            _ => g,
        };
        let decay = lr * self.weight_decay;
        for (p, vp) in params.iter_mut().zip(v.iter()) {
            for (x, &vi) in p.value.data_mut().iter_mut().zip(vp.value.data()) {
                *x = if decay != 0.0 { *x - lr * vi - decay * *x } else { *x - lr * vi };
            }
        }
        apply_mask_in_place(params, mask);
        self.velocity = Some(v);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.adam.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.adam.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.adam.eps", "must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: Self::default_beta1(), beta2: Self::default_beta2(), eps: Self::default_eps() }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub weight_decay: f64,
    pub first: Option<ParamSet>,
    pub second: Option<ParamSet>,
    pub steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, weight_decay: f64) -> Self {
        Adam { config, weight_decay, first: None, second: None, steps: 0 }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mask: &Mask,
        grad: &ParamSet,
        lr: f64,
        at: StepPosition,
    ) -> Result<()> {
        check_inputs(grad, lr, at)?;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let mut g = grad.clone();
        apply_mask_in_place(&mut g, mask);
        let mut m = self.first.take().unwrap_or_else(|| params.zeros_like());
        let mut v = self.second.take().unwrap_or_else(|| params.zeros_like());
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let decay = lr * self.weight_decay;
        for (((p, mp), vp), gp) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
            let data = p.value.data_mut();
            let md = mp.value.data_mut();
            let vd = vp.value.data_mut();
            for (i, &gi) in gp.value.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps) + decay * data[i];
            }
        }
        apply_mask_in_place(&mut m, mask);
        apply_mask_in_place(&mut v, mask);
        apply_mask_in_place(params, mask);
        self.first = Some(m);
        self.second = Some(v);
        Ok(())
    }
}

/// The update rule a run uses after its gradient estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum Stepper {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Stepper {
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mask: &Mask,
        grad: &ParamSet,
        lr: f64,
        at: StepPosition,
    ) -> Result<()> {
        match self {
            Stepper::Sgd(s) => s.step(params, mask, grad, lr, at),
            Stepper::Adam(a) => a.step(params, mask, grad, lr, at),
        }
    }

    pub(crate) fn save(&self, ck: &mut Checkpoint) {
        match self {
            Stepper::Sgd(s) => {
                ck.put_u64("sgd.has_velocity", s.velocity.is_some() as u64);
                if let Some(v) = &s.velocity {
                    ck.put_params("sgd.velocity", v);
                }
            }
            Stepper::Adam(a) => {
                ck.put_u64("adam.steps", a.steps);
                if let (Some(m), Some(v)) = (&a.first, &a.second) {
                    ck.put_params("adam.first", m);
                    ck.put_params("adam.second", v);
                }
            }
        }
    }

    pub(crate) fn load(&mut self, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
        match self {
            Stepper::Sgd(s) => {
                s.velocity = match ck.u64("sgd.has_velocity")? {
                    0 => None,
                    _ => Some(ck.params("sgd.velocity", spec)?),
                };
            }
            Stepper::Adam(a) => {
                a.steps = ck.u64("adam.steps")?;
                if a.steps > 0 {
                    a.first = Some(ck.params("adam.first", spec)?);
                    a.second = Some(ck.params("adam.second", spec)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::rng::RngStream;
    use crate::sparsity::{apply_mask, init_mask, SparsitySchedule, UpdateRule};

    fn setup() -> (ParamSet, Mask) {
        let spec = ModelSpec::mlp(4, &[5], 3).unwrap();
        let params = init_params(&spec, &mut RngStream::new(2));
        let mask = init_mask(&params, &SparsitySchedule::new(0.6, UpdateRule::Set), &mut RngStream::new(3)).unwrap();
        (apply_mask(&params, &mask).unwrap(), mask)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (params, mask) = setup();
        let mut p = params.clone();
        SgdMomentum::new(0.9, 0.0).step(&mut p, &mask, &params.zeros_like(), 0.1, StepPosition::default()).unwrap();
        assert_eq!(p, params);
    }

    #[test]
    fn plain_sgd_is_theta_minus_lr_g() {
        let (params, _) = setup();
        let mask = Mask::dense(params.spec());
        let g = init_params(params.spec(), &mut RngStream::new(9));
        let mut p = params.clone();
        SgdMomentum::new(0.0, 0.0).step(&mut p, &mask, &g, 0.05, StepPosition::default()).unwrap();
        for ((a, b), c) in p.flatten().iter().zip(params.flatten()).zip(g.flatten()) {
            assert_eq!(*a, b - 0.05 * c);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let spec = ModelSpec::mlp(1, &[], 2).unwrap();
        let mask = Mask::dense(&spec);
        let mut p = ParamSet::zeros(&spec);
        let g = ParamSet::filled(&spec, 1.0);
        let mut sgd = SgdMomentum::new(0.5, 0.0);
        sgd.step(&mut p, &mask, &g, 1.0, StepPosition::default()).unwrap();
        sgd.step(&mut p, &mask, &g, 1.0, StepPosition::default()).unwrap();
        // v1 = 1, v2 = 1.5
        assert!(p.flatten().iter().all(|&x| x == -2.5));
    }

    #[test]
    fn masked_entries_stay_zero_for_every_rule() {
        let (params, mask) = setup();
        let mut steppers =
            vec![Stepper::Sgd(SgdMomentum::new(0.9, 5e-4)), Stepper::Adam(Adam::new(AdamConfig::default(), 1e-2))];
        let mut rng = RngStream::new(21);
        for st in &mut steppers {
            let mut p = params.clone();
            for it in 0..20 {
                let g = init_params(params.spec(), &mut rng);
                st.step(&mut p, &mask, &g, 0.1, StepPosition { epoch: 0, iteration: it }).unwrap();
                for (pp, mp) in p.iter().zip(mask.as_params().iter()) {
                    for (&x, &m) in pp.value.data().iter().zip(mp.value.data()) {
                        if m == 0.0 {
                            assert_eq!(x, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_a_fault_with_position() {
        let (params, mask) = setup();
        let mut p = params.clone();
        let g = params.map(|_| f64::NAN);
        let err = SgdMomentum::new(0.9, 0.0)
            .step(&mut p, &mask, &g, 0.1, StepPosition { epoch: 3, iteration: 7 })
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { epoch: 3, iteration: 7 }));
        assert_eq!(p, params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = ModelSpec::mlp(1, &[], 2).unwrap();
        let mask = Mask::dense(&spec);
        let mut p = ParamSet::zeros(&spec);
        let g = ParamSet::filled(&spec, 3.0);
        Adam::new(AdamConfig::default(), 0.0).step(&mut p, &mask, &g, 0.01, StepPosition::default()).unwrap();
        for x in p.flatten() {
            assert!((x + 0.01).abs() < 1e-9);
        }
    }
}
