//! Gradient estimators and update rules.
//!
//! A training step is split in two: an estimator turns a frozen minibatch
//! objective into a search direction (plain, SVRG-corrected, adaptively
//! corrected, MVR-recursive), then an update rule ([`Stepper`]) applies it.
//! [`Optimizer`] pairs the two for each supported configuration.

mod agent;
mod estimate;
mod mvr;
mod oracle;
mod rules;
mod svrg;

use serde::{Deserialize, Serialize};

pub use agent::{smooth_weight, AgentConfig, AgentState, Anchor, SnapshotReport};
pub use estimate::{estimate_c_hat, loss_covariance_ratio, MIN_ANCHOR_VARIANCE};
pub use mvr::{MvrConfig, MvrState};
pub use oracle::GradientOracle;
pub use rules::{Adam, AdamConfig, SgdMomentum, StepPosition, Stepper};
pub use svrg::SvrgState;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Dataset, ModelSpec, ParamSet};
use crate::sparsity::{apply_mask_in_place, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "svrg")]
    Svrg,
    #[serde(rename = "agent")]
    Agent,
    #[serde(rename = "adam")]
    Adam,
    #[serde(rename = "mvr")]
    Mvr,
    #[serde(rename = "agent+mvr")]
    AgentMvr,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Svrg => "svrg",
            OptimizerKind::Agent => "agent",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Mvr => "mvr",
            OptimizerKind::AgentMvr => "agent+mvr",
        }
    }

    /// Whether the estimator keeps an anchor refreshed at epoch boundaries.
    pub fn uses_anchor(self) -> bool {
        matches!(self, OptimizerKind::Svrg | OptimizerKind::Agent | OptimizerKind::AgentMvr)
    }

    pub fn uses_agent(self) -> bool {
        matches!(self, OptimizerKind::Agent | OptimizerKind::AgentMvr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    #[serde(default = "OptimizerConfig::default_lr")]
    pub lr: f64,
    /// Heavy-ball momentum for the SGD rule (ignored by Adam and the MVR variants).
    #[serde(default = "OptimizerConfig::default_momentum")]
    pub momentum: f64,
    /// Decoupled weight decay.
    #[serde(default = "OptimizerConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub mvr: MvrConfig,
    /// Compute anchor full gradients on this many fixed training examples
    /// instead of the whole set.
    #[serde(default)]
    pub full_grad_subsample: Option<usize>,
}

impl OptimizerConfig {
    fn default_lr() -> f64 {
        0.1
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_weight_decay() -> f64 {
        5e-4
    }

    pub fn new(name: OptimizerKind) -> Self {
        OptimizerConfig {
            name,
            lr: Self::default_lr(),
            momentum: Self::default_momentum(),
            weight_decay: Self::default_weight_decay(),
            agent: AgentConfig::default(),
            adam: AdamConfig::default(),
            mvr: MvrConfig::default(),
            full_grad_subsample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("optimizer.lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("optimizer.weight_decay", "must be finite and >= 0"));
        }
        if self.full_grad_subsample == Some(0) {
            return Err(Error::config("optimizer.full_grad_subsample", "must be positive"));
        }
        self.agent.validate()?;
        self.adam.validate()?;
        self.mvr.validate()
    }
}

/// Estimator state plus update rule for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    stepper: Stepper,
    agent: Option<AgentState>,
    svrg: Option<SvrgState>,
    mvr: Option<MvrState>,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, epoch_length: usize) -> Self {
        let kind = config.name;
        let stepper = match kind {
            OptimizerKind::Adam => Stepper::Adam(Adam::new(config.adam.clone(), config.weight_decay)),
            OptimizerKind::Mvr | OptimizerKind::AgentMvr => Stepper::Sgd(SgdMomentum::new(0.0, config.weight_decay)),
            _ => Stepper::Sgd(SgdMomentum::new(config.momentum, config.weight_decay)),
        };
        Optimizer {
            kind,
            stepper,
            agent: kind.uses_agent().then(|| AgentState::new(config.agent.clone(), epoch_length)),
            svrg: (kind == OptimizerKind::Svrg).then(SvrgState::default),
            mvr: matches!(kind, OptimizerKind::Mvr | OptimizerKind::AgentMvr)
                .then(|| MvrState::new(config.mvr.clone())),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn agent(&self) -> Option<&AgentState> {
        self.agent.as_ref()
    }

    pub fn svrg(&self) -> Option<&SvrgState> {
        self.svrg.as_ref()
    }

    /// Refresh the anchor (and the adaptive weight). No-op for estimators
    /// without an anchor.
    pub fn snapshot(
        &mut self,
        params: &ParamSet,
        mask: &Mask,
        full_data: &Dataset,
        probe: &Dataset,
        epoch: usize,
        trace: bool,
    ) -> Result<Option<SnapshotReport>> {
        if let Some(agent) = &mut self.agent {
            return agent.snapshot(params, mask, full_data, probe, epoch, trace).map(Some);
        }
        if let Some(svrg) = &mut self.svrg {
            svrg.snapshot(params, mask, full_data);
        }
        Ok(None)
    }

    /// Minibatch loss at `params` and the masked search direction.
    pub fn direction(&mut self, params: &ParamSet, mask: &Mask, oracle: &dyn GradientOracle) -> (f64, ParamSet) {
        let (loss, mut g) = match (&self.agent, &self.svrg) {
            (Some(agent), _) => agent.corrected_loss_and_gradient(params, oracle),
            (None, Some(svrg)) => svrg.loss_and_gradient(params, oracle),
            _ => oracle.loss_and_grad(params),
        };
        if let Some(mvr) = &mut self.mvr {
            g = mvr.update(params, mask, oracle, g);
        } else {
            apply_mask_in_place(&mut g, mask);
        }
        (loss, g)
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mask: &Mask,
        direction: &ParamSet,
        lr: f64,
        at: StepPosition,
    ) -> Result<()> {
        self.stepper.step(params, mask, direction, lr, at)
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        self.stepper.save(ck);
        if let Some(a) = &self.agent {
            a.save(ck);
        }
        if let Some(s) = &self.svrg {
            s.save(ck);
        }
        if let Some(m) = &self.mvr {
            m.save(ck);
        }
    }

    pub fn load(&mut self, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
        self.stepper.load(ck, spec)?;
        if let Some(a) = &mut self.agent {
            a.load(ck, spec)?;
        }
        if let Some(s) = &mut self.svrg {
            s.load(ck, spec)?;
        }
        if let Some(m) = &mut self.mvr {
            m.load(ck, spec)?;
        }
        Ok(())
    }
}
