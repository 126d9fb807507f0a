//! PGD attacks under an L∞ threat model and the AT / TRADES objectives.
//!
//! Attacks treat `params` as already masked. Objectives freeze the attacked
//! inputs into a [`GradientOracle`] so an estimator can evaluate the same
//! adversarial batch at several parameter points. The anchor gradient of the
//! correction estimators is still taken on clean data, so in adversarial mode
//! the correction term is biased; the scaling parameter γ is what limits that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, Dataset, ParamSet};
use crate::optim::GradientOracle;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Rows attacked together when sweeping a dataset.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ radius in input units.
    #[serde(default = "AttackConfig::default_epsilon")]
    pub epsilon: f64,
    /// Ascent step; `None` means `epsilon / 4`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "AttackConfig::default_iterations")]
    pub iterations: usize,
    #[serde(default = "AttackConfig::default_random_start")]
    pub random_start: bool,
    #[serde(default = "AttackConfig::default_restarts")]
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: Self::default_epsilon(),
            step_size: None,
            iterations: Self::default_iterations(),
            random_start: Self::default_random_start(),
            restarts: Self::default_restarts(),
        }
    }
}

impl AttackConfig {
    fn default_epsilon() -> f64 {
        8.0 / 255.0
    }
    fn default_iterations() -> usize {
        10
    }
    fn default_random_start() -> bool {
        true
    }
    fn default_restarts() -> usize {
        1
    }

    /// PGD-50 with 10 random restarts, step ε/4.
    pub fn evaluation(epsilon: f64) -> Self {
        AttackConfig { epsilon, step_size: None, iterations: 50, random_start: true, restarts: 10 }
    }

    /// Single full-radius signed-gradient step from the clean input.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig { epsilon, step_size: Some(epsilon), iterations: 1, random_start: false, restarts: 1 }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("attack.epsilon", "must be finite and >= 0"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::config("attack.step_size", "must be positive and finite"));
            }
        }
        if self.iterations > 0 && self.epsilon > 0.0 && !(self.step() > 0.0) {
            return Err(Error::config("attack.step_size", "must be positive when iterations > 0"));
        }
        if self.restarts == 0 {
            return Err(Error::config("attack.restarts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-example attack losses and the gradient of their sum w.r.t. the logits.
trait AttackLoss {
    fn eval(&self, logits: &Tensor) -> (Vec<f64>, Tensor);
}

struct CrossEntropy<'a>(&'a [usize]);

impl AttackLoss for CrossEntropy<'_> {
    fn eval(&self, logits: &Tensor) -> (Vec<f64>, Tensor) {
        nn::softmax_cross_entropy(logits, self.0)
    }
}

/// KL(p ‖ softmax(z)) for fixed clean probabilities `p`.
struct KlFromClean<'a>(&'a Tensor);

impl AttackLoss for KlFromClean<'_> {
    fn eval(&self, logits: &Tensor) -> (Vec<f64>, Tensor) {
        let p = self.0;
        let logq = nn::log_softmax(logits);
        let c = logits.cols();
        let losses = p.data().chunks(c).zip(logq.data().chunks(c)).map(|(pr, lq)| kl_row(pr, lq)).collect();
        let d = logq.map(f64::exp).sub(p).expect("same shape");
        (losses, d)
    }
}

fn kl_row(p: &[f64], logq: &[f64]) -> f64 {
    p.iter().zip(logq).fold(0.0, |s, (&pi, &lq)| if pi > 0.0 { s + pi * (pi.ln() - lq) } else { s })
}

fn project(x: &mut Tensor, origin: &Tensor, eps: f64) {
    for (v, &o) in x.data_mut().iter_mut().zip(origin.data()) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn check_inputs(x: &Tensor) {
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)), "attack inputs must lie in [0, 1]");
}

/// Final iterate of each restart.
fn restart_candidates(
    params: &ParamSet,
    x: &Tensor,
    cfg: &AttackConfig,
    loss: &dyn AttackLoss,
    rng: &mut RngStream,
) -> Vec<Tensor> {
    let eps = cfg.epsilon;
    let step = cfg.step();
    (0..cfg.restarts)
        .map(|_| {
            let mut adv = x.clone();
            if cfg.random_start {
                for v in adv.data_mut() {
                    *v += rng.uniform(-eps, eps);
                }
                project(&mut adv, x, eps);
            }
            for _ in 0..cfg.iterations {
                let cache = nn::forward(params, &adv);
                let (_, d) = loss.eval(&cache.output);
                let (_, gx) = nn::backward(params, &cache, &d, true);
                let gx = gx.expect("input gradient requested");
                for (v, &g) in adv.data_mut().iter_mut().zip(gx.data()) {
                    if g > 0.0 {
                        *v += step;
                    } else if g < 0.0 {
                        *v -= step;
                    }
                }
                project(&mut adv, x, eps);
            }
            adv
        })
        .collect()
}

/// Per example, the candidate in `{x} ∪ candidates` with the highest loss;
/// ties keep the earlier one, so the clean input wins ties.
fn select_worst(params: &ParamSet, x: &Tensor, candidates: &[Tensor], loss: &dyn AttackLoss) -> Tensor {
    let d = x.cols();
    let mut best = x.clone();
    let mut best_loss = loss.eval(&nn::logits(params, x)).0;
    for cand in candidates {
        let l = loss.eval(&nn::logits(params, cand)).0;
        for (i, &li) in l.iter().enumerate() {
            if li > best_loss[i] {
                best_loss[i] = li;
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(cand.row(i));
            }
        }
    }
    best
}

fn attack_with(
    params: &ParamSet,
    x: &Tensor,
    cfg: &AttackConfig,
    loss: &dyn AttackLoss,
    rng: &mut RngStream,
) -> Tensor {
    check_inputs(x);
    if cfg.epsilon == 0.0 {
        return x.clone();
    }
    let candidates = restart_candidates(params, x, cfg, loss, rng);
    select_worst(params, x, &candidates, loss)
}

/// Signed-gradient ascent on the cross-entropy, projected onto the ε-ball
/// around the input and onto `[0, 1]` after every step. With several restarts
/// (or when the attack does not raise the loss) the per-example worst point
/// among the clean input and the restart results is returned.
///
/// Panics if an input lies outside `[0, 1]`.
pub fn pgd_attack(params: &ParamSet, batch: &Batch, cfg: &AttackConfig, rng: &mut RngStream) -> Tensor {
    attack_with(params, &batch.inputs, cfg, &CrossEntropy(&batch.labels), rng)
}

/// The attack used by TRADES: ascent on KL(f(x) ‖ f(x_adv)).
pub fn pgd_attack_kl(params: &ParamSet, batch: &Batch, cfg: &AttackConfig, rng: &mut RngStream) -> Tensor {
    let p = nn::log_softmax(&nn::logits(params, &batch.inputs)).map(f64::exp);
    attack_with(params, &batch.inputs, cfg, &KlFromClean(&p), rng)
}

/// Attack `batch` and freeze the result as an ordinary batch.
pub fn at_batch(params: &ParamSet, batch: &Batch, cfg: &AttackConfig, rng: &mut RngStream) -> Batch {
    batch.with_inputs(pgd_attack(params, batch, cfg, rng))
}

/// Cross-entropy on a freshly attacked copy of `batch`.
pub fn at_loss_and_grad(params: &ParamSet, batch: &Batch, cfg: &AttackConfig, rng: &mut RngStream) -> (f64, ParamSet) {
    nn::loss_and_grad(params, &at_batch(params, batch, cfg, rng))
}

/// TRADES objective with the adversarial inputs held fixed:
/// `mean CE(f(x), y) + β · mean KL(f(x) ‖ f(x_adv))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TradesBatch {
    pub clean: Batch,
    pub adversarial: Tensor,
    pub beta: f64,
}

impl TradesBatch {
    pub fn new(params: &ParamSet, batch: &Batch, cfg: &AttackConfig, beta: f64, rng: &mut RngStream) -> Self {
        TradesBatch { clean: batch.clone(), adversarial: pgd_attack_kl(params, batch, cfg, rng), beta }
    }

    /// Mean clean cross-entropy and mean KL term, separately.
    pub fn components(&self, params: &ParamSet) -> (f64, f64) {
        let n = self.clean.len() as f64;
        let z = nn::logits(params, &self.clean.inputs);
        let ce = nn::softmax_cross_entropy(&z, &self.clean.labels).0;
        let p = nn::log_softmax(&z).map(f64::exp);
        let kl = KlFromClean(&p).eval(&nn::logits(params, &self.adversarial)).0;
        (ce.iter().sum::<f64>() / n, kl.iter().sum::<f64>() / n)
    }
}

impl GradientOracle for TradesBatch {
    fn loss_and_grad(&self, params: &ParamSet) -> (f64, ParamSet) {
        let n = self.clean.len() as f64;
        let c = params.spec().classes();
        let clean = nn::forward(params, &self.clean.inputs);
        let adv = nn::forward(params, &self.adversarial);
        let (ce, mut d_clean) = nn::softmax_cross_entropy(&clean.output, &self.clean.labels);
        let logp = nn::log_softmax(&clean.output);
        let logq = nn::log_softmax(&adv.output);
        let mut d_adv = Tensor::zeros(adv.output.shape());
        let mut kl_total = 0.0;
        for i in 0..self.clean.len() {
            let lp = logp.row(i);
            let lq = logq.row(i);
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let kl = kl_row(&p, lq);
            kl_total += kl;
            for j in 0..c {
                // d/dz_clean of KL(p‖q) = p ⊙ (log p − log q − KL); d/dz_adv = q − p
                d_clean.data_mut()[i * c + j] += self.beta * p[j] * (lp[j] - lq[j] - kl);
                d_adv.data_mut()[i * c + j] = self.beta * (lq[j].exp() - p[j]);
            }
        }
        let (mut grad, _) = nn::backward(params, &clean, &d_clean.scale(1.0 / n), false);
        let (g_adv, _) = nn::backward(params, &adv, &d_adv.scale(1.0 / n), false);
        grad.axpy(1.0, &g_adv);
        let loss = ce.iter().sum::<f64>() / n + self.beta * kl_total / n;
        (loss, grad)
    }
}

pub fn trades_loss_and_grad(
    params: &ParamSet,
    batch: &Batch,
    cfg: &AttackConfig,
    beta: f64,
    rng: &mut RngStream,
) -> (f64, ParamSet) {
    TradesBatch::new(params, batch, cfg, beta, rng).loss_and_grad(params)
}

/// Fraction of examples classified correctly on the clean input and on every
/// restart of a cross-entropy PGD attack. Never exceeds clean accuracy.
pub fn robust_accuracy(params: &ParamSet, data: &Dataset, cfg: &AttackConfig, rng: &mut RngStream) -> f64 {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in ids.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        check_inputs(&batch.inputs);
        let mut ok: Vec<bool> =
            nn::predictions(params, &batch.inputs).iter().zip(&batch.labels).map(|(p, y)| p == y).collect();
        if cfg.epsilon > 0.0 {
            for cand in restart_candidates(params, &batch.inputs, cfg, &CrossEntropy(&batch.labels), rng) {
                for ((o, p), y) in ok.iter_mut().zip(nn::predictions(params, &cand)).zip(&batch.labels) {
                    *o &= p == *y;
                }
            }
        }
        correct += ok.iter().filter(|&&o| o).count();
    }
    correct as f64 / data.len() as f64
}
