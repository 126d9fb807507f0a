//! The epoch-structured training loop.
//!
//! Each epoch runs, in order: mask update (when due), optimizer snapshot,
//! one shuffled pass of minibatch steps, evaluation, and a metrics record.
//! All randomness comes from substreams of the config seed, and the full
//! state (including generator states) round-trips through a [`Checkpoint`],
//! so a resumed run continues bit-exactly.

use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig, Objective};
use super::metrics::{metrics_to_string, read_metrics, MetricsRecord, Summary};
use crate::adversarial::{at_batch, robust_accuracy, TradesBatch};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{self, init_params, Dataset, ModelSpec, ParamSet};
use crate::optim::{GradientOracle, Optimizer, SnapshotReport, StepPosition};
use crate::rng::RngStream;
use crate::sparsity::{apply_mask, init_mask, rigl_update, set_update, Mask, UpdateRule};

pub const CODE_VERSION: &str = concat!("agentopt ", env!("CARGO_PKG_VERSION"));

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

// substream ids under the config seed
const INIT: u64 = 0;
const MASK_INIT: u64 = 1;
const MASK_UPDATE: u64 = 2;
const SHUFFLE: u64 = 3;
const ATTACK: u64 = 4;
const EVAL: u64 = 5;
const PROBE: u64 = 6;

/// Git-style blob hash of a string, SHA-256 flavour.
pub fn code_hash(version: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", version.len()));
    h.update(version);
    hex(&h.finalize())
}

#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    probe: Dataset,
    anchor_data: Dataset,
    fingerprint: String,
    params: ParamSet,
    mask: Mask,
    optimizer: Optimizer,
    epoch: usize,
    metrics: Vec<MetricsRecord>,
    mask_rng: RngStream,
    shuffle_rng: RngStream,
    attack_rng: RngStream,
}

impl Experiment {
    /// Validate `config`, load the data and initialise parameters and mask.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.dataset.load()?;
        let spec = config.model_spec(train.dim(), train.classes())?;
        let root = RngStream::new(config.seed);

        let mut order: Vec<usize> = (0..train.len()).collect();
        root.substream(PROBE).shuffle(&mut order);
        let probe_n = config.optimizer.agent.probe_size.min(train.len());
        if config.optimizer.name.uses_agent() && probe_n < 2 {
            return Err(Error::config("optimizer.agent.probe_size", "need at least two training examples"));
        }
        let probe = train.subset(&order[..probe_n.max(1)]);
        let anchor_data = match config.optimizer.full_grad_subsample {
            Some(k) => train.subset(&order[..k.min(train.len())]),
            None => train.clone(),
        };

        let params = init_params(&spec, &mut root.substream(INIT));
        let mask = match &config.sparsity {
            Some(s) => init_mask(&params, s, &mut root.substream(MASK_INIT))?,
            None => Mask::dense(&spec),
        };
        let params = apply_mask(&params, &mask)?;
        let epoch_length = train.len().div_ceil(config.training.batch_size);
        let optimizer = Optimizer::new(&config.optimizer, epoch_length);
        let fingerprint = format!("{}{}", train.fingerprint(), test.fingerprint());
        Ok(Experiment {
            spec,
            train,
            test,
            probe,
            anchor_data,
            fingerprint,
            params,
            mask,
            optimizer,
            epoch: 0,
            metrics: Vec::new(),
            mask_rng: root.substream(MASK_UPDATE),
            shuffle_rng: root.substream(SHUFFLE),
            attack_rng: root.substream(ATTACK),
            config,
        })
    }

    /// Rebuild a run from its checkpoint. The data is regenerated from the
    /// stored config and must match the stored fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = std::str::from_utf8(ck.bytes("run.config")?)
            .map_err(|_| Error::Checkpoint("stored config is not UTF-8".into()))?;
        let config = ExperimentConfig::from_json(text)?;
        let mut exp = Experiment::new(config)?;
        let stored = ck.bytes("run.dataset")?;
        if stored != exp.fingerprint.as_bytes() {
            return Err(Error::Checkpoint("dataset differs from the one the checkpoint was trained on".into()));
        }
        exp.epoch = ck.u64("run.epoch")? as usize;
        exp.params = ck.params("params", &exp.spec)?;
        exp.mask = Mask::from_params(ck.params("mask", &exp.spec)?)?;
        exp.optimizer.load(ck, &exp.spec)?;
        exp.mask_rng = load_rng(ck, "rng.mask_update")?;
        exp.shuffle_rng = load_rng(ck, "rng.shuffle")?;
        exp.attack_rng = load_rng(ck, "rng.attack")?;
        exp.metrics = read_metrics(ck.bytes("run.metrics")?)?;
        if exp.metrics.len() != exp.epoch {
            return Err(Error::Checkpoint("metrics length does not match the stored epoch".into()));
        }
        Ok(exp)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("run.code_version", CODE_VERSION.as_bytes().to_vec());
        ck.put_bytes("run.config", self.config.to_json().into_bytes());
        ck.put_bytes("run.dataset", self.fingerprint.as_bytes().to_vec());
        ck.put_u64("run.epoch", self.epoch as u64);
        ck.put_params("params", &self.params);
        ck.put_params("mask", self.mask.as_params());
        self.optimizer.save(&mut ck);
        save_rng(&mut ck, "rng.mask_update", &self.mask_rng);
        save_rng(&mut ck, "rng.shuffle", &self.shuffle_rng);
        save_rng(&mut ck, "rng.attack", &self.attack_rng);
        ck.put_bytes("run.metrics", metrics_to_string(&self.metrics).into_bytes());
        ck
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn test_data(&self) -> &Dataset {
        &self.test
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn fault(&self) -> Option<&str> {
        self.metrics.last().and_then(|m| m.fault.as_deref())
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.training.epochs || self.fault().is_some()
    }

    fn update_mask(&mut self, epoch: usize) -> Result<()> {
        let Some(schedule) = &self.config.sparsity else { return Ok(()) };
        if schedule.target_sparsity == 0.0 || !schedule.is_update_epoch(epoch) {
            return Ok(());
        }
        let p = schedule.drop_fraction_at(epoch, self.config.training.epochs);
        if !(p > 0.0) {
            return Ok(());
        }
        let update = match schedule.rule {
            UpdateRule::Set => set_update(&self.params, &self.mask, p, &mut self.mask_rng)?,
            UpdateRule::Rigl => {
                let dense = nn::full_gradient(&self.params, &self.anchor_data);
                rigl_update(&self.params, &self.mask, &dense, p)?
            }
        };
        update.apply(&mut self.params);
        self.mask = update.mask;
        Ok(())
    }

    fn oracle(&mut self, batch: nn::Batch) -> Box<dyn GradientOracle> {
        match self.config.objective.kind {
            Objective::Standard => Box::new(batch),
            Objective::At => Box::new(at_batch(&self.params, &batch, &self.config.attack, &mut self.attack_rng)),
            Objective::Trades => Box::new(TradesBatch::new(
                &self.params,
                &batch,
                &self.config.attack,
                self.config.objective.beta,
                &mut self.attack_rng,
            )),
        }
    }

    /// Run one epoch and append its metrics record. A non-finite loss or
    /// gradient ends the epoch early and is recorded as the run's fault.
    pub fn run_epoch(&mut self) -> Result<&MetricsRecord> {
        self.run_epoch_with(|_, _| {})
    }

    /// [`Experiment::run_epoch`], calling `after_step` with the parameters and
    /// mask after every optimizer step.
    pub fn run_epoch_with(&mut self, mut after_step: impl FnMut(&ParamSet, &Mask)) -> Result<&MetricsRecord> {
        if self.is_finished() {
            return Err(Error::Argument("run already finished".into()));
        }
        let e = self.epoch;
        self.update_mask(e)?;
        let trace = self.config.training.trace_correlation;
        let report: Option<SnapshotReport> =
            self.optimizer.snapshot(&self.params, &self.mask, &self.anchor_data, &self.probe, e, trace)?;
        let weight = match (self.optimizer.agent(), self.optimizer.svrg()) {
            (Some(a), _) => a.weight(),
            (None, Some(_)) => 1.0,
            _ => 0.0,
        };

        let lr = self.config.training.lr_schedule.lr_at(self.config.optimizer.lr, e);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        let mut fault = None;
        for (it, ids) in order.chunks(self.config.training.batch_size).enumerate() {
            let oracle = self.oracle(self.train.batch(ids));
            let (loss, direction) = self.optimizer.direction(&self.params, &self.mask, oracle.as_ref());
            let at = StepPosition { epoch: e + 1, iteration: it };
            if !loss.is_finite() {
                fault = Some(format!("non-finite loss at epoch {}, iteration {it}", e + 1));
                break;
            }
            match self.optimizer.step(&mut self.params, &self.mask, &direction, lr, at) {
                Ok(()) => {}
                Err(err @ Error::NonFiniteGradient { .. }) => {
                    fault = Some(err.to_string());
                    break;
                }
                Err(err) => return Err(err),
            }
            after_step(&self.params, &self.mask);
            loss_sum += loss;
            norm_sum += direction.norm();
            steps += 1;
        }
        self.epoch += 1;

        let robust_accuracy = self.config.robust_eval().then(|| {
            let mut rng = RngStream::new(self.config.seed).substream(EVAL).substream(self.epoch as u64);
            robust_accuracy(&self.params, &self.test, self.config.eval_attack(), &mut rng)
        });
        let per_step = |s: f64| if steps == 0 { f64::NAN } else { s / steps as f64 };
        self.metrics.push(MetricsRecord {
            epoch: self.epoch,
            lr,
            train_loss: per_step(loss_sum),
            test_accuracy: nn::accuracy(&self.params, &self.test),
            robust_accuracy,
            c_hat: report.as_ref().and_then(|r| r.c_hat_raw),
            c_smoothed: report.as_ref().map(|r| r.c_smoothed),
            weight,
            anchor_correlation: report.as_ref().and_then(|r| r.anchor_correlation),
            grad_norm: per_step(norm_sum),
            sparsity: self.mask.sparsity(),
            fault,
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Run until finished, or until `stop_after` epochs are complete.
    /// `on_epoch` sees the state after every epoch along with its wall-clock seconds.
    pub fn run(
        &mut self,
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&Experiment, f64) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() && stop_after.is_none_or(|s| self.epoch < s) {
            let start = Instant::now();
            self.run_epoch()?;
            on_epoch(self, start.elapsed().as_secs_f64())?;
        }
        Ok(())
    }

    pub fn summary(&self, epoch_seconds: Vec<f64>) -> Summary {
        let last = self.metrics.last();
        let mut widths = vec![self.spec.input_dim()];
        widths.extend(self.spec.layers.iter().map(|l| l.out_dim));
        Summary {
            code_version: CODE_VERSION.to_string(),
            code_hash: code_hash(CODE_VERSION),
            config_hash: self.config.hash(),
            dataset_fingerprint: self.fingerprint.clone(),
            model_widths: widths,
            optimizer: self.config.optimizer.name.name().to_string(),
            objective: format!("{:?}", self.config.objective.kind).to_lowercase(),
            seed: self.config.seed,
            epochs_planned: self.config.training.epochs,
            epochs_completed: self.epoch,
            final_train_loss: last.map(|m| m.train_loss),
            final_test_accuracy: last.map(|m| m.test_accuracy),
            final_robust_accuracy: last.and_then(|m| m.robust_accuracy),
            best_test_accuracy: self.metrics.iter().map(|m| m.test_accuracy).reduce(f64::max),
            fault: self.fault().map(str::to_string),
            epoch_seconds,
        }
    }

    /// Write `metrics.csv`, `summary.json` and `checkpoint.bin` into `dir`.
    pub fn write_outputs(&self, dir: &Path, epoch_seconds: &[f64]) -> Result<()> {
        write_atomic(&dir.join(METRICS_FILE), metrics_to_string(&self.metrics).as_bytes())?;
        let summary = serde_json::to_string_pretty(&self.summary(epoch_seconds.to_vec())).expect("summary serialises");
        write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))
    }
}

fn save_rng(ck: &mut Checkpoint, name: &str, rng: &RngStream) {
    let mut words = vec![rng.seed()];
    words.extend(rng.state());
    ck.put_words(name, words);
}

fn load_rng(ck: &Checkpoint, name: &str) -> Result<RngStream> {
    match ck.words(name)? {
        [seed, a, b, c, d] => Ok(RngStream::from_parts(*seed, [*a, *b, *c, *d])),
        _ => Err(Error::Checkpoint(format!("entry `{name}` is not a generator state"))),
    }
}

/// Run `config` to completion in memory.
pub fn run_experiment(config: ExperimentConfig) -> Result<Experiment> {
    let mut exp = Experiment::new(config)?;
    exp.run(None, |_, _| Ok(()))?;
    Ok(exp)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/checkpoint.bin` if it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

/// Train into `out`, rewriting the three output files after every epoch.
///
/// When resuming, `config` must hash equal to the checkpoint's config.
pub fn train_to_dir(config: ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<Experiment> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut exp = if opts.resume && ck_path.exists() {
        let exp = Experiment::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
        if exp.config.hash() != config.hash() {
            return Err(Error::Argument(format!(
                "{} was written by a different config; refusing to resume",
                ck_path.display()
            )));
        }
        exp
    } else {
        Experiment::new(config)?
    };
    let mut seconds = Vec::new();
    exp.write_outputs(out, &seconds)?;
    exp.run(opts.stop_after, |e, s| {
        seconds.push(s);
        e.write_outputs(out, &seconds)
    })?;
    Ok(exp)
}
