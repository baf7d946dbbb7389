//! Minibatch training of [`ScorerParams`] under the combined loss.
//!
//! Each epoch shuffles the training sentences with
//! `ChaCha8Rng::seed_from_u64(rng_seed)` on stream `epoch` and cuts them
//! into batches capped both by sentence count and by token count. Batch
//! plans depend only on the seed, so the number of optimizer steps is known
//! up front and the learning-rate schedule can use it.
//!
//! Per-sentence work runs on the rayon pool, but every reduction is done
//! sequentially in batch order, so results do not depend on the number of
//! threads.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Dataset};
use crate::eval::{self, EvalError};
use crate::lattice::PotentialLattice;
use crate::objectives::{combined_loss, EerConfig, ObjectiveError};
use crate::scorer::{ScorerConfig, ScorerError, ScorerParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set has no sentences")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        param_norm: f64,
    },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Objective {
        epoch: usize,
        batch: usize,
        source: ObjectiveError,
    },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

fn io_error(path: &Path, reason: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup from 0 to the peak at `peak_fraction` of all steps,
    /// then linear decay to 0 at the last step boundary.
    SlantedTriangular { peak_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_batch_tokens: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
    pub eer: EerConfig,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines log of epoch reports.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            max_batch_tokens: 4096,
            learning_rate: 1e-2,
            schedule: Schedule::SlantedTriangular { peak_fraction: 0.1 },
            optimizer: OptimizerKind::adam(),
            rng_seed: 0,
            eer: EerConfig::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate and schedule used for fine-tuning large pretrained
    /// encoders. Too small for the window encoder trained from scratch.
    pub fn fine_tuning() -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_batch_tokens == 0 {
            return bad("max_batch_tokens must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if let Schedule::SlantedTriangular { peak_fraction } = self.schedule {
            if !(peak_fraction > 0.0 && peak_fraction < 1.0) {
                return bad(format!("peak_fraction {peak_fraction} outside (0, 1)"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir".into());
        }
        self.eer.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Learning rate at 0-based `step` of `total` steps.
///
/// For the slanted triangular schedule with peak `p = peak_fraction * total`
/// this is `lr * step / p` before the peak and `lr * (total - step) /
/// (total - p)` from it on, so step 0 gets 0 and the last step gets
/// `lr / ((1 - peak_fraction) * total)`.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    match config.schedule {
        Schedule::Constant => lr,
        Schedule::SlantedTriangular { peak_fraction } => {
            let (s, t) = (step as f64, total as f64);
            let peak = peak_fraction * t;
            if s < peak {
                lr * s / peak
            } else {
                (lr * (t - s) / (t - peak)).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Batch means over the epoch.
    pub marginal_loss: f64,
    pub ratio_loss: f64,
    pub loss: f64,
    /// Expected entity ratio over the whole training set after the epoch.
    pub rho_hat: f64,
    pub dev_f1: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub total_steps: usize,
    /// Expected entity ratio of the returned model over the training set.
    pub final_rho_hat: f64,
}

impl TrainReport {
    /// The report with wall-clock times zeroed, for comparing runs.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    updates: u64,
}

impl OptimizerState {
    fn new(kind: &OptimizerKind, len: usize) -> OptimizerState {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        OptimizerState {
            first: if moments { vec![0.0; len] } else { Vec::new() },
            second: if moments { vec![0.0; len] } else { Vec::new() },
            updates: 0,
        }
    }

    fn step(&mut self, kind: &OptimizerKind, values: &mut [f64], grads: &[f64], lr: f64) {
        self.updates += 1;
        match *kind {
            OptimizerKind::Sgd => {
                for (v, g) in values.iter_mut().zip(grads) {
                    *v -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.updates as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..values.len() {
                    let g = grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    values[i] -= lr * m / (v.sqrt() + eps);
                }
            }
        }
    }
}

const STATE_FORMAT: &str = "eer-ner-trainer-state";

#[derive(Serialize, Deserialize)]
struct TrainerState {
    format: String,
    epochs_done: usize,
    step: usize,
    optimizer: OptimizerState,
    reports: Vec<EpochReport>,
}

/// Sentence indices of every batch of `epoch` (0-based).
pub fn batch_plan(sentence_lengths: &[usize], config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sentence_lengths.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut tokens = 0;
    for i in order {
        let len = sentence_lengths[i];
        if !current.is_empty() && (current.len() == config.batch_size || tokens + len > config.max_batch_tokens) {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Stateful training loop. Use [`train`] for the one-call version.
pub struct Trainer<'a> {
    config: TrainConfig,
    params: ScorerParams,
    sentences: Vec<&'a AnnotatedSentence>,
    lengths: Vec<usize>,
    train: &'a Dataset,
    dev: Option<&'a Dataset>,
    optimizer: OptimizerState,
    epochs_done: usize,
    step: usize,
    total_steps: usize,
    reports: Vec<EpochReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(params: ScorerParams, config: TrainConfig, train: &'a Dataset, dev: Option<&'a Dataset>) -> Result<Trainer<'a>, TrainError> {
        config.validate()?;
        let sentences: Vec<&AnnotatedSentence> = train.sentences().collect();
        if sentences.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let total_steps = (0..config.epochs).map(|e| batch_plan(&lengths, &config, e).len()).sum();
        let optimizer = OptimizerState::new(&config.optimizer, params.values().len());
        Ok(Trainer {
            config,
            params,
            sentences,
            lengths,
            train,
            dev,
            optimizer,
            epochs_done: 0,
            step: 0,
            total_steps,
            reports: Vec::new(),
        })
    }

    pub fn params(&self) -> &ScorerParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn batch_step(&mut self, epoch: usize, batch_index: usize, batch: &[usize]) -> Result<(f64, f64, f64), TrainError> {
        let params = &self.params;
        let scored = batch
            .par_iter()
            .map(|&i| params.forward(self.sentences[i].tokens()))
            .collect::<Result<Vec<_>, _>>()?;
        let lattices: Vec<PotentialLattice> = scored.iter().map(|s| s.lattice.clone()).collect();
        let observations: Vec<_> = batch.iter().map(|&i| self.sentences[i].observed()).collect();
        let (report, adjoints) =
            combined_loss(&lattices, &observations, &self.config.eer).map_err(|source| TrainError::Objective {
                epoch: epoch + 1,
                batch: batch_index,
                source,
            })?;
        if !report.loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: epoch + 1,
                batch: batch_index,
                loss: report.loss,
                param_norm: params.norm(),
            });
        }
        let parts = scored
            .par_iter()
            .zip(adjoints.par_iter())
            .map(|(s, a)| s.backward(params, a))
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = vec![0.0; params.values().len()];
        for part in &parts {
            part.add_to(params, &mut grads);
        }
        let lr = lr_at(self.step, self.total_steps, &self.config);
        self.optimizer
            .step(&self.config.optimizer, self.params.values_mut(), &grads, lr);
        self.step += 1;
        if !self.params.values().iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinite {
                epoch: epoch + 1,
                batch: batch_index,
                loss: report.loss,
                param_norm: self.params.norm(),
            });
        }
        Ok((report.marginal_loss, report.ratio_loss, report.loss))
    }

    /// Runs the next epoch. Returns `None` once all epochs are done.
    pub fn run_epoch(&mut self) -> Result<Option<&EpochReport>, TrainError> {
        if self.epochs_done >= self.config.epochs {
            return Ok(None);
        }
        let start = Instant::now();
        let epoch = self.epochs_done;
        let plan = batch_plan(&self.lengths, &self.config, epoch);
        let (mut lp, mut lu, mut l) = (0.0, 0.0, 0.0);
        for (b, batch) in plan.iter().enumerate() {
            let (a, c, d) = self.batch_step(epoch, b, batch)?;
            lp += a;
            lu += c;
            l += d;
        }
        let n = plan.len() as f64;
        let rho_hat = eval::predicted_entity_ratio(&self.params, self.train)?;
        let dev_f1 = match self.dev {
            Some(dev) => {
                let predicted = eval::decode(&self.params, dev, 0.0)?;
                Some(eval::span_prf(&predicted, &dev.gold_sequences().map_err(EvalError::from)?)?.f1)
            }
            None => None,
        };
        self.epochs_done += 1;
        let report = EpochReport {
            epoch: self.epochs_done,
            steps: plan.len(),
            marginal_loss: lp / n,
            ratio_loss: lu / n,
            loss: l / n,
            rho_hat,
            dev_f1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: loss {:.5} (L_p {:.5}, L_u {:.5}), rho_hat {:.4}",
            report.epoch,
            report.loss,
            report.marginal_loss,
            report.ratio_loss,
            report.rho_hat
        );
        if let Some(path) = &self.config.log_path {
            append_log(path, &report)?;
        }
        self.reports.push(report);
        if self.config.checkpoint_every > 0 && self.epochs_done % self.config.checkpoint_every == 0 {
            let dir = self.config.checkpoint_dir.clone().expect("validated");
            self.save_checkpoint(&dir)?;
        }
        Ok(self.reports.last())
    }

    /// Runs the remaining epochs and returns the final model and report.
    pub fn run(mut self) -> Result<(ScorerParams, TrainReport), TrainError> {
        while self.run_epoch()?.is_some() {}
        self.finish()
    }

    pub fn finish(self) -> Result<(ScorerParams, TrainReport), TrainError> {
        let final_rho_hat = eval::predicted_entity_ratio(&self.params, self.train)?;
        Ok((
            self.params,
            TrainReport {
                epochs: self.reports,
                total_steps: self.total_steps,
                final_rho_hat,
            },
        ))
    }

    /// Writes `model.json`, `train_config.json` and `trainer_state.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        self.params.save(&dir.join("model.json"))?;
        write_json(&dir.join("train_config.json"), &self.config)?;
        let state = TrainerState {
            format: STATE_FORMAT.to_string(),
            epochs_done: self.epochs_done,
            step: self.step,
            optimizer: self.optimizer.clone(),
            reports: self.reports.clone(),
        };
        write_json(&dir.join("trainer_state.json"), &state)
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output. The
    /// datasets must be the ones the checkpointed run used.
    pub fn resume(dir: &Path, train: &'a Dataset, dev: Option<&'a Dataset>) -> Result<Trainer<'a>, TrainError> {
        let params = ScorerParams::load(&dir.join("model.json"))?;
        let config: TrainConfig = read_json(&dir.join("train_config.json"))?;
        let state: TrainerState = read_json(&dir.join("trainer_state.json"))?;
        if state.format != STATE_FORMAT {
            return Err(io_error(dir, format!("unknown trainer state format {:?}", state.format)));
        }
        let mut trainer = Trainer::new(params, config, train, dev)?;
        if !state.optimizer.first.is_empty() && state.optimizer.first.len() != trainer.params.values().len() {
            return Err(io_error(dir, "optimizer state does not match the model"));
        }
        trainer.optimizer = state.optimizer;
        trainer.epochs_done = state.epochs_done;
        trainer.step = state.step;
        trainer.reports = state.reports;
        Ok(trainer)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(path, e))
}

fn append_log(path: &Path, report: &EpochReport) -> Result<(), TrainError> {
    let file = File::options()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    let mut out = BufWriter::new(file);
    let line = serde_json::to_string(report).map_err(|e| io_error(path, e))?;
    writeln!(out, "{line}").map_err(|e| io_error(path, e))
}

/// Initializes a model for `dataset` and trains it.
pub fn train(
    dataset: &Dataset,
    scorer: &ScorerConfig,
    config: &TrainConfig,
    dev: Option<&Dataset>,
) -> Result<(ScorerParams, TrainReport), TrainError> {
    let params = ScorerParams::for_dataset(scorer.clone(), dataset)?;
    Trainer::new(params, config.clone(), dataset, dev)?.run()
}
