//! Seeded mini-batch training with Adam, periodic validation, checkpoints
//! and bitwise-reproducible resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use super::metrics::{mse_loss, Nmse, NmseAccumulator};
use crate::autodiff::Graph;
use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::model::{Stnet, StnetParams};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, checked before every step.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (needs `checkpoint_dir`).
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many completed epochs.
    pub validate_every: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// Stop once training-set NMSE (checked at validation points) reaches
    /// this level.
    pub target_train_nmse_db: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            epochs: 1000,
            max_steps: None,
            lr: 1e-3,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            validate_every: 1,
            patience: None,
            target_train_nmse_db: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        // lr = 0 is accepted as a frozen-parameter run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validation cadence must be at least 1 epoch".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint cadence must be at least 1 step".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_nmse_db: Option<f64>,
    pub val_nmse_db: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub epoch: usize,
    pub path: PathBuf,
    pub rng: RngState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Running,
    Epochs,
    MaxSteps,
    Target,
    Patience,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub stop: StopReason,
}

impl Default for TrainHistory {
    fn default() -> Self {
        TrainHistory {
            epochs: Vec::new(),
            step_losses: Vec::new(),
            checkpoints: Vec::new(),
            stop: StopReason::Running,
        }
    }
}

impl TrainHistory {
    /// Equality of everything except wall-clock times and checkpoint paths.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let key = |e: &EpochRecord| {
            (
                e.epoch,
                e.step,
                e.train_loss.to_bits(),
                e.train_nmse_db.map(f64::to_bits),
                e.val_nmse_db.map(f64::to_bits),
            )
        };
        bits(&self.step_losses) == bits(&other.step_losses)
            && self.epochs.iter().map(key).eq(other.epochs.iter().map(key))
            && self.stop == other.stop
    }

    pub fn final_train_nmse_db(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.train_nmse_db)
    }
}

/// Training state; everything needed for an exact resume.
pub struct Trainer {
    pub params: StnetParams<f32>,
    pub config: TrainConfig,
    pub history: TrainHistory,
    net: Stnet,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch_loss: f64,
    epoch_steps: u64,
    best_val: Option<f64>,
    stale: usize,
    wall_offset: f64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(params: StnetParams<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net: params.architecture()?,
            adam: Adam::new(config.adam()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            history: TrainHistory::default(),
            epoch: 0,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            epoch_loss: 0.0,
            epoch_steps: 0,
            best_val: None,
            stale: 0,
            wall_offset: 0.0,
            last_checkpoint: None,
        })
    }

    /// Continue from a checkpoint. `config` overrides the saved one when
    /// given (for example to extend `max_steps`); the seed must match.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config = match config {
            Some(c) if c.seed != ck.train.seed => {
                return Err(Error::Config(format!(
                    "resume seed {} differs from checkpoint seed {}",
                    c.seed, ck.train.seed
                )))
            }
            Some(c) => c,
            None => ck.train.clone(),
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.rng.seed);
        rng.set_word_pos(ck.rng.word_pos);
        let params = StnetParams {
            config: ck.model.clone(),
            store: ck.params,
        };
        Ok(Trainer {
            net: params.architecture()?,
            adam: Adam::from_state(config.adam(), ck.adam_t, ck.adam_m, ck.adam_v),
            rng,
            params,
            config,
            history: ck.history,
            epoch: ck.epoch,
            step: ck.step,
            order: ck.order,
            cursor: ck.cursor,
            epoch_loss: ck.epoch_loss,
            epoch_steps: ck.epoch_steps,
            best_val: ck.best_val,
            stale: ck.stale,
            wall_offset: ck.wall_time_s,
            last_checkpoint: Some(path.to_path_buf()),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn checkpoint(&self, wall_time_s: f64) -> Checkpoint {
        Checkpoint {
            model: self.params.config.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            order: self.order.clone(),
            cursor: self.cursor,
            epoch_loss: self.epoch_loss,
            epoch_steps: self.epoch_steps,
            best_val: self.best_val,
            stale: self.stale,
            wall_time_s,
            history: self.history.clone(),
            rng: self.rng_state(),
            adam: self.adam.config,
            adam_t: self.adam.steps(),
            params: self.params.store.clone(),
            adam_m: self.adam.first_moments().clone(),
            adam_v: self.adam.second_moments().clone(),
        }
    }

    pub fn save(&mut self, path: &Path, wall_time_s: f64) -> Result<()> {
        self.history.checkpoints.push(CheckpointRecord {
            step: self.step,
            epoch: self.epoch,
            path: path.to_path_buf(),
            rng: self.rng_state(),
        });
        save_checkpoint(path, &self.checkpoint(wall_time_s))?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// One Adam step on the given samples; returns the batch loss.
    pub fn step_on(&mut self, data: &DatasetContainer, indices: &[usize]) -> Result<f64> {
        let batch = data.batch(indices)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let y = self.net.forward_graph(&mut g, &self.params.store, x)?;
        let loss = mse_loss(&mut g, x, y)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: value,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let grads = g.backward(loss)?.into_named();
        self.adam.step(&mut self.params.store, &grads)?;
        Ok(value)
    }

    fn check_dims(&self, data: &DatasetContainer) -> Result<()> {
        let c = &self.params.config;
        if (data.n_c, data.n_t) != (c.n_c, c.n_t) {
            return Err(Error::DimMismatch(format!(
                "dataset is {}×{}, model expects {}×{}",
                data.n_c, data.n_t, c.n_c, c.n_t
            )));
        }
        Ok(())
    }

    /// Train until the configured epoch/step budget or an early stop.
    pub fn run(&mut self, train: &DatasetContainer, val: Option<&DatasetContainer>) -> Result<&TrainHistory> {
        self.check_dims(train)?;
        if let Some(v) = val {
            self.check_dims(v)?;
        }
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let started = Instant::now();
        let wall = |offset: f64| offset + started.elapsed().as_secs_f64();
        let n = train.len();
        self.history.stop = StopReason::Running;
        loop {
            if self.epoch >= self.config.epochs {
                self.history.stop = StopReason::Epochs;
                break;
            }
            if self.order.is_empty() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            while self.cursor < n {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let end = (self.cursor + self.config.batch_size).min(n);
                let idx = self.order[self.cursor..end].to_vec();
                let loss = self.step_on(train, &idx)?;
                self.cursor = end;
                self.step += 1;
                self.epoch_loss += loss;
                self.epoch_steps += 1;
                self.history.step_losses.push(loss);
                if let (Some(every), Some(dir)) = (self.config.checkpoint_every, self.config.checkpoint_dir.clone()) {
                    if self.step % every == 0 {
                        let path = dir.join(format!("step-{:08}.ckpt", self.step));
                        self.save(&path, wall(self.wall_offset))?;
                    }
                }
            }
            if self.cursor < n {
                self.history.stop = StopReason::MaxSteps;
                break;
            }
            self.epoch += 1;
            let mut record = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                train_loss: self.epoch_loss / self.epoch_steps.max(1) as f64,
                train_nmse_db: None,
                val_nmse_db: None,
                wall_time_s: wall(self.wall_offset),
            };
            self.order.clear();
            self.cursor = 0;
            self.epoch_loss = 0.0;
            self.epoch_steps = 0;
            let mut stop = None;
            if self.epoch % self.config.validate_every == 0 {
                if let Some(target) = self.config.target_train_nmse_db {
                    let db = evaluate_nmse(&self.params, train)?.db;
                    record.train_nmse_db = Some(db);
                    if db <= target {
                        stop = Some(StopReason::Target);
                    }
                }
                if let Some(v) = val {
                    let db = evaluate_nmse(&self.params, v)?.db;
                    record.val_nmse_db = Some(db);
                    if self.best_val.is_none_or(|b| db < b) {
                        self.best_val = Some(db);
                        self.stale = 0;
                    } else {
                        self.stale += 1;
                        if self.config.patience.is_some_and(|p| self.stale >= p) {
                            stop = stop.or(Some(StopReason::Patience));
                        }
                    }
                }
            }
            self.history.epochs.push(record);
            if let Some(reason) = stop {
                self.history.stop = reason;
                break;
            }
        }
        self.wall_offset = wall(self.wall_offset);
        if let Some(dir) = self.config.checkpoint_dir.clone() {
            let path = dir.join("final.ckpt");
            self.save(&path, self.wall_offset)?;
        }
        Ok(&self.history)
    }
}

/// Train `params` in place and return the history.
pub fn train(
    params: &mut StnetParams<f32>,
    train: &DatasetContainer,
    val: Option<&DatasetContainer>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(params.clone(), config.clone())?;
    trainer.run(train, val)?;
    *params = trainer.params;
    Ok(trainer.history)
}

const EVAL_CHUNK: usize = 16;

/// Physical-domain NMSE of the model's reconstructions over a dataset.
pub fn evaluate_nmse(params: &StnetParams<f32>, data: &DatasetContainer) -> Result<Nmse> {
    let c = &params.config;
    if (data.n_c, data.n_t) != (c.n_c, c.n_t) {
        return Err(Error::DimMismatch(format!(
            "dataset is {}×{}, model expects {}×{}",
            data.n_c, data.n_t, c.n_c, c.n_t
        )));
    }
    let norm = data.meta.normalization;
    let per = data.sample_len();
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| {
            let batch = data.batch(idx)?;
            let recon = params.reconstruct(&batch)?;
            let mut acc = NmseAccumulator::default();
            for (s, r) in batch.data().chunks(per).zip(recon.data().chunks(per)) {
                let h: Vec<f64> = s.iter().map(|&v| norm.denormalize(v as f64)).collect();
                let h_hat: Vec<f64> = r.iter().map(|&v| norm.denormalize(v as f64)).collect();
                acc.push(&h, &h_hat);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = NmseAccumulator::default();
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub gamma: String,
    pub split: Option<String>,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub samples: usize,
    pub excluded: usize,
}

pub fn evaluate(params: &StnetParams<f32>, data: &DatasetContainer) -> Result<EvalReport> {
    let nmse = evaluate_nmse(params, data)?;
    Ok(EvalReport {
        scenario: data.meta.scenario.to_string(),
        gamma: params.config.gamma().to_string(),
        split: data.meta.split.clone(),
        nmse_linear: nmse.linear,
        nmse_db: nmse.db,
        samples: nmse.samples,
        excluded: nmse.excluded,
    })
}
