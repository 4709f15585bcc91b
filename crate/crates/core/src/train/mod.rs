//! Deterministic fine-tuning loop.
//!
//! Each epoch visits the training set in an order drawn from stream `epoch`
//! of the shuffle seed, so resuming from an epoch-boundary checkpoint
//! replays exactly the batches the uninterrupted run would have seen. The
//! last incomplete batch is kept. Update `t` (0-based, counted across
//! epochs) uses `lr_at(t)`.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::lr_at;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::Modality;
use crate::loss::LossKind;
use crate::model::{self, DualEncoder, Model, Prepared, SeedPlan};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            epochs: 40,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: adam.weight_decay,
            warmup_epochs: 1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            loss: LossKind::LabelGuided,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::InvalidConfig("learning rate, weight decay and eps must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the epoch log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Updates completed so far.
    pub step: u64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

impl EpochRecord {
    /// `epoch, step, lr, loss` with round-trip float formatting.
    pub fn to_line(&self) -> String {
        format!("{}, {}, {:?}, {:?}", self.epoch, self.step, self.lr, self.loss)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Inputs embedded once, since the embedding tables are frozen.
struct PreparedPair {
    image: Prepared,
    text: Prepared,
    label: usize,
}

pub struct Trainer {
    pub run: RunConfig,
    seeds: SeedPlan,
    data: Vec<PreparedPair>,
    state: TrainState,
}

impl Trainer {
    pub fn new(run: &RunConfig, data: &Dataset) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model_config(), run.seed)?;
        let optim = OptimState::new(&model.params);
        let state = TrainState {
            model,
            optim,
            epoch: 0,
            log: Vec::new(),
        };
        Self::with_state(run.clone(), data, state)
    }

    fn with_state(run: RunConfig, data: &Dataset, state: TrainState) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        check_dataset(&run, data)?;
        let data = data
            .samples
            .iter()
            .map(|s| {
                Ok(PreparedPair {
                    image: state.model.prepare(Modality::Image, s)?,
                    text: state.model.prepare(Modality::Text, s)?,
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            seeds: SeedPlan::new(run.seed),
            run,
            data,
            state,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<Self> {
        let state = state_from_checkpoint(ckpt)?;
        let run = RunConfig::from_toml(&ckpt.config)?;
        Self::with_state(run, data, state)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.run.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.run.train.epochs as u64
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.shuffle);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn batch<'a>(&'a self, idx: &[usize]) -> Vec<(&'a Prepared, &'a Prepared, usize)> {
        idx.iter()
            .map(|&i| {
                let p = &self.data[i];
                (&p.image, &p.text, p.label)
            })
            .collect()
    }

    /// Mean batch loss over the training set in dataset order, no updates.
    pub fn mean_loss(&self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(self.run.train.batch_size) {
            total += model::batch_loss(&self.state.model, &self.state.model.params, &self.batch(chunk), self.run.train.loss)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Runs one epoch. On a non-finite loss or gradient the state is rolled
    /// back to the start of the epoch and the error returned.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let snapshot = (self.state.model.params.clone(), self.state.optim.clone());
        match self.epoch_inner() {
            Ok(rec) => Ok(rec),
            Err(e) => {
                self.state.model.params = snapshot.0;
                self.state.optim = snapshot.1;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<EpochRecord> {
        let cfg = self.run.train.clone();
        let adam = cfg.adamw();
        let total = self.total_steps();
        let warmup = self.steps_per_epoch() * cfg.warmup_epochs as u64;
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch);
        let mut sum = 0.0;
        let mut lr = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for chunk in &chunks {
            let step = self.state.optim.step;
            lr = lr_at(step, total, warmup, cfg.base_lr);
            let batch = self.batch(chunk);
            let (loss, grads) = model::loss_and_grads(&self.state.model, &self.state.model.params, &batch, cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, step, loss });
            }
            adamw_step(&mut self.state.model.params, &grads, &mut self.state.optim, lr, &adam)?;
            sum += loss;
        }
        self.state.epoch += 1;
        let rec = EpochRecord {
            epoch: self.state.epoch,
            step: self.state.optim.step,
            lr,
            loss: sum / chunks.len() as f64,
        };
        info!("{}", rec.to_line());
        self.state.log.push(rec);
        Ok(rec)
    }

    /// Trains until `until` epochs are complete (capped at the configured
    /// count), calling `on_epoch` after each one.
    pub fn run_until(&mut self, until: usize, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.state.epoch < until.min(self.run.train.epochs) {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.run.train.epochs, |_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        state_to_checkpoint(&self.run, &self.state)
    }
}

/// Rejects datasets whose dimensions differ from the config.
pub fn check_dataset(run: &RunConfig, data: &Dataset) -> Result<()> {
    let (a, b) = (&data.config, run.synth());
    let same = a.num_classes == b.num_classes
        && a.side == b.side
        && a.patch_dim == b.patch_dim
        && a.vocab_size == b.vocab_size
        && a.text_len <= run.model.max_len;
    if !same {
        return Err(Error::InvalidConfig(format!(
            "dataset (classes {}, side {}, patch_dim {}, vocab {}, text_len {}) does not match the run config",
            a.num_classes, a.side, a.patch_dim, a.vocab_size, a.text_len
        )));
    }
    Ok(())
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: Checkpoint,
}

/// Trains from scratch for the configured number of epochs.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(run, data)?;
    let initial_loss = trainer.mean_loss()?;
    trainer.run()?;
    let final_loss = trainer.mean_loss()?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        state: trainer.into_state(),
        initial_loss,
        final_loss,
        checkpoint,
    })
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).expect("one value")
}

pub fn state_to_checkpoint(run: &RunConfig, state: &TrainState) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = state
        .model
        .frozen
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (n, t) in state.model.params.iter() {
        tensors.push((format!("train.{n}"), t.clone()));
    }
    for (n, t) in state.optim.m.iter() {
        tensors.push((format!("optim.m.{n}"), t.clone()));
    }
    for (n, t) in state.optim.v.iter() {
        tensors.push((format!("optim.v.{n}"), t.clone()));
    }
    tensors.push(("state.step".into(), scalar(state.optim.step as f64)));
    tensors.push(("state.epoch".into(), scalar(state.epoch as f64)));
    // Shuffling for epoch e uses stream e, so the next stream is the epoch count.
    tensors.push(("state.rng_stream".into(), scalar(state.epoch as f64)));
    let log: Vec<f64> = state
        .log
        .iter()
        .flat_map(|r| [r.epoch as f64, r.step as f64, r.lr, r.loss])
        .collect();
    tensors.push(("state.log".into(), Tensor::new(vec![state.log.len(), 4], log).expect("log shape")));
    Checkpoint {
        config: run.to_toml(),
        tensors,
    }
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
    let run = RunConfig::from_toml(&ckpt.config)?;
    let cfg = run.model_config();
    let frozen = DualEncoder::from_named(&cfg, |n| ckpt.get(n).cloned())?;
    let collect = |prefix: &str| {
        let mut set = ParamSet::new();
        for (n, t) in &ckpt.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                set.insert(rest.to_string(), t.clone());
            }
        }
        set
    };
    let params = collect("train.");
    let expected = model::init_trainable(&cfg, &SeedPlan::new(run.seed))?;
    for (n, t) in expected.iter() {
        match params.get(n) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "`{n}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing trainable tensor `{n}`"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Checkpoint("checkpoint has unexpected trainable tensors".into()));
    }
    let m = collect("optim.m.");
    let v = collect("optim.v.");
    if !m.names().eq(params.names()) || !v.names().eq(params.names()) {
        return Err(Error::Checkpoint("optimizer moments do not match trainable tensors".into()));
    }
    let read = |name: &str| -> Result<f64> {
        ckpt.get(name)
            .filter(|t| t.numel() == 1)
            .map(|t| t.data()[0])
            .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
    };
    let step = read("state.step")? as u64;
    let epoch = read("state.epoch")? as usize;
    let log_t = ckpt
        .get("state.log")
        .ok_or_else(|| Error::Checkpoint("missing `state.log`".into()))?;
    if log_t.shape().len() != 2 || log_t.cols() != 4 {
        return Err(Error::Checkpoint("malformed `state.log`".into()));
    }
    let log = (0..log_t.rows())
        .map(|i| {
            let r = log_t.row(i);
            EpochRecord {
                epoch: r[0] as usize,
                step: r[1] as u64,
                lr: r[2],
                loss: r[3],
            }
        })
        .collect();
    Ok(TrainState {
        model: Model { config: cfg, frozen, params },
        optim: OptimState { m, v, step },
        epoch,
        log,
    })
}
