//! Losses, optimizers, the training loop and checkpoints.

pub mod checkpoint;
pub mod optim;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptimizerSnapshot};
pub use optim::{Hyper, Optimizer, OptimizerKind};

use crate::data::{normalize, LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};
use crate::metrics::{confusion, dice, region_masks, Region};
use crate::network::{argmax_channels, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensorcore::{self, Gradients, Tape, Var};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    CrossEntropy,
    #[default]
    DicePlusCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub dice_eps: f64,
    /// Seeds the batch sampler; network initialization uses its own seed.
    pub seed: u64,
    /// When false the sampler is seeded from OS entropy.
    pub deterministic: bool,
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Validate every this many steps; 0 validates once per epoch.
    pub val_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = Hyper::default();
        TrainConfig {
            steps: 500,
            batch_size: 1,
            learning_rate: h.learning_rate,
            optimizer: OptimizerKind::Adam,
            momentum: h.momentum,
            beta1: h.beta1,
            beta2: h.beta2,
            adam_eps: h.eps,
            loss: LossKind::DicePlusCe,
            dice_eps: DICE_EPS,
            seed: 0,
            deterministic: true,
            checkpoint_path: None,
            checkpoint_interval: 0,
            val_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [("adam_eps", self.adam_eps), ("dice_eps", self.dice_eps)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// A normalized training case.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub labels: LabelVolume,
}

impl<T: Scalar> Sample<T> {
    /// Normalizes `volume` per channel and pairs it with its labels.
    pub fn new(id: impl Into<String>, volume: &MultiModalVolume, labels: LabelVolume) -> Result<Self> {
        if volume.spatial_shape() != labels.shape() {
            return Err(Error::shape("sample", volume.spatial_shape(), labels.shape()));
        }
        Ok(Sample {
            id: id.into(),
            image: normalize(volume).to_tensor(),
            labels,
        })
    }
}

/// Soft Dice loss of class probabilities against a label map.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, gt: &LabelVolume) -> Result<f64> {
    check_volume(probs, gt)?;
    Ok(tensorcore::soft_dice(probs, gt.labels(), DICE_EPS)?.as_f64())
}

/// Voxel-mean cross entropy of class probabilities against a label map.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, gt: &LabelVolume) -> Result<f64> {
    check_volume(probs, gt)?;
    Ok(tensorcore::cross_entropy(probs, gt.labels())?.as_f64())
}

fn check_volume<T>(probs: &Tensor<T>, gt: &LabelVolume) -> Result<()> {
    if probs.spatial_shape() != gt.shape() {
        return Err(Error::shape("loss", probs.spatial_shape(), gt.shape()));
    }
    Ok(())
}

/// Records the configured loss of `probs` on the tape.
pub fn loss_on<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[u8], kind: LossKind, dice_eps: f64) -> Result<Var> {
    match kind {
        LossKind::Dice => tape.soft_dice_loss(probs, labels, dice_eps),
        LossKind::CrossEntropy => tape.cross_entropy_loss(probs, labels),
        LossKind::DicePlusCe => {
            let d = tape.soft_dice_loss(probs, labels, dice_eps)?;
            let c = tape.cross_entropy_loss(probs, labels)?;
            tape.add(d, c)
        }
    }
}

/// One forward/backward/update over `batch`; returns the mean loss.
///
/// Gradients are averaged over the batch. A non-finite loss or gradient
/// aborts before any parameter is touched.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    batch: &[&Sample<T>],
    optimizer: &mut Optimizer<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = Gradients::new();
    let mut total = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let x = tape.input(sample.image.clone());
        let probs = net.forward_on(&mut tape, x)?;
        let loss = loss_on(&mut tape, probs, sample.labels.labels(), cfg.loss, cfg.dice_eps)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NumericFailure { what: "loss", step, value });
        }
        total += value;
        tape.backward(loss, &mut grads)?;
    }
    let b = batch.len() as f64;
    grads.scale(T::lit(1.0 / b));
    for (_, g) in grads.iter() {
        if let Some(&v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                what: "gradient",
                step,
                value: v.as_f64(),
            });
        }
    }
    optimizer.step(net, &grads)?;
    Ok(total / b)
}

/// Position of the batch sampler.
///
/// Sample `p` of the stream comes from epoch `p / n`, whose visiting order is
/// a permutation drawn from `seed` and the epoch index alone, so the stream
/// can be resumed from `position` without replaying it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub position: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        SamplerState { seed, position: 0 }
    }

    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Next `b` dataset indices from a dataset of `n` samples.
    pub fn next_batch(&mut self, n: usize, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for _ in 0..b {
            let epoch = self.position / n as u64;
            let within = (self.position % n as u64) as usize;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(epoch, n)));
            }
            out.push(cached.as_ref().expect("filled above").1[within]);
            self.position += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// Completed steps after this row's update.
    pub step: u64,
    pub loss: f64,
    /// Mean validation Dice for WT, TC, ET when validation ran.
    pub val_dice: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "step,loss,val_dice_wt,val_dice_tc,val_dice_et";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.step, r.loss);
            match r.val_dice {
                Some([a, b, c]) => {
                    let _ = writeln!(out, ",{a},{b},{c}");
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }

    pub fn last_val(&self) -> Option<[f64; 3]> {
        self.rows.iter().rev().find_map(|r| r.val_dice)
    }
}

/// Mean WT/TC/ET Dice of the network's argmax segmentation over `samples`.
pub fn validation_dice<T: Scalar>(net: &Network<T>, samples: &[Sample<T>]) -> Result<[f64; 3]> {
    let mut sums = [0.0; 3];
    for s in samples {
        let pred = argmax_channels(&net.forward(&s.image)?);
        let pm = region_masks(&pred)?;
        let gm = region_masks(s.labels.labels())?;
        for (k, region) in Region::ALL.into_iter().enumerate() {
            sums[k] += dice(&confusion(pm.get(region), gm.get(region))?);
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(sums.map(|s| s / n))
}

/// Network, optimizer and sampler advanced together one step at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    net: Network<T>,
    optimizer: Optimizer<T>,
    sampler: SamplerState,
    step: u64,
    config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = if config.deterministic { config.seed } else { rand::random() };
        Ok(Trainer {
            net,
            optimizer: Optimizer::new(config.optimizer, config.hyper()),
            sampler: SamplerState::new(seed),
            step: 0,
            config,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net: ckpt.network()?,
            optimizer: ckpt.optimizer(config.optimizer, config.hyper())?,
            sampler: ckpt.sampler,
            step: ckpt.step,
            config,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, self.step, self.sampler, Some(&self.optimizer))
    }

    /// Draws the next batch from `train` and applies one update.
    pub fn step_once(&mut self, train: &[Sample<T>]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut sampler = self.sampler;
        let idx = sampler.next_batch(train.len(), self.config.batch_size);
        let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &train[i]).collect();
        let loss = train_step(&mut self.net, &batch, &mut self.optimizer, &self.config, self.step)?;
        self.sampler = sampler;
        self.step += 1;
        Ok(loss)
    }

    fn val_due(&self, n_train: usize) -> bool {
        let every = match self.config.val_interval {
            0 => n_train.div_ceil(self.config.batch_size) as u64,
            k => k,
        };
        self.step % every.max(1) == 0
    }

    /// Trains until `config.steps` steps are complete, appending one history
    /// row per step and writing checkpoints when a path is configured.
    pub fn run(&mut self, train: &[Sample<T>], val: &[Sample<T>], history: &mut History) -> Result<()> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        while self.step < self.config.steps {
            let loss = self.step_once(train)?;
            let val_dice = if !val.is_empty() && self.val_due(train.len()) {
                Some(validation_dice(&self.net, val)?)
            } else {
                None
            };
            history.rows.push(HistoryRow {
                step: self.step,
                loss,
                val_dice,
            });
            let interval = self.config.checkpoint_interval;
            if let Some(path) = &self.config.checkpoint_path {
                if interval > 0 && self.step % interval == 0 && self.step < self.config.steps {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = &self.config.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput<T> {
    pub network: Network<T>,
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Trains `net` on `train` for `cfg.steps` steps, validating on `val`.
pub fn fit<T: Scalar>(net: Network<T>, train: &[Sample<T>], val: &[Sample<T>], cfg: &TrainConfig) -> Result<FitOutput<T>> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut history = History::default();
    trainer.run(train, val, &mut history)?;
    let checkpoint = trainer.checkpoint();
    Ok(FitOutput {
        network: trainer.into_network(),
        checkpoint,
        history,
    })
}
