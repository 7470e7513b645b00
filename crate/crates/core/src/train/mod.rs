//! Training loop, evaluation, metrics and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CheckpointLayer, MAGIC, VERSION};
pub use config::{preset_defaults, DatasetKind, MuSchedule, TrainConfig};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_order, load_cifar10_dir, load_mnist_dir, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, init_weights, Network, NetworkSpec};
use crate::oracle::cross_entropy_fp;

pub const METRICS_HEADER: &str = "epoch,train_acc,val_acc,fp64_train_loss,wall_seconds";

/// Random stream for `(seed, epoch, batch)`. Epoch 0 is reserved for
/// weight initialization; the last batch slot of each epoch shuffles it.
pub fn substream(seed: u64, epoch: usize, batch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

const SHUFFLE_SLOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number; 0 for an evaluation-only run.
    pub epoch: usize,
    pub m_u: u32,
    /// Accuracy of the training-mode forward passes seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Mean fp64 cross-entropy of the integer logits at their true scale.
    pub train_loss: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{:.6},{:.3}",
            self.epoch, self.train_acc, val, self.train_loss, self.wall_seconds
        )
    }
}

/// Number of correct arg-max predictions and summed fp64 cross-entropy.
pub fn score_logits(logits: &crate::qtensor::QTensor, labels: &[usize]) -> (usize, f64) {
    let classes = logits.shape()[1];
    let values = logits.to_f64();
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    let loss = values
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &l)| cross_entropy_fp(row, l))
        .sum();
    (correct, loss)
}

/// Top-1 accuracy of `net` on `ds`, in evaluation mode.
pub fn evaluate(net: &mut Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let batch = net.batch_limit();
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in order.chunks(batch) {
        let (x, labels) = ds.batch(chunk);
        let pred = net.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Owns a network and its training data; runs one epoch at a time.
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    train: Dataset,
    val: Option<Dataset>,
    /// Completed epochs.
    epoch: usize,
    started: Instant,
}

impl Trainer {
    /// Fresh weights from `cfg.seed`, or the state stored at `cfg.resume`.
    pub fn new(cfg: TrainConfig, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        let mut spec = NetworkSpec::preset(&cfg.arch)?;
        let check = |ds: &Dataset| -> Result<()> {
            if ds.sample_shape() != spec.input_shape {
                return Err(Error::Config(format!(
                    "`{}` expects {:?} inputs, dataset has {:?}",
                    cfg.arch,
                    spec.input_shape,
                    ds.sample_shape()
                )));
            }
            Ok(())
        };
        check(&train)?;
        if let Some(v) = &val {
            check(v)?;
        }
        let epoch = match &cfg.resume {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.seed != cfg.seed {
                    return Err(Error::Config(format!(
                        "checkpoint was trained with seed {}, config says {}",
                        ck.seed, cfg.seed
                    )));
                }
                ck.restore_into(&mut spec)?;
                ck.epoch
            }
            None => {
                init_weights(&mut spec, cfg.init, &mut substream(cfg.seed, 0, 0));
                0
            }
        };
        let net = Network::new(spec, cfg.rounding, cfg.batch_size)?;
        Ok(Self { cfg, net, train, val, epoch, started: Instant::now() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn validation_set(&self) -> Option<&Dataset> {
        self.val.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let stream = (self.epoch as u64 + 1) << 32;
        Checkpoint::capture(self.net.spec(), self.epoch, self.cfg.seed, stream)
    }

    pub fn evaluate(&mut self, ds: &Dataset) -> Result<f64> {
        evaluate(&mut self.net, ds)
    }

    /// One pass over the training set, then validation if due.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch + 1;
        let m_u = self.cfg.mu_schedule.at(epoch);
        let order = epoch_order(self.train.len(), self.cfg.shuffle, &mut substream(self.cfg.seed, epoch, SHUFFLE_SLOT));
        let (mut correct, mut loss) = (0usize, 0.0);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut rng = substream(self.cfg.seed, epoch, b as u32);
            let (x, labels) = self.train.batch(chunk);
            let out = self.net.train_step(&x, &labels, m_u, &mut rng)?;
            let (c, l) = score_logits(&out.logits, &labels);
            correct += c;
            loss += l;
        }
        self.epoch = epoch;
        let n = self.train.len().max(1) as f64;
        let due = epoch.is_multiple_of(self.cfg.eval_every) || epoch == self.cfg.epochs;
        let val_acc = match (&self.val, due) {
            (Some(v), true) => Some(evaluate(&mut self.net, v)?),
            _ => None,
        };
        Ok(EpochMetrics {
            epoch,
            m_u,
            train_acc: correct as f64 / n,
            val_acc,
            train_loss: loss / n,
            wall_seconds: if self.cfg.wall_time { self.started.elapsed().as_secs_f64() } else { 0.0 },
        })
    }
}

/// Training and validation sets named by `cfg`, truncated to its limits.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.data_dir()?;
    let (train, val) = match cfg.dataset()? {
        DatasetKind::Mnist => (load_mnist_dir(&dir, Split::Train)?, load_mnist_dir(&dir, Split::Test)?),
        DatasetKind::Cifar10 => (load_cifar10_dir(&dir, Split::Train)?, load_cifar10_dir(&dir, Split::Test)?),
    };
    let train = match cfg.train_limit {
        Some(n) => train.take(n),
        None => train,
    };
    let val = match cfg.val_limit {
        Some(n) => val.take(n),
        None => val,
    };
    Ok((train, val))
}

fn open_metrics(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)?
    } else {
        File::create(path)?
    };
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub final_val_acc: Option<f64>,
}

/// Loads the data and trains per `cfg`, writing metrics and checkpoints as
/// configured. `progress` sees every epoch's metrics.
pub fn run_training(cfg: &TrainConfig, progress: impl FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    let (train, val) = load_datasets(cfg)?;
    run_training_on(cfg, train, val, progress)
}

/// [`run_training`] on datasets already in memory.
pub fn run_training_on(
    cfg: &TrainConfig,
    train: Dataset,
    val: Dataset,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg.clone(), train, Some(val))?;
    let mut metrics = cfg
        .metrics
        .as_deref()
        .map(|p| open_metrics(p, cfg.resume.is_some()))
        .transpose()?;
    let mut epochs = Vec::new();
    if cfg.epochs == 0 || trainer.completed_epochs() >= cfg.epochs {
        let val = trainer.validation_set().cloned().expect("validation set");
        let acc = trainer.evaluate(&val)?;
        let m = EpochMetrics {
            epoch: trainer.completed_epochs(),
            m_u: cfg.mu_schedule.at(trainer.completed_epochs().max(1)),
            train_acc: 0.0,
            val_acc: Some(acc),
            train_loss: 0.0,
            wall_seconds: 0.0,
        };
        progress(&m);
        epochs.push(m);
    }
    while trainer.completed_epochs() < cfg.epochs {
        let m = trainer.run_epoch()?;
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
        }
        if let Some(path) = &cfg.checkpoint {
            if m.epoch % cfg.checkpoint_every == 0 || m.epoch == cfg.epochs {
                trainer.checkpoint().save(path)?;
            }
        }
        progress(&m);
        epochs.push(m);
    }
    let final_val_acc = epochs.iter().rev().find_map(|m| m.val_acc);
    Ok(TrainSummary { epochs, final_val_acc })
}
