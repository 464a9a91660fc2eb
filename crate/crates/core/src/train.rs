//! Mini-batch training loop with cosine-annealed Adam, per-epoch
//! validation, metrics CSV and best/last checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;

use crate::autograd::{Mode, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_indexed, collate, AugmentationPolicy, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{jaccard_loss, EvalReport, LossConfig};
use crate::network::Model;
use crate::optim::{collect_grads, cosine_lr, AdamConfig, OptimState, ScheduleConfig};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,val_iou,val_dice";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Batches buffered ahead of the optimizer by the augmentation worker.
const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub eta_min: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub augment: AugmentationPolicy,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Probability cut-off for validation masks.
    pub threshold: f64,
    /// Stop after this many epochs in the current invocation; the schedule
    /// still spans `epochs`.
    pub max_epochs_this_run: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr_max: 1e-4,
            eta_min: 0.0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentationPolicy::default(),
            seed: 0,
            threshold: 0.5,
            max_epochs_this_run: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) || !(self.eta_min >= 0.0 && self.eta_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= lr_max with lr_max > 0, got lr_max={} eta_min={}",
                self.lr_max, self.eta_min
            )));
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_train: usize) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_max,
            eta_min: self.eta_min,
            total_steps: (self.epochs * self.steps_per_epoch(n_train)) as u64,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: u64,
    pub best_val_dice: f64,
}

impl TrainState {
    pub fn new(model: Model<f32>, adam: AdamConfig) -> Self {
        let optim = OptimState::new(&model.params, adam);
        Self {
            model,
            optim,
            epoch: 0,
            best_val_dice: f64::NEG_INFINITY,
        }
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn to_checkpoint(&self, img_size: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: Some(self.optim.clone()),
            epoch: self.epoch,
            best_val_dice: self.best_val_dice,
            img_size,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let optim = ck
            .optim
            .unwrap_or_else(|| OptimState::new(&ck.model.params, AdamConfig::default()));
        Self {
            model: ck.model,
            optim,
            epoch: ck.epoch,
            best_val_dice: ck.best_val_dice,
        }
    }
}

/// One forward/backward/update on a batch. Returns the loss value.
pub fn train_step(
    state: &mut TrainState,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    lr: f64,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let (logits, vars) = state.model.forward_on(&mut tape, x, Mode::Train)?;
    let prob = tape.sigmoid(logits)?;
    let loss = jaccard_loss(&mut tape, prob, masks, loss_cfg)?;
    let value = tape.value(loss)?.item()? as f64;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &vars)?;
    state.optim.update(&mut state.model.params, &grads, lr)?;
    Ok(value)
}

/// Eval-mode IoU/Dice of every sample, batched for speed.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[SegmentationSample],
    threshold: f64,
    batch: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, y) = collate(&refs)?;
        let pred = model.predict_mask(&x, threshold)?;
        for (i, s) in chunk.iter().enumerate() {
            report.push(s.id.clone(), &pred.batch_item(i)?, &y.batch_item(i)?)?;
        }
    }
    Ok(report)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:.8},{:.6},{:.6}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_iou, self.val_dice
        )
    }
}

/// Sample order of `epoch`: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[0x5348_5546, epoch]));
    order
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
    pub img_size: usize,
}

impl OutputDir {
    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }
}

fn numerical(epoch: u64, batch: usize, lr: f64, what: &str) -> Error {
    Error::Numerical(format!("{what} at epoch {epoch}, batch {batch}, lr {lr:e}"))
}

/// Run epochs `state.epoch + 1 ..= cfg.epochs` (or fewer with
/// `max_epochs_this_run`), appending one log row per epoch.
///
/// With `out` set, the metrics CSV is appended to and `last.ckpt` is
/// rewritten after every epoch; `best.ckpt` follows the best validation
/// Dice. An empty `val` set is scored on the training samples.
pub fn train(
    state: &mut TrainState,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let schedule = cfg.schedule(train_set.len());
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    if let Some(o) = out {
        fs::create_dir_all(&o.root)?;
        if !o.metrics().exists() {
            fs::write(o.metrics(), format!("{METRICS_HEADER}\n"))?;
        }
    }
    let last_epoch = match cfg.max_epochs_this_run {
        Some(k) => (state.epoch + k as u64).min(cfg.epochs as u64),
        None => cfg.epochs as u64,
    };
    let mut logs = Vec::new();
    while state.epoch < last_epoch {
        let epoch = state.epoch + 1;
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();

        let mut losses = Vec::with_capacity(batches.len());
        let mut lr = schedule.lr_max;
        thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<(Tensor<f32>, Tensor<f32>)>>(QUEUE_DEPTH);
            let policy = &cfg.augment;
            let batches_ref = &batches;
            scope.spawn(move || {
                for idx in batches_ref {
                    let batch = {
                        let samples: Vec<SegmentationSample> = idx
                            .iter()
                            .map(|&i| {
                                if policy.is_identity() {
                                    train_set[i].clone()
                                } else {
                                    augment_indexed(&train_set[i], policy, epoch, i as u64).0
                                }
                            })
                            .collect();
                        collate(&samples.iter().collect::<Vec<_>>())
                    };
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            });
            for b in 0..batches.len() {
                let (x, y) = rx
                    .recv()
                    .map_err(|_| Error::Data("augmentation worker stopped early".into()))??;
                lr = cosine_lr(state.optim.step, &schedule);
                let loss = match train_step(state, &x, &y, lr, &cfg.loss) {
                    Err(Error::NonFinite { op }) => {
                        return Err(numerical(epoch, b, lr, &format!("non-finite value in {op}")))
                    }
                    other => other?,
                };
                if !loss.is_finite() {
                    return Err(numerical(epoch, b, lr, "NaN loss"));
                }
                losses.push(loss);
            }
            Ok(())
        })?;

        let report = evaluate(&state.model, val_set, cfg.threshold, cfg.batch_size)?;
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            step: state.optim.step,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_iou: report.mean_iou(),
            val_dice: report.mean_dice(),
        };
        let improved = log.val_dice > state.best_val_dice;
        if improved {
            state.best_val_dice = log.val_dice;
        }
        if let Some(o) = out {
            let mut row = String::new();
            let _ = writeln!(row, "{}", log.csv_row());
            fs::OpenOptions::new()
                .append(true)
                .open(o.metrics())
                .and_then(|mut f| std::io::Write::write_all(&mut f, row.as_bytes()))?;
            let ck = state.to_checkpoint(o.img_size);
            if improved {
                ck.save(&o.root.join(BEST_CHECKPOINT))?;
            }
            ck.save(&o.root.join(LAST_CHECKPOINT))?;
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Read the metrics CSV, truncated to rows with `epoch <= upto`.
pub fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e <= upto);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}
