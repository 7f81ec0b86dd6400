//! Two-phase mini-batch SGD.
//!
//! Epochs `1..=T1` minimize the phase-1 loss (normally cross-entropy) and
//! epochs `T1+1..=T` minimize the phase-2 loss (normally the IB loss). The
//! parameter sequence, the SGD velocity and the learning-rate schedule all
//! run straight through the transition.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossContext, LossSpec};
use crate::model::{ForwardTrace, Grads, MlpParams};
use crate::numerics::{argmax, SeededRng};

/// Multiplies the learning rate by `factor` from `epoch` (0-based) onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub transition_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_points: Vec<DecayPoint>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub phase1_loss: LossSpec,
    pub phase2_loss: LossSpec,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transition_epoch > self.total_epochs {
            return Err(Error::invalid(format!(
                "transition_epoch {} exceeds total_epochs {}",
                self.transition_epoch, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self
            .decay_points
            .windows(2)
            .any(|p| p[0].epoch >= p[1].epoch)
        {
            return Err(Error::invalid(
                "decay_points must be strictly increasing in epoch",
            ));
        }
        if let Some(p) = self
            .decay_points
            .iter()
            .find(|p| !(p.factor.is_finite() && p.factor > 0.0))
        {
            return Err(Error::invalid(format!(
                "decay factor must be > 0, got {}",
                p.factor
            )));
        }
        self.phase1_loss.validate()?;
        self.phase2_loss.validate()
    }
}

/// Learning rate for a 0-based epoch: linear warmup `base · (e+1)/W`, then
/// `base` times every decay factor whose epoch is `<= e`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.total_epochs
        )));
    }
    let decay: f64 = config
        .decay_points
        .iter()
        .filter(|p| p.epoch <= epoch)
        .map(|p| p.factor)
        .product();
    let ramp = if epoch < config.warmup_epochs {
        (epoch + 1) as f64 / config.warmup_epochs as f64
    } else {
        1.0
    };
    Ok(config.base_lr * ramp * decay)
}

/// `v ← momentum·v + (g + weight_decay·w)`, then `w ← w − lr·v`.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &Grads,
    velocity: &mut Grads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let shape = Grads::zeros_like(params);
    shape.check_congruent(grads)?;
    shape.check_congruent(velocity)?;
    for ((w, g), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(velocity.values_mut())
    {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("sgd step (parameters diverged)".into()));
    }
    Ok(())
}

/// Seeded permutation of `0..n` for `(seed, epoch)`, cut into batches; the
/// last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let perm = SeededRng::child(seed, epoch as u64).permutation(n);
    perm.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    FineTune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Per-sample IB weight statistics; present only for IB losses.
    pub ib_weights: Option<WeightStats>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_COLUMNS: &str =
    "epoch,phase,lr,mean_loss,train_accuracy,ib_weight_mean,ib_weight_min,ib_weight_max";

impl RunHistory {
    /// One row per epoch under [`HISTORY_COLUMNS`]; weight columns are empty
    /// for epochs without IB weights.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.phase.name(),
                r.lr,
                r.mean_loss,
                r.train_accuracy
            );
            match r.ib_weights {
                Some(w) => {
                    let _ = writeln!(out, ",{},{},{}", w.mean, w.min, w.max);
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }

    pub fn fine_tune_epochs(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.phase == Phase::FineTune)
            .count()
    }
}

pub fn train(
    model: MlpParams,
    train_ds: &Dataset,
    config: &TrainConfig,
) -> Result<(MlpParams, RunHistory)> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_ds.dim() != model.input_dim() || train_ds.num_classes() != model.num_classes() {
        return Err(Error::shape(
            "train",
            format!(
                "model {:?} vs data with {} features and {} classes",
                model.layer_sizes(),
                train_ds.dim(),
                train_ds.num_classes()
            ),
        ));
    }
    let counts = train_ds.class_counts();
    let phase1 = LossContext::new(&config.phase1_loss, counts)?;
    let mut phase2: Option<LossContext> = None;

    let mut model = model;
    let mut velocity = Grads::zeros_like(&model);
    let mut history = RunHistory::default();

    for epoch in 0..config.total_epochs {
        let (phase, ctx) = if epoch < config.transition_epoch {
            (Phase::Normal, &phase1)
        } else {
            if phase2.is_none() {
                phase2 = Some(LossContext::new(&config.phase2_loss, counts)?);
            }
            (Phase::FineTune, phase2.as_ref().unwrap())
        };
        let lr = lr_at(config, epoch)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut weights: Vec<f64> = Vec::new();

        for batch in make_batches(train_ds.len(), config.batch_size, config.seed, epoch) {
            let traces = batch
                .iter()
                .map(|&i| model.forward(train_ds.x(i)))
                .collect::<Result<Vec<ForwardTrace>>>()?;
            let pairs: Vec<(&ForwardTrace, usize)> = traces
                .iter()
                .zip(&batch)
                .map(|(t, &i)| (t, train_ds.y(i)))
                .collect();
            let bl = batch_loss(ctx, &pairs)?;
            loss_sum += bl.mean_loss * batch.len() as f64;
            correct += pairs
                .iter()
                .filter(|(t, y)| argmax(t.logits()) == *y)
                .count();
            if ctx.is_influence_balanced() {
                weights.extend(bl.weights.iter());
            }

            let mut grads = Grads::zeros_like(&model);
            for (trace, dlogits) in traces.iter().zip(&bl.dlogits) {
                grads.add_scaled(&model.backward_from_logits(trace, dlogits)?, 1.0)?;
            }
            sgd_step(
                &mut model,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
        }

        let mean_loss = loss_sum / train_ds.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {}",
                epoch + 1
            )));
        }
        let ib_weights = (!weights.is_empty()).then(|| WeightStats {
            mean: weights.iter().sum::<f64>() / weights.len() as f64,
            min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            phase,
            lr,
            mean_loss,
            train_accuracy: correct as f64 / train_ds.len() as f64,
            ib_weights,
        });
    }
    Ok((model, history))
}
