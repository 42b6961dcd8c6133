//! Loss, optimizer, learning-rate schedule, epoch loop and fold planning.

mod folds;
mod optim;

pub use folds::{class_split_counts, make_fold_plan, Fold, FoldPlan, SplitCounts};
pub use optim::{adam_step, early_stop_check, plateau_update, OptimizerState, PlateauEvent};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::GrayImage;
use crate::mask::{BinaryMask, ProbMap};
use crate::metrics::{confusion, seg_metrics, ConfusionCounts};
use crate::models::SegModel;
use crate::rng::stream;
use crate::scalar::{Precision, Scalar};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: u32,
    /// The learning rate is divided by this on a plateau.
    pub plateau_factor: f64,
    pub early_stop_patience: u32,
    /// Minimum absolute drop in validation loss that counts as improvement.
    pub improvement_threshold: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_epochs: 40,
            plateau_patience: 3,
            plateau_factor: 5.0,
            early_stop_patience: 8,
            improvement_threshold: 1e-9,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if self.plateau_factor.is_nan() || self.plateau_factor <= 1.0 {
            return bad("plateau_factor must exceed 1");
        }
        if self.improvement_threshold.is_nan() || self.improvement_threshold < 0.0 {
            return bad("improvement_threshold must be non-negative");
        }
        Ok(())
    }
}

/// One training example: a grayscale image and its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub target: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: GrayImage, target: BinaryMask) -> Result<Self> {
        if image.dims() != target.dims() {
            return Err(Error::dim("sample", format!("image {:?} vs mask {:?}", image.dims(), target.dims())));
        }
        Ok(Self { id: id.into(), image, target })
    }
}

/// Pixel-averaged cross-entropy of a probability map against a mask.
pub fn ce_loss<T: Scalar>(probs: &ProbMap<T>, target: &BinaryMask) -> Result<Tensor<T>> {
    if probs.dims() != target.dims() {
        return Err(Error::dim("ce_loss", format!("probs {:?} vs target {:?}", probs.dims(), target.dims())));
    }
    let (h, w) = probs.dims();
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![1, 2, h, w], probs.data().to_vec())?);
    let loss = tape.cross_entropy(p, target.data())?;
    Ok(tape.value(loss).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub improved: bool,
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: SegModel<T>,
    pub history: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

fn stack<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let (h, w) = samples[0].image.dims();
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != (h, w) {
            return Err(Error::dim("train", format!("sample `{}` is {:?}, batch is {:?}", s.id, s.image.dims(), (h, w))));
        }
        data.extend(s.image.to_unit::<T>());
        target.extend_from_slice(s.target.data());
    }
    Ok((Tensor::new(vec![samples.len(), 1, h, w], data)?, target))
}

/// Mean validation loss (per pixel) and micro-averaged DSC at threshold 0.5.
pub fn evaluate_loss<T: Scalar>(model: &SegModel<T>, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    let mut counts = ConfusionCounts::default();
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = stack::<T>(chunk)?;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let probs = model.forward_tape(&mut tape, &params, xv)?;
        let loss = tape.cross_entropy(probs, &y)?;
        loss_sum += tape.value(loss).item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN) * y.len() as f64;
        pixels += y.len();
        let p = tape.value(probs).data();
        let hw = chunk[0].image.dims().0 * chunk[0].image.dims().1;
        let half = T::from_f64_lossy(0.5);
        let pred: Vec<u8> = (0..y.len()).map(|k| (p[((k / hw) * 2 + 1) * hw + k % hw] > half) as u8).collect();
        counts = counts + confusion(&pred, &y)?;
    }
    let dsc = seg_metrics(&counts)?.dsc;
    Ok((loss_sum / pixels.max(1) as f64, dsc))
}

/// Trains `model` with Adam, the plateau schedule and early stopping.
pub fn train<T: Scalar>(
    model: SegModel<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_progress(model, train_set, val_set, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress<T: Scalar>(
    mut model: SegModel<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be nonempty".into()));
    }
    let mut state = OptimizerState::new(model.params(), config);
    let mut best: IndexMap<String, Tensor<T>> = model.params().clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut early_stopped = false;

    for epoch in 1..=config.max_epochs {
        let mut rng = stream(config.seed, &[0x74_7261_696e, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = state.lr;
        let mut loss_sum = 0.0;
        let mut pixels = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = stack::<T>(&batch)?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let xv = tape.leaf(x);
            let probs = model.forward_tape(&mut tape, &params, xv)?;
            let loss = tape.cross_entropy(probs, &y)?;
            let value = tape.value(loss).item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::state(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += value * y.len() as f64;
            pixels += y.len();
            let mut grads = tape.backward(loss)?;
            let named: IndexMap<String, Tensor<T>> = params
                .iter()
                .map(|(name, &v)| {
                    let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(model.params()[name].shape()));
                    (name.clone(), g)
                })
                .collect();
            adam_step(model.params_mut(), &named, &mut state, config)?;
        }
        let (val_loss, val_dsc) = evaluate_loss(&model, val_set, config.batch_size)?;
        let event = plateau_update(&mut state, val_loss, config);
        if event.improved {
            best = model.params().clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / pixels as f64,
            val_loss,
            val_dsc,
            lr,
            improved: event.improved,
            lr_reduced: event.lr_reduced,
        };
        on_epoch(&record);
        history.push(record);
        if early_stop_check(&state, config) {
            early_stopped = true;
            break;
        }
    }
    let stopped_epoch = history.len();
    *model.params_mut() = best;
    Ok(TrainOutcome { model, history, stopped_epoch, best_epoch, early_stopped })
}
