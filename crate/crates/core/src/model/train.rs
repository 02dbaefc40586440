use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::{adam_step, backward, forward_raw, init_params, AdamState, Gradients, ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss_raw, LossBreakdown, LossConfig};
use crate::sdf::SignedDistanceSlice;
use crate::volgrid::{SliceField, SliceKind};

/// One training slice: image, binary mask and normalized signed distance target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
    pub sdf: Vec<f64>,
}

impl TrainSample {
    pub fn new(image: &SliceField, mask: &SliceField, sdf: &SignedDistanceSlice) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        if !image.same_shape(mask) || sdf.width() != w || sdf.height() != h {
            return Err(Error::Shape("image, mask and SDF slices differ in size".into()));
        }
        if mask.kind() != SliceKind::Binary {
            return Err(Error::Argument("training mask must be binary".into()));
        }
        if !sdf.is_normalized() {
            return Err(Error::Argument("training SDF must be normalized".into()));
        }
        Ok(Self {
            width: w,
            height: h,
            image: image.values().to_vec(),
            mask: mask.values().to_vec(),
            sdf: sdf.values().to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate multiplier applied once per epoch.
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    /// Fixed reduction and batch order. The CPU implementation is always
    /// deterministic, so this is recorded for provenance only.
    pub deterministic: bool,
    /// Stop once validation dice reaches this value.
    pub stop_at_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 1.0,
            epochs: 50,
            batch_size: 8,
            loss: LossConfig::default(),
            seed: 0,
            deterministic: true,
            stop_at_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-slice training loss over the epoch.
    pub train_loss: LossBreakdown,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Pooled dice `2|A and B| / (|A| + |B|)` of thresholded probabilities
/// (`p > 0.5` is foreground) against binary targets; 1 when both are empty.
pub fn dice_of_predictions<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (probs, mask) in pairs {
        for (&p, &y) in probs.iter().zip(mask) {
            let a = p > 0.5;
            let b = y == 1.0;
            inter += usize::from(a && b);
            total += usize::from(a) + usize::from(b);
        }
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

const EVAL_CHUNK: usize = 16;

/// Pooled volumetric dice of the model over `samples`.
pub fn validation_dice(params: &ModelParams, samples: &[TrainSample]) -> Result<f64> {
    let mut probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        probs.extend(forward_raw(params, &inputs)?.seg);
    }
    Ok(dice_of_predictions(
        probs.iter().zip(samples).map(|(p, s)| (p.as_slice(), s.mask.as_slice())),
    ))
}

/// Mean combined loss over a batch and its parameter gradients.
pub fn batch_loss(params: &ModelParams, batch: &[&TrainSample], cfg: &LossConfig) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let inputs: Vec<&[f64]> = batch.iter().map(|s| s.image.as_slice()).collect();
    let out = forward_raw(params, &inputs)?;
    let k = 1.0 / batch.len() as f64;
    let mut sum = LossBreakdown::default();
    let mut seg_grads = Vec::with_capacity(batch.len());
    let mut sdf_grads = Vec::with_capacity(batch.len());
    for ((s, seg), sdf) in batch.iter().zip(&out.seg).zip(&out.sdf) {
        let t = total_loss_raw(seg, &s.mask, sdf, &s.sdf, s.width, s.height, cfg);
        sum.accumulate(&t.breakdown);
        seg_grads.push(t.seg_grad.into_iter().map(|g| g * k).collect());
        sdf_grads.push(t.sdf_grad.into_iter().map(|g| g * k).collect());
    }
    let grads = backward(params, &out.cache, &seg_grads, &sdf_grads)?;
    Ok((sum.scaled(k), grads))
}

fn check_samples(samples: &[TrainSample], cfg: &NetConfig, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument(format!("{what} set is empty")));
    }
    for (i, s) in samples.iter().enumerate() {
        let n = s.width * s.height;
        if s.width != cfg.input_width
            || s.height != cfg.input_height
            || s.image.len() != n
            || s.mask.len() != n
            || s.sdf.len() != n
        {
            return Err(Error::Shape(format!(
                "{what} sample {i} is {}x{}, network expects {}x{}",
                s.width, s.height, cfg.input_width, cfg.input_height
            )));
        }
    }
    Ok(())
}

/// Jointly train both heads and return the parameters of the epoch with the
/// highest validation dice (earliest on ties).
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    net.validate()?;
    cfg.validate()?;
    check_samples(train_set, net, "training")?;
    check_samples(val_set, net, "validation")?;

    let mut params = init_params(net)?;
    let mut adam = AdamState::new(&params);
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss(&params, &batch, &cfg.loss)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (samples {chunk:?})"
                )));
            }
            step += 1;
            adam_step(&mut params, &grads, &mut adam, step, lr)?;
            epoch_loss.accumulate(&loss.scaled(chunk.len() as f64));
        }
        let val_dice = validation_dice(&params, val_set)?;
        records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss.scaled(1.0 / train_set.len() as f64),
            val_dice,
        });
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            best = Some((epoch, val_dice, params.clone()));
        }
        if cfg.stop_at_val_dice.is_some_and(|t| val_dice >= t) {
            break;
        }
    }

    let (best_epoch, best_val_dice, best_params) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_dice,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}
