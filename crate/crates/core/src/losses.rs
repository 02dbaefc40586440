//! Segmentation and distance-regression losses with analytic gradients.
//!
//! The segmentation head is trained on binary cross-entropy plus soft dice,
//! the regression head on L1 plus a Laplacian loss that compares the
//! curvature of the predicted and target distance fields:
//!
//! ```text
//! laplacian(pred, truth) = mean |D * truth - D * pred|,   D = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]
//! ```
//!
//! Each loss returns its value together with the gradient with respect to the
//! prediction, in the prediction's shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{SliceField, SliceKind};

/// How per-pixel BCE and L1 terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub l1: f64,
    pub laplacian: f64,
}

impl LossWeights {
    pub const ALL: LossWeights = LossWeights::new(1.0, 1.0, 1.0, 1.0);

    pub const fn new(bce: f64, dice: f64, l1: f64, laplacian: f64) -> Self {
        Self {
            bce,
            dice,
            l1,
            laplacian,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Smoothing term in the dice numerator and denominator.
    pub epsilon: f64,
    /// BCE probabilities are clamped to `[clamp_delta, 1 - clamp_delta]`.
    pub clamp_delta: f64,
    pub weights: LossWeights,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            clamp_delta: 1e-7,
            weights: LossWeights::ALL,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.clamp_delta > 0.0 && self.clamp_delta < 0.5) {
            return Err(Error::Config(format!(
                "clamp_delta must lie in (0, 0.5), got {}",
                self.clamp_delta
            )));
        }
        let w = self.weights;
        if [w.bce, w.dice, w.l1, w.laplacian]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {w:?}")));
        }
        Ok(())
    }

    fn reduce(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// All loss components of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub l1: f64,
    pub laplacian: f64,
    pub seg_total: f64,
    pub reg_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_parts(bce: f64, dice: f64, l1: f64, laplacian: f64, w: &LossWeights) -> Self {
        let seg_total = w.bce * bce + w.dice * dice;
        let reg_total = w.l1 * l1 + w.laplacian * laplacian;
        Self {
            bce,
            dice,
            l1,
            laplacian,
            seg_total,
            reg_total,
            total: seg_total + reg_total,
        }
    }

    /// Component-wise sum, used to accumulate over a batch or an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.bce += other.bce;
        self.dice += other.dice;
        self.l1 += other.l1;
        self.laplacian += other.laplacian;
        self.seg_total += other.seg_total;
        self.reg_total += other.reg_total;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            bce: self.bce * k,
            dice: self.dice * k,
            l1: self.l1 * k,
            laplacian: self.laplacian * k,
            seg_total: self.seg_total * k,
            reg_total: self.reg_total * k,
            total: self.total * k,
        }
    }
}

/// The 3x3 discrete Laplacian stencil.
pub struct LaplacianKernel;

impl LaplacianKernel {
    pub const STENCIL: [[i32; 3]; 3] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]];
}

fn check_pair(a: &SliceField, b: &SliceField) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, target is {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

// Slice-level kernels on raw buffers. The model calls these directly.

pub(crate) fn bce_raw(pred: &[f64], truth: &[f64], cfg: &LossConfig, grad: &mut [f64]) -> f64 {
    let k = cfg.reduce(pred.len());
    let (lo, hi) = (cfg.clamp_delta, 1.0 - cfg.clamp_delta);
    let mut total = 0.0;
    for ((&p, &y), g) in pred.iter().zip(truth).zip(grad.iter_mut()) {
        let pc = p.clamp(lo, hi);
        total += -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
        *g = if p < lo || p > hi {
            0.0
        } else {
            k * (-y / pc + (1.0 - y) / (1.0 - pc))
        };
    }
    k * total
}

pub(crate) fn dice_raw(pred: &[f64], truth: &[f64], eps: f64, grad: &mut [f64]) -> f64 {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(truth) {
        inter += y * p;
        sum += y + p;
    }
    let num = 2.0 * inter + eps;
    let den = sum + eps;
    for ((&y, g), _) in truth.iter().zip(grad.iter_mut()).zip(pred) {
        *g = -(2.0 * y * den - num) / (den * den);
    }
    1.0 - num / den
}

pub(crate) fn l1_raw(pred: &[f64], truth: &[f64], cfg: &LossConfig, grad: &mut [f64]) -> f64 {
    let k = cfg.reduce(pred.len());
    let mut total = 0.0;
    for ((&p, &t), g) in pred.iter().zip(truth).zip(grad.iter_mut()) {
        let d = p - t;
        total += d.abs();
        *g = if d > 0.0 {
            k
        } else if d < 0.0 {
            -k
        } else {
            0.0
        };
    }
    k * total
}

fn laplacian_raw(field: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let ow = w - 2;
    for y in 0..h - 2 {
        for x in 0..ow {
            let c = (x + 1) + (y + 1) * w;
            out[x + y * ow] = field[c - w] + field[c - 1] + field[c + 1] + field[c + w] - 4.0 * field[c];
        }
    }
}

pub(crate) fn laplacian_loss_raw(
    pred: &[f64],
    truth: &[f64],
    w: usize,
    h: usize,
    grad: &mut [f64],
) -> f64 {
    let (ow, oh) = (w - 2, h - 2);
    let n = ow * oh;
    let mut lp = vec![0.0; n];
    let mut lt = vec![0.0; n];
    laplacian_raw(pred, w, h, &mut lp);
    laplacian_raw(truth, w, h, &mut lt);
    grad.fill(0.0);
    let k = 1.0 / n as f64;
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let r = lp[x + y * ow] - lt[x + y * ow];
            total += r.abs();
            let s = if r > 0.0 {
                k
            } else if r < 0.0 {
                -k
            } else {
                0.0
            };
            if s != 0.0 {
                // the stencil is symmetric, so its transpose scatters the same weights
                let c = (x + 1) + (y + 1) * w;
                grad[c] -= 4.0 * s;
                grad[c - 1] += s;
                grad[c + 1] += s;
                grad[c - w] += s;
                grad[c + w] += s;
            }
        }
    }
    k * total
}

/// Binary cross-entropy with clamped probabilities.
pub fn bce_loss(pred: &SliceField, truth: &SliceField, cfg: &LossConfig) -> Result<(f64, SliceField)> {
    check_pair(pred, truth)?;
    let mut grad = vec![0.0; pred.values().len()];
    let v = bce_raw(pred.values(), truth.values(), cfg, &mut grad);
    Ok((v, SliceField::real(pred.width(), pred.height(), grad)?))
}

/// Soft dice loss `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)`.
pub fn dice_loss(pred: &SliceField, truth: &SliceField, cfg: &LossConfig) -> Result<(f64, SliceField)> {
    check_pair(pred, truth)?;
    let mut grad = vec![0.0; pred.values().len()];
    let v = dice_raw(pred.values(), truth.values(), cfg.epsilon, &mut grad);
    Ok((v, SliceField::real(pred.width(), pred.height(), grad)?))
}

/// Mean absolute error; the subgradient at exact ties is 0.
pub fn l1_loss(pred: &SliceField, truth: &SliceField, cfg: &LossConfig) -> Result<(f64, SliceField)> {
    check_pair(pred, truth)?;
    let mut grad = vec![0.0; pred.values().len()];
    let v = l1_raw(pred.values(), truth.values(), cfg, &mut grad);
    Ok((v, SliceField::real(pred.width(), pred.height(), grad)?))
}

/// Valid-mode cross-correlation with [`LaplacianKernel`].
pub fn laplacian_filter(field: &SliceField) -> Result<SliceField> {
    let (w, h) = (field.width(), field.height());
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!("laplacian needs at least 3x3, got {w}x{h}")));
    }
    let mut out = vec![0.0; (w - 2) * (h - 2)];
    laplacian_raw(field.values(), w, h, &mut out);
    SliceField::real(w - 2, h - 2, out)
}

/// Mean absolute difference of the Laplacians over the valid interior.
pub fn laplacian_loss(pred: &SliceField, truth: &SliceField) -> Result<(f64, SliceField)> {
    check_pair(pred, truth)?;
    let (w, h) = (pred.width(), pred.height());
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!("laplacian needs at least 3x3, got {w}x{h}")));
    }
    let mut grad = vec![0.0; w * h];
    let v = laplacian_loss_raw(pred.values(), truth.values(), w, h, &mut grad);
    Ok((v, SliceField::real(w, h, grad)?))
}

/// Loss breakdown plus per-head gradients for one slice.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub seg_grad: Vec<f64>,
    pub sdf_grad: Vec<f64>,
}

pub(crate) fn total_loss_raw(
    seg_pred: &[f64],
    seg_truth: &[f64],
    sdf_pred: &[f64],
    sdf_truth: &[f64],
    w: usize,
    h: usize,
    cfg: &LossConfig,
) -> TotalLoss {
    let n = w * h;
    let wt = &cfg.weights;
    let mut tmp = vec![0.0; n];
    let mut seg_grad = vec![0.0; n];
    let mut sdf_grad = vec![0.0; n];

    let bce = bce_raw(seg_pred, seg_truth, cfg, &mut tmp);
    axpy(wt.bce, &tmp, &mut seg_grad);
    let dice = dice_raw(seg_pred, seg_truth, cfg.epsilon, &mut tmp);
    axpy(wt.dice, &tmp, &mut seg_grad);
    let l1 = l1_raw(sdf_pred, sdf_truth, cfg, &mut tmp);
    axpy(wt.l1, &tmp, &mut sdf_grad);
    let laplacian = if w >= 3 && h >= 3 {
        let v = laplacian_loss_raw(sdf_pred, sdf_truth, w, h, &mut tmp);
        axpy(wt.laplacian, &tmp, &mut sdf_grad);
        v
    } else {
        0.0
    };

    TotalLoss {
        breakdown: LossBreakdown::from_parts(bce, dice, l1, laplacian, wt),
        seg_grad,
        sdf_grad,
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Weighted sum of all four losses with gradients for both heads.
pub fn total_loss(
    seg_pred: &SliceField,
    seg_truth: &SliceField,
    sdf_pred: &SliceField,
    sdf_truth: &SliceField,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    check_pair(seg_pred, seg_truth)?;
    check_pair(sdf_pred, sdf_truth)?;
    if seg_truth.kind() != SliceKind::Binary {
        return Err(Error::Argument("segmentation target must be binary".into()));
    }
    let (w, h) = (sdf_pred.width(), sdf_pred.height());
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!("laplacian needs at least 3x3, got {w}x{h}")));
    }
    Ok(total_loss_raw(
        seg_pred.values(),
        seg_truth.values(),
        sdf_pred.values(),
        sdf_truth.values(),
        w,
        h,
        cfg,
    ))
}
