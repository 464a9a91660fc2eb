//! Jaccard training loss and IoU / Dice evaluation metrics.

use std::fmt::Write as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

/// Smoothing factor `alpha` of the Jaccard loss and its reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Average per-image losses instead of one sum over the batch.
    pub per_image: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            per_image: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "loss alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

const BINARY_TOL: f64 = 1e-6;

fn check_binary<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    for &v in t.data() {
        let v = v.as_f64();
        if v.abs() > BINARY_TOL && (v - 1.0).abs() > BINARY_TOL {
            return Err(Error::InvalidArgument(format!("{what} is not binary: found {v}")));
        }
    }
    Ok(())
}

/// `alpha * (1 - (alpha + sum(y*p)) / (alpha + sum(y + p - y*p)))` on the tape.
///
/// `pred` holds probabilities (post-sigmoid), `target` a binary mask.
pub fn jaccard_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_binary(target, "jaccard target")?;
    tape.jaccard_loss(pred, target, T::of(cfg.alpha), cfg.per_image)
}

/// Loss value without recording gradients.
pub fn jaccard_loss_value<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let p = tape.constant(pred.clone())?;
    let l = jaccard_loss(&mut tape, p, target, cfg)?;
    Ok(tape.value(l)?.item()?.as_f64())
}

/// `(|X ∩ Y|, |X|, |Y|)` of two binary masks.
fn overlap_counts<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(u64, u64, u64)> {
    ensure_same_shape(x, y, "mask metric")?;
    check_binary(x, "mask")?;
    check_binary(y, "mask")?;
    let (mut inter, mut nx, mut ny) = (0, 0, 0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (a, b) = (a.as_f64() > 0.5, b.as_f64() > 0.5);
        inter += u64::from(a && b);
        nx += u64::from(a);
        ny += u64::from(b);
    }
    Ok((inter, nx, ny))
}

/// `|X ∩ Y| / |X ∪ Y|`; two empty masks score 1.
pub fn iou<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (i, nx, ny) = overlap_counts(x, y)?;
    let union = nx + ny - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// `2 |X ∩ Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (i, nx, ny) = overlap_counts(x, y)?;
    let total = nx + ny;
    Ok(if total == 0 { 1.0 } else { 2.0 * i as f64 / total as f64 })
}

/// Per-sample IoU and Dice scores with their means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
}

impl EvalReport {
    pub fn push<T: Scalar>(&mut self, id: impl Into<String>, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
        self.iou.push(iou(pred, truth)?);
        self.dice.push(dice(pred, truth)?);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn mean_iou(&self) -> f64 {
        Self::mean(&self.iou)
    }

    pub fn mean_dice(&self) -> f64 {
        Self::mean(&self.dice)
    }

    /// `sample_id,iou,dice` rows followed by a `mean` aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,iou,dice\n");
        for ((id, i), d) in self.ids.iter().zip(&self.iou).zip(&self.dice) {
            let _ = writeln!(s, "{id},{i:.6},{d:.6}");
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_iou(), self.mean_dice());
        s
    }

    pub fn summary_line(&self) -> String {
        format!("IoU={:.4} Dice={:.4}", self.mean_iou(), self.mean_dice())
    }
}
