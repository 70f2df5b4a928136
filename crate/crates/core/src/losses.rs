//! Training objectives: the pixel reconstruction loss, the supervised
//! and unsupervised recognition losses, their joint combination, and
//! the stop-gradient boundary that decouples the transformer variant.
//!
//! Every loss returns `(value, gradient-at-input)` so callers wire the
//! chain rule explicitly; all reductions are means, which keeps the
//! loss-weight coefficient independent of batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Mat, Tensor};

/// Distance used by the unsupervised recognition loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L2Probs,
    L2Logits,
    Kl,
}

/// How the recognition loss is computed and how strongly it mixes in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionLossSpec {
    pub mode: RecognitionLossMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distance: Option<Distance>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionLossMode {
    SupervisedCe,
    Unsupervised,
}

impl RecognitionLossSpec {
    pub fn supervised(lambda: f64) -> Self {
        RecognitionLossSpec {
            mode: RecognitionLossMode::SupervisedCe,
            distance: None,
            lambda,
        }
    }

    pub fn unsupervised(lambda: f64, distance: Distance) -> Self {
        RecognitionLossSpec {
            mode: RecognitionLossMode::Unsupervised,
            distance: Some(distance),
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::ConfigError(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        match (self.mode, self.distance) {
            (RecognitionLossMode::Unsupervised, None) => Err(Error::ConfigError(
                "unsupervised recognition loss needs a distance".into(),
            )),
            (RecognitionLossMode::SupervisedCe, Some(_)) => Err(Error::ConfigError(
                "distance is only meaningful for the unsupervised loss".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Mean squared error over every element of the batch; the gradient is
/// with respect to `out`.
pub fn proc_loss(out: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if !out.same_shape(target) {
        return Err(Error::ShapeError(format!(
            "proc_loss shapes ({},{},{},{}) vs ({},{},{},{})",
            out.n, out.c, out.h, out.w, target.n, target.c, target.h, target.w
        )));
    }
    let m = out.numel() as f64;
    let mut grad = Tensor::zeros(out.n, out.c, out.h, out.w);
    let mut acc = 0.0;
    for i in 0..out.data.len() {
        let d = out.data[i] - target.data[i];
        acc += d * d;
        grad.data[i] = 2.0 * d / m;
    }
    Ok((acc / m, grad))
}

/// Mean softmax cross-entropy; the gradient is with respect to the
/// logits.
pub fn recog_loss_supervised(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    if logits.rows != labels.len() {
        return Err(Error::ShapeError(format!(
            "{} logit rows vs {} labels",
            logits.rows,
            labels.len()
        )));
    }
    for &l in labels {
        if l >= logits.cols {
            return Err(Error::LabelError(format!(
                "label {} out of range for {} classes",
                l, logits.cols
            )));
        }
    }
    let n = logits.rows as f64;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for r in 0..logits.rows {
        let p = softmax_row(logits.row(r));
        loss -= p[labels[r]].max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(r);
        for c in 0..logits.cols {
            g[c] = (p[c] - if c == labels[r] { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Unsupervised recognition loss: a distance between the recognizer's
/// response to the processed image and its response to the target
/// image. `target_repr` is a constant — the gradient only flows through
/// `out_repr`.
pub fn recog_loss_unsupervised(
    out_repr: &Mat,
    target_repr: &Mat,
    distance: Distance,
) -> Result<(f64, Mat)> {
    if !out_repr.same_shape(target_repr) {
        return Err(Error::ShapeError(format!(
            "unsupervised loss shapes {}x{} vs {}x{}",
            out_repr.rows, out_repr.cols, target_repr.rows, target_repr.cols
        )));
    }
    let rows = out_repr.rows;
    let cols = out_repr.cols;
    let mut grad = Mat::zeros(rows, cols);
    let mut loss = 0.0;
    match distance {
        Distance::L2Logits => {
            let m = (rows * cols) as f64;
            for i in 0..out_repr.data.len() {
                let d = out_repr.data[i] - target_repr.data[i];
                loss += d * d;
                grad.data[i] = 2.0 * d / m;
            }
            loss /= m;
        }
        Distance::L2Probs => {
            let m = (rows * cols) as f64;
            for r in 0..rows {
                let p = softmax_row(out_repr.row(r));
                let q = softmax_row(target_repr.row(r));
                let diff: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| a - b).collect();
                loss += diff.iter().map(|d| d * d).sum::<f64>();
                // Chain through the softmax: dL/dz_i = p_i (g_i - sum_j g_j p_j)
                // with g = 2 (p - q) / m.
                let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / m).collect();
                let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                let out = grad.row_mut(r);
                for c in 0..cols {
                    out[c] = p[c] * (g[c] - dot);
                }
            }
            loss /= m;
        }
        Distance::Kl => {
            // Mean over rows of KL(target || out) on softmax outputs.
            let n = rows as f64;
            for r in 0..rows {
                let p = softmax_row(out_repr.row(r));
                let q = softmax_row(target_repr.row(r));
                for c in 0..cols {
                    if q[c] > 0.0 {
                        loss += q[c] * (q[c].ln() - p[c].max(f64::MIN_POSITIVE).ln());
                    }
                }
                let out = grad.row_mut(r);
                for c in 0..cols {
                    out[c] = (p[c] - q[c]) / n;
                }
            }
            loss /= n;
        }
    }
    Ok((loss, grad))
}

/// The joint objective: `l_proc + lambda * l_recog`.
pub fn total_loss(l_proc: f64, l_recog: f64, lambda: f64) -> f64 {
    l_proc + lambda * l_recog
}

/// Forward identity whose backward contribution is exactly zero. Pair
/// with [`stop_gradient_backward`]: anything upstream of this edge
/// receives no gradient from downstream losses.
pub fn stop_gradient(x: &Tensor) -> Tensor {
    x.clone()
}

/// The backward half of the stop-gradient edge: discards the incoming
/// gradient entirely.
pub fn stop_gradient_backward(grad_downstream: &Tensor) -> Tensor {
    Tensor::zeros(
        grad_downstream.n,
        grad_downstream.c,
        grad_downstream.h,
        grad_downstream.w,
    )
}
