//! Image-quality and recognition metrics: PSNR, SSIM and top-1 accuracy.
//! These are pure functions; evaluation-time clipping is the caller's
//! responsibility (the harness clips processor outputs before scoring).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, Mat};

/// The `PSNR/SSIM/Accuracy` triple reported for every evaluation.
/// `psnr_db` uses `+inf` as the zero-error sentinel and serializes as the
/// string `"inf"` in CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Peak signal-to-noise ratio in dB. Returns `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeError(format!(
            "psnr inputs {}x{}x{} vs {}x{}x{}",
            a.c, a.h, a.w, b.c, b.h, b.w
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Valid-mode separable filtering: horizontal pass then vertical pass.
/// Input h×w, output (h-n+1)×(w-n+1).
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let vw = w - n + 1;
    let vh = h - n + 1;
    let mut horiz = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                acc += g * plane[y * w + x + k];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                acc += g * horiz[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (Wang et al.
/// convention: valid windows only, biased local statistics). Color images
/// are scored per channel and averaged.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeError("ssim inputs differ in shape".into()));
    }
    let n = params.window;
    if a.h < n || a.w < n {
        return Err(Error::ShapeError(format!(
            "image {}x{} smaller than ssim window {}",
            a.h, a.w, n
        )));
    }
    let kernel = gaussian_window(n, params.sigma);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);

    let mut channel_mean = 0.0;
    for c in 0..a.c {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();

        let mu_a = filter_valid(pa, a.h, a.w, &kernel);
        let mu_b = filter_valid(pb, a.h, a.w, &kernel);
        let m_aa = filter_valid(&sq_a, a.h, a.w, &kernel);
        let m_bb = filter_valid(&sq_b, a.h, a.w, &kernel);
        let m_ab = filter_valid(&ab, a.h, a.w, &kernel);

        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
        }
        channel_mean += acc / mu_a.len() as f64;
    }
    Ok(channel_mean / a.c as f64)
}

/// Fraction of rows whose argmax equals the label; ties break to the
/// lowest index.
pub fn top1_accuracy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if logits.rows != labels.len() {
        return Err(Error::ShapeError(format!(
            "{} logit rows vs {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if logits.rows == 0 {
        return Err(Error::ShapeError("empty logits".into()));
    }
    for &l in labels {
        if l >= logits.cols {
            return Err(Error::LabelError(format!(
                "label {} out of range for {} classes",
                l, logits.cols
            )));
        }
    }
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if argmax(logits.row(r)) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows as f64)
}

/// Lowest-index argmax.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Format PSNR for reports: the `+inf` sentinel becomes `"inf"`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}
