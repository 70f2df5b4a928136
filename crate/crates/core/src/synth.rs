//! Procedural labeled-image generator.
//!
//! Produces a directory-per-class PNG tree in the layout the loader
//! expects. Classes are oriented sinusoidal gratings (a base frequency
//! plus a weaker harmonic) painted into a soft disk over a smooth
//! random background. The class cue lives in mid/high spatial
//! frequencies, so the three degradations all remove part of it — which
//! is exactly the regime recognition-aware training is meant to help
//! with — while clean images stay easy to classify.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::Result;
use crate::rng;
use crate::tensor::Image;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Square image side; keep divisible by 4 for the SR task.
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            train_per_class: 60,
            val_per_class: 20,
            size: 32,
            seed: 0,
        }
    }
}

/// Render one sample of `class`. Deterministic given the RNG stream.
pub fn render_sample<R: Rng>(class: usize, num_classes: usize, size: usize, rng: &mut R) -> Image {
    let mut img = Image::zeros(3, size, size);
    let s = size as f64;

    // Smooth background: random base color with a gentle linear gradient.
    let base: [f64; 3] = [
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
    ];
    let grad_theta = rng.random_range(0.0..std::f64::consts::TAU);
    let grad_amp = rng.random_range(0.0..0.08);
    let (gx, gy) = (grad_theta.cos(), grad_theta.sin());

    // Class cue: orientation of a grating pair (base + harmonic) and of
    // the elliptical patch holding it. The base frequency survives a x4
    // antialiased downsample in attenuated form; the harmonic does not.
    let theta = std::f64::consts::PI * class as f64 / num_classes as f64
        + rng.random_range(-0.05..0.05);
    let (tx, ty) = (theta.cos(), theta.sin());
    let freq = 0.07 * rng.random_range(0.92..1.08);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = 0.17 * rng.random_range(0.75..1.25);

    // Soft elliptical patch, elongated along the grating orientation.
    let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let radius = s * rng.random_range(0.28..0.36);
    let elong = 1.5;

    // Per-channel weights keep the grating mostly luminance-like but not
    // perfectly gray.
    let cw: [f64; 3] = [
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
    ];

    let noise_amp = 0.02;
    let tau = std::f64::consts::TAU;
    for y in 0..size {
        for x in 0..size {
            let xf = x as f64;
            let yf = y as f64;
            let u = xf * tx + yf * ty;
            let wave = (tau * freq * u + phase).sin() + 0.5 * (tau * 2.0 * freq * u + phase2).sin();
            // Elliptical distance: stretched along the grating axis.
            let (dx, dy) = (xf - cx, yf - cy);
            let along = dx * tx + dy * ty;
            let across = -dx * ty + dy * tx;
            let d = ((along / elong).powi(2) + across.powi(2)).sqrt();
            let mask = 1.0 / (1.0 + ((d - radius) / 1.5).exp());
            let g = ((xf - s / 2.0) * gx + (yf - s / 2.0) * gy) / s;
            for c in 0..3 {
                let n = noise_amp * rng.random_range(-1.0..1.0);
                let v = base[c] + grad_amp * g + amp * cw[c] * wave * mask + n;
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let rgb = img.to_rgb8();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.w as u32, img.h as u32, rgb).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| crate::error::Error::InvalidParam(format!("png encode: {e}")))?;
    Ok(())
}

/// Write the full train/val tree plus `classes.json` under `root`.
pub fn generate(root: &Path, spec: &SynthSpec) -> Result<()> {
    let class_names: Vec<String> = (0..spec.classes)
        .map(|c| format!("class_{c:02}"))
        .collect();
    // Stream indices: one stream per rendered image, disjoint between
    // splits via the high bit.
    let render = |split: &str, per_class: usize, stream_base: u64| -> Result<()> {
        for (class, name) in class_names.iter().enumerate() {
            let dir = root.join(split).join(name);
            fs::create_dir_all(&dir)?;
            for i in 0..per_class {
                let stream_id = stream_base + (class * per_class + i) as u64;
                let mut r = rng::stream(spec.seed, stream_id);
                let img = render_sample(class, spec.classes, spec.size, &mut r);
                save_png(&dir.join(format!("img_{i:04}.png")), &img)?;
            }
        }
        Ok(())
    };
    render("train", spec.train_per_class, 0)?;
    render("val", spec.val_per_class, 1 << 32)?;
    data::save_classes_json(root, &class_names)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn generate_layout_and_determinism() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let spec = SynthSpec {
            classes: 3,
            train_per_class: 2,
            val_per_class: 1,
            size: 16,
            seed: 4,
        };
        generate(d1.path(), &spec).unwrap();
        generate(d2.path(), &spec).unwrap();
        let f1 = d1.path().join("train/class_01/img_0001.png");
        let f2 = d2.path().join("train/class_01/img_0001.png");
        assert_eq!(fs::read(f1).unwrap(), fs::read(f2).unwrap());
        assert!(d1.path().join("val/class_02/img_0000.png").is_file());
        assert!(d1.path().join("classes.json").is_file());
    }

    #[test]
    fn samples_vary_within_class_and_between_classes() {
        let a0 = render_sample(0, 4, 16, &mut rng::stream(1, 0));
        let a1 = render_sample(0, 4, 16, &mut rng::stream(1, 1));
        let b0 = render_sample(1, 4, 16, &mut rng::stream(1, 0));
        assert_ne!(a0, a1);
        assert_ne!(a0, b0);
        assert!(a0.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
