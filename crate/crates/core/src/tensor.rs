//! Dense containers used throughout the crate: a single image (CHW), a
//! batch tensor (NCHW) and a row-major matrix for logits. Everything is
//! `f64`; at desk scale memory is cheap and double precision keeps the
//! gradient checks comfortable.

use crate::error::{Error, Result};

/// One image, channel-major (CHW), values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn constant(c: usize, h: usize, w: usize, v: f64) -> Self {
        Image {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Contiguous plane of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn clipped(&self) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Decode from interleaved 8-bit RGB rows; values map to `v / 255`.
    pub fn from_rgb8(w: usize, h: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != w * h * 3 {
            return Err(Error::ShapeError(format!(
                "rgb8 buffer has {} bytes, expected {}",
                rgb.len(),
                w * h * 3
            )));
        }
        let mut img = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.data[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Ok(img)
    }

    /// Quantize back to interleaved 8-bit RGB (round-to-nearest, clamped).
    pub fn to_rgb8(&self) -> Vec<u8> {
        assert_eq!(self.c, 3, "to_rgb8 expects a 3-channel image");
        let mut out = vec![0u8; self.w * self.h * 3];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    out[(y * self.w + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        out
    }
}

/// A batch of feature maps, NCHW layout. Each `(n, c)` plane is
/// contiguous, which is what the parallel kernels chunk on.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_images(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::ShapeError("empty batch".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let mut t = Tensor::zeros(images.len(), c, h, w);
        let plane = c * h * w;
        for (i, img) in images.iter().enumerate() {
            if !img.same_shape(first) {
                return Err(Error::ShapeError("ragged image batch".into()));
            }
            t.data[i * plane..(i + 1) * plane].copy_from_slice(&img.data);
        }
        Ok(t)
    }

    pub fn image(&self, n: usize) -> Image {
        let plane = self.c * self.h * self.w;
        Image {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        }
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        self.n == o.n && self.c == o.c && self.h == o.h && self.w == o.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "tensor shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let (n, h, w) = (first.n, first.h, first.w);
        let c_total: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor::zeros(n, c_total, h, w);
        let hw = h * w;
        for ni in 0..n {
            let mut co = 0;
            for p in parts {
                assert!(p.n == n && p.h == h && p.w == w);
                for ci in 0..p.c {
                    let dst = (ni * c_total + co + ci) * hw;
                    let src = (ni * p.c + ci) * hw;
                    out.data[dst..dst + hw].copy_from_slice(&p.data[src..src + hw]);
                }
                co += p.c;
            }
        }
        out
    }

    /// Slice a contiguous channel range `[c0, c0+len)` into a new tensor.
    pub fn slice_channels(&self, c0: usize, len: usize) -> Tensor {
        assert!(c0 + len <= self.c);
        let hw = self.h * self.w;
        let mut out = Tensor::zeros(self.n, len, self.h, self.w);
        for ni in 0..self.n {
            for ci in 0..len {
                let src = (ni * self.c + c0 + ci) * hw;
                let dst = (ni * len + ci) * hw;
                out.data[dst..dst + hw].copy_from_slice(&self.data[src..src + hw]);
            }
        }
        out
    }
}

/// Row-major matrix; used for logits (`rows = batch`, `cols = classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip_hits_grid_values() {
        let rgb: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 11 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 2, &rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
    }

    #[test]
    fn batch_roundtrip() {
        let a = Image::constant(3, 4, 4, 0.25);
        let b = Image::constant(3, 4, 4, 0.75);
        let t = Tensor::from_images(&[&a, &b]).unwrap();
        assert_eq!(t.image(0), a);
        assert_eq!(t.image(1), b);
    }

    #[test]
    fn ragged_batch_rejected() {
        let a = Image::zeros(3, 4, 4);
        let b = Image::zeros(3, 2, 2);
        assert!(matches!(
            Tensor::from_images(&[&a, &b]),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut a = Tensor::zeros(2, 2, 3, 3);
        let mut b = Tensor::zeros(2, 1, 3, 3);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = 100.0 + i as f64;
        }
        let cat = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(cat.c, 3);
        assert_eq!(cat.slice_channels(0, 2), a);
        assert_eq!(cat.slice_channels(2, 1), b);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_row(&[1.0, 2.0, 3.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
