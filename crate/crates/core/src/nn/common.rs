//! Activations, pooling, pixel shuffle, the classifier head, and the
//! fixed input normalization recognizers carry.

use rand::Rng;

use super::{init_bound, HasParams, Param, Pass};
use crate::par;
use crate::tensor::{Mat, Tensor};

/// Per-channel parametric ReLU (slope applied on the negative side).
pub struct PRelu {
    pub alpha: Param,
    cache_x: Option<Tensor>,
    last_pass: Pass,
}

impl PRelu {
    pub fn new(name: &str, c: usize) -> Self {
        PRelu {
            alpha: Param::new(format!("{name}.alpha"), vec![c], vec![0.25; c], true),
            cache_x: None,
            last_pass: Pass::Infer,
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let c = x.c;
        assert_eq!(c, self.alpha.data.len());
        let hw = x.h * x.w;
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let alpha = &self.alpha.data;
        let xdata = &x.data;
        par::chunks_mut(&mut y.data, hw, |chunk, plane| {
            let a = alpha[chunk % c];
            let base = chunk * hw;
            for (i, slot) in plane.iter_mut().enumerate() {
                let v = xdata[base + i];
                *slot = if v > 0.0 { v } else { a * v };
            }
        });
        self.last_pass = pass;
        self.cache_x = if pass.caches() { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("prelu backward without forward");
        let c = x.c;
        let hw = x.h * x.w;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let alpha = &self.alpha.data;
        let xdata = &x.data;
        let dydata = &dy.data;
        par::chunks_mut(&mut dx.data, hw, |chunk, plane| {
            let a = alpha[chunk % c];
            let base = chunk * hw;
            for (i, slot) in plane.iter_mut().enumerate() {
                let v = xdata[base + i];
                *slot = if v > 0.0 { dydata[base + i] } else { a * dydata[base + i] };
            }
        });
        if self.last_pass.trains_params() {
            par::chunks_mut(&mut self.alpha.grad, 1, |ci, da| {
                let mut acc = 0.0;
                for n in 0..x.n {
                    let base = (n * c + ci) * hw;
                    for i in 0..hw {
                        let v = xdata[base + i];
                        if v <= 0.0 {
                            acc += dydata[base + i] * v;
                        }
                    }
                }
                da[0] += acc;
            });
        }
        dx
    }
}

impl HasParams for PRelu {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.alpha);
    }
}

/// Plain ReLU.
#[derive(Default)]
pub struct Relu {
    cache_x: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut y = x.clone();
        for v in y.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.cache_x = if pass.caches() { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (g, v) in dx.data.iter_mut().zip(x.data.iter()) {
            if *v <= 0.0 {
                *g = 0.0;
            }
        }
        dx
    }
}

/// 2x2 max pooling, stride 2.
#[derive(Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2::default()
    }

    pub fn forward(&mut self, x: &Tensor, _pass: Pass) -> Tensor {
        assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool needs even dims");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let hw = x.h * x.w;
        let w = x.w;
        let xdata = &x.data;
        // Pick window maxima per plane first, then gather values.
        let mut argmax = vec![0u32; x.n * x.c * oh * ow];
        par::chunks_mut(&mut argmax, oh * ow, |chunk, args| {
            let base = chunk * hw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (oy * 2 + dy) * w + ox * 2 + dx;
                            if xdata[base + i] > best {
                                best = xdata[base + i];
                                best_i = i;
                            }
                        }
                    }
                    args[oy * ow + ox] = best_i as u32;
                }
            }
        });
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        par::chunks_mut(&mut y.data, oh * ow, |chunk, plane| {
            let base = chunk * hw;
            let args = &argmax[chunk * oh * ow..(chunk + 1) * oh * ow];
            for (slot, &arg) in plane.iter_mut().zip(args.iter()) {
                *slot = xdata[base + arg as usize];
            }
        });
        self.argmax = argmax;
        self.in_shape = (x.n, x.c, x.h, x.w);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (h / 2, w / 2);
        let argmax = &self.argmax;
        let dydata = &dy.data;
        par::chunks_mut(&mut dx.data, h * w, |chunk, plane| {
            let dybase = chunk * oh * ow;
            for i in 0..oh * ow {
                plane[argmax[dybase + i] as usize] += dydata[dybase + i];
            }
        });
        dx
    }
}

/// 2x2 average pooling, stride 2.
#[derive(Default)]
pub struct AvgPool2 {
    in_shape: (usize, usize, usize, usize),
}

impl AvgPool2 {
    pub fn new() -> Self {
        AvgPool2::default()
    }

    pub fn forward(&mut self, x: &Tensor, _pass: Pass) -> Tensor {
        assert!(x.h % 2 == 0 && x.w % 2 == 0, "avgpool needs even dims");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let hw = x.h * x.w;
        let w = x.w;
        let xdata = &x.data;
        par::chunks_mut(&mut y.data, oh * ow, |chunk, plane| {
            let base = chunk * hw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (oy * 2) * w + ox * 2;
                    plane[oy * ow + ox] = 0.25
                        * (xdata[base + i]
                            + xdata[base + i + 1]
                            + xdata[base + i + w]
                            + xdata[base + i + w + 1]);
                }
            }
        });
        self.in_shape = (x.n, x.c, x.h, x.w);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (h / 2, w / 2);
        let dydata = &dy.data;
        par::chunks_mut(&mut dx.data, h * w, |chunk, plane| {
            let dybase = chunk * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * dydata[dybase + oy * ow + ox];
                    let i = (oy * 2) * w + ox * 2;
                    plane[i] += g;
                    plane[i + 1] += g;
                    plane[i + w] += g;
                    plane[i + w + 1] += g;
                }
            }
        });
        dx
    }
}

/// Global average pooling: NCHW -> N x C.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    pub fn forward(&mut self, x: &Tensor, _pass: Pass) -> Mat {
        let hw = (x.h * x.w) as f64;
        let mut y = Mat::zeros(x.n, x.c);
        for n in 0..x.n {
            for c in 0..x.c {
                y.data[n * x.c + c] = x.plane(n, c).iter().sum::<f64>() / hw;
            }
        }
        self.in_shape = (x.n, x.c, x.h, x.w);
        y
    }

    pub fn backward(&mut self, dy: &Mat) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let hw = (h * w) as f64;
        for ni in 0..n {
            for ci in 0..c {
                let g = dy.data[ni * c + ci] / hw;
                let base = (ni * c + ci) * h * w;
                for v in dx.data[base..base + h * w].iter_mut() {
                    *v = g;
                }
            }
        }
        dx
    }
}

/// Sub-pixel upsampling: (N, C*r^2, H, W) -> (N, C, H*r, W*r).
pub struct PixelShuffle {
    pub r: usize,
    in_shape: (usize, usize, usize, usize),
}

impl PixelShuffle {
    pub fn new(r: usize) -> Self {
        PixelShuffle {
            r,
            in_shape: (0, 0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: &Tensor, _pass: Pass) -> Tensor {
        let r = self.r;
        assert!(x.c % (r * r) == 0, "channels not divisible by r^2");
        let co = x.c / (r * r);
        let (oh, ow) = (x.h * r, x.w * r);
        let mut y = Tensor::zeros(x.n, co, oh, ow);
        let xdata = &x.data;
        let (h, w, cin) = (x.h, x.w, x.c);
        par::chunks_mut(&mut y.data, oh * ow, |chunk, plane| {
            let n = chunk / co;
            let c = chunk % co;
            for oy in 0..oh {
                for ox in 0..ow {
                    let ci = c * r * r + (oy % r) * r + (ox % r);
                    plane[oy * ow + ox] = xdata[((n * cin + ci) * h + oy / r) * w + ox / r];
                }
            }
        });
        self.in_shape = (x.n, x.c, x.h, x.w);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, cin, h, w) = self.in_shape;
        let r = self.r;
        let co = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut dx = Tensor::zeros(n, cin, h, w);
        let dydata = &dy.data;
        par::chunks_mut(&mut dx.data, h * w, |chunk, plane| {
            let ni = chunk / cin;
            let ci = chunk % cin;
            let c = ci / (r * r);
            let rem = ci % (r * r);
            let (sy, sx) = (rem / r, rem % r);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] =
                        dydata[((ni * co + c) * oh + y * r + sy) * ow + x * r + sx];
                }
            }
        });
        dx
    }
}

/// Fully connected head over N x C matrices.
pub struct Linear {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Mat>,
    last_pass: Pass,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = init_bound(cin);
        let weight: Vec<f64> = (0..cout * cin)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            cin,
            cout,
            weight: Param::new(format!("{name}.weight"), vec![cout, cin], weight, true),
            bias: Param::new(format!("{name}.bias"), vec![cout], bias, true),
            cache_x: None,
            last_pass: Pass::Infer,
        }
    }

    pub fn forward(&mut self, x: &Mat, pass: Pass) -> Mat {
        assert_eq!(x.cols, self.cin);
        let mut y = Mat::zeros(x.rows, self.cout);
        for n in 0..x.rows {
            let xr = x.row(n);
            let yr = y.row_mut(n);
            for co in 0..self.cout {
                let wrow = &self.weight.data[co * self.cin..(co + 1) * self.cin];
                let mut acc = self.bias.data[co];
                for (wv, xv) in wrow.iter().zip(xr.iter()) {
                    acc += wv * xv;
                }
                yr[co] = acc;
            }
        }
        self.last_pass = pass;
        self.cache_x = if pass.caches() { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Mat) -> Mat {
        let x = self.cache_x.as_ref().expect("linear backward without forward");
        let mut dx = Mat::zeros(x.rows, self.cin);
        for n in 0..x.rows {
            let dyr = dy.row(n);
            let dxr = dx.row_mut(n);
            for co in 0..self.cout {
                let g = dyr[co];
                if g == 0.0 {
                    continue;
                }
                let wrow = &self.weight.data[co * self.cin..(co + 1) * self.cin];
                for (slot, wv) in dxr.iter_mut().zip(wrow.iter()) {
                    *slot += g * wv;
                }
            }
        }
        if self.last_pass.trains_params() {
            for n in 0..x.rows {
                let dyr = dy.row(n);
                let xr = x.row(n);
                for co in 0..self.cout {
                    let g = dyr[co];
                    let grow = &mut self.weight.grad[co * self.cin..(co + 1) * self.cin];
                    for (slot, xv) in grow.iter_mut().zip(xr.iter()) {
                        *slot += g * xv;
                    }
                    self.bias.grad[co] += g;
                }
            }
        }
        dx
    }
}

impl HasParams for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fixed per-channel standardization `(x - mean) / std`. Not trainable;
/// the constants live in the recognizer manifest.
#[derive(Debug, Clone)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl InputNorm {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, 3);
        let mut y = x.clone();
        let hw = x.h * x.w;
        for n in 0..x.n {
            for c in 0..3 {
                let base = (n * 3 + c) * hw;
                let (m, s) = (self.mean[c], self.std[c]);
                for v in y.data[base..base + hw].iter_mut() {
                    *v = (*v - m) / s;
                }
            }
        }
        y
    }

    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        let hw = dy.h * dy.w;
        for n in 0..dy.n {
            for c in 0..3 {
                let base = (n * 3 + c) * hw;
                let s = self.std[c];
                for v in dx.data[base..base + hw].iter_mut() {
                    *v /= s;
                }
            }
        }
        dx
    }
}
