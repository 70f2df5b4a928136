//! 2D convolution with explicit backward passes.

use rand::Rng;

use super::{init_bound, HasParams, Param, Pass};
use crate::par;
use crate::tensor::Tensor;

/// Valid output-x range for a kernel column `kw`: the x positions whose
/// sampled input column lands inside the image.
#[inline]
fn ox_range(stride: usize, pad: usize, kw: usize, w: usize, ow: usize) -> (usize, usize) {
    let s = stride as i64;
    let shift = kw as i64 - pad as i64;
    // 0 <= ox*s + shift <= w-1
    let lo = (-shift).div_euclid(s).max(0);
    let lo = if lo * s + shift < 0 { lo + 1 } else { lo };
    let hi = ((w as i64 - 1 - shift).div_euclid(s)).min(ow as i64 - 1);
    if hi < lo {
        (1, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Tensor>,
    last_pass: Pass,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = init_bound(fan_in);
        let weight: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::new(format!("{name}.weight"), vec![cout, cin, k, k], weight, true),
            bias: Param::new(format!("{name}.bias"), vec![cout], bias, true),
            cache_x: None,
            last_pass: Pass::Infer,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        assert_eq!(x.c, self.cin, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, self.cout, oh, ow);
        let (h, w, k, s, p) = (x.h, x.w, self.k, self.stride, self.pad);
        let cin = self.cin;
        let cout = self.cout;
        let weight = &self.weight.data;
        let bias = &self.bias.data;
        let xdata = &x.data;
        par::chunks_mut(&mut y.data, oh * ow, |chunk_idx, out_plane| {
            let n = chunk_idx / cout;
            let co = chunk_idx % cout;
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = weight[wbase + kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ox_range(s, p, kw, w, ow);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + kh) as i64 - p as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let yrow = oy * ow;
                            let ix0 = (ox_lo * s + kw) as i64 - p as i64;
                            if s == 1 {
                                let mut ix = xrow + ix0 as usize;
                                for ox in ox_lo..=ox_hi {
                                    out_plane[yrow + ox] += wv * xdata[ix];
                                    ix += 1;
                                }
                            } else {
                                let mut ix = xrow + ix0 as usize;
                                for ox in ox_lo..=ox_hi {
                                    out_plane[yrow + ox] += wv * xdata[ix];
                                    ix += s;
                                }
                            }
                        }
                    }
                }
            }
        });
        self.last_pass = pass;
        self.cache_x = if pass.caches() { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .cache_x
            .as_ref()
            .expect("conv backward without cached forward");
        let (h, w, k, s, p) = (x.h, x.w, self.k, self.stride, self.pad);
        let (oh, ow) = (dy.h, dy.w);
        let cin = self.cin;
        let cout = self.cout;
        debug_assert_eq!((oh, ow), self.out_hw(h, w));

        // Input gradient: one (n, ci) plane per chunk.
        let mut dx = Tensor::zeros(x.n, cin, h, w);
        let weight = &self.weight.data;
        let dydata = &dy.data;
        par::chunks_mut(&mut dx.data, h * w, |chunk_idx, dx_plane| {
            let n = chunk_idx / cin;
            let ci = chunk_idx % cin;
            for co in 0..cout {
                let dybase = (n * cout + co) * oh * ow;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = weight[wbase + kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ox_range(s, p, kw, w, ow);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + kh) as i64 - p as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let dyrow = dybase + oy * ow;
                            let xrow = iy as usize * w;
                            let ix0 = (ox_lo * s + kw) as i64 - p as i64;
                            let mut ix = xrow + ix0 as usize;
                            for ox in ox_lo..=ox_hi {
                                dx_plane[ix] += wv * dydata[dyrow + ox];
                                ix += s;
                            }
                        }
                    }
                }
            }
        });

        if self.last_pass.trains_params() {
            // Weight gradient: one output-channel slice per chunk.
            let xdata = &x.data;
            let ksz = cin * k * k;
            par::chunks_mut(&mut self.weight.grad, ksz, |co, dw| {
                for n in 0..x.n {
                    let dybase = (n * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let xbase = (n * cin + ci) * h * w;
                        for kh in 0..k {
                            for kw in 0..k {
                                let (ox_lo, ox_hi) = ox_range(s, p, kw, w, ow);
                                if ox_lo > ox_hi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * s + kh) as i64 - p as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    let dyrow = dybase + oy * ow;
                                    let xrow = xbase + iy as usize * w;
                                    let ix0 = (ox_lo * s + kw) as i64 - p as i64;
                                    let mut ix = xrow + ix0 as usize;
                                    for ox in ox_lo..=ox_hi {
                                        acc += dydata[dyrow + ox] * xdata[ix];
                                        ix += s;
                                    }
                                }
                                dw[(ci * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            });
            par::chunks_mut(&mut self.bias.grad, 1, |co, db| {
                let mut acc = 0.0;
                for n in 0..x.n {
                    let base = (n * cout + co) * oh * ow;
                    for v in &dydata[base..base + oh * ow] {
                        acc += v;
                    }
                }
                db[0] += acc;
            });
        }
        dx
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
