//! Batch normalization over NCHW tensors.

use super::{HasParams, Param, Pass};
use crate::par;
use crate::tensor::Tensor;

pub struct BatchNorm2d {
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<Cache>,
}

struct Cache {
    /// Normalized activations (train pass) — needed for the batch-stat
    /// backward formula.
    xhat: Option<Tensor>,
    invstd: Vec<f64>,
    count: usize,
    pass: Pass,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm2d {
            c,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new(format!("{name}.gamma"), vec![c], vec![1.0; c], true),
            beta: Param::new(format!("{name}.beta"), vec![c], vec![0.0; c], true),
            running_mean: Param::new(format!("{name}.running_mean"), vec![c], vec![0.0; c], false),
            running_var: Param::new(format!("{name}.running_var"), vec![c], vec![1.0; c], false),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        assert_eq!(x.c, self.c, "{}: channel mismatch", self.gamma.name);
        let hw = x.h * x.w;
        let count = x.n * hw;
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);

        if pass == Pass::Train {
            // Batch statistics, one channel per chunk; per-channel sums
            // run over samples in index order so results are independent
            // of worker count.
            let mut mean = vec![0.0; self.c];
            let xdata = &x.data;
            let c = self.c;
            par::chunks_mut(&mut mean, 1, |ci, m| {
                let mut acc = 0.0;
                for n in 0..x.n {
                    let base = (n * c + ci) * hw;
                    for v in &xdata[base..base + hw] {
                        acc += v;
                    }
                }
                m[0] = acc / count as f64;
            });
            let mut var = vec![0.0; self.c];
            par::chunks_mut(&mut var, 1, |ci, out| {
                let mu = mean[ci];
                let mut acc = 0.0;
                for n in 0..x.n {
                    let base = (n * c + ci) * hw;
                    for v in &xdata[base..base + hw] {
                        let d = v - mu;
                        acc += d * d;
                    }
                }
                out[0] = acc / count as f64;
            });
            let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

            let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
            par::chunks_mut(&mut xhat.data, hw, |chunk, plane| {
                let ci = chunk % c;
                let base = chunk * hw;
                let (mu, is) = (mean[ci], invstd[ci]);
                for (i, slot) in plane.iter_mut().enumerate() {
                    *slot = (xdata[base + i] - mu) * is;
                }
            });
            let gamma = &self.gamma.data;
            let beta = &self.beta.data;
            let xh = &xhat.data;
            par::chunks_mut(&mut y.data, hw, |chunk, plane| {
                let ci = chunk % c;
                let base = chunk * hw;
                let (g, b) = (gamma[ci], beta[ci]);
                for (i, slot) in plane.iter_mut().enumerate() {
                    *slot = g * xh[base + i] + b;
                }
            });

            // Running stats track the unbiased batch variance.
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ci in 0..self.c {
                self.running_mean.data[ci] =
                    (1.0 - self.momentum) * self.running_mean.data[ci] + self.momentum * mean[ci];
                self.running_var.data[ci] = (1.0 - self.momentum) * self.running_var.data[ci]
                    + self.momentum * var[ci] * unbias;
            }
            self.cache = Some(Cache {
                xhat: Some(xhat),
                invstd,
                count,
                pass,
            });
        } else {
            // Frozen statistics: a per-channel affine map.
            let invstd: Vec<f64> = self
                .running_var
                .data
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            let xdata = &x.data;
            let c = self.c;
            let gamma = &self.gamma.data;
            let beta = &self.beta.data;
            let rm = &self.running_mean.data;
            par::chunks_mut(&mut y.data, hw, |chunk, plane| {
                let ci = chunk % c;
                let base = chunk * hw;
                let scale = gamma[ci] * invstd[ci];
                let shift = beta[ci] - rm[ci] * scale;
                for (i, slot) in plane.iter_mut().enumerate() {
                    *slot = xdata[base + i] * scale + shift;
                }
            });
            self.cache = if pass.caches() {
                Some(Cache {
                    xhat: None,
                    invstd,
                    count,
                    pass,
                })
            } else {
                None
            };
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("bn backward without forward");
        let hw = dy.h * dy.w;
        let c = self.c;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);

        match cache.pass {
            Pass::Train => {
                let xhat = cache.xhat.as_ref().unwrap();
                let m = cache.count as f64;
                // Per-channel reductions first.
                let mut s1 = vec![0.0; c];
                let dydata = &dy.data;
                let xh = &xhat.data;
                par::chunks_mut(&mut s1, 1, |ci, out| {
                    let mut acc = 0.0;
                    for n in 0..dy.n {
                        let base = (n * c + ci) * hw;
                        for v in &dydata[base..base + hw] {
                            acc += v;
                        }
                    }
                    out[0] = acc;
                });
                let mut s2 = vec![0.0; c];
                par::chunks_mut(&mut s2, 1, |ci, out| {
                    let mut acc = 0.0;
                    for n in 0..dy.n {
                        let base = (n * c + ci) * hw;
                        for i in 0..hw {
                            acc += dydata[base + i] * xh[base + i];
                        }
                    }
                    out[0] = acc;
                });
                let gamma = &self.gamma.data;
                let invstd = &cache.invstd;
                par::chunks_mut(&mut dx.data, hw, |chunk, plane| {
                    let ci = chunk % c;
                    let base = chunk * hw;
                    let scale = gamma[ci] * invstd[ci];
                    let (a, b) = (s1[ci] / m, s2[ci] / m);
                    for (i, slot) in plane.iter_mut().enumerate() {
                        *slot = scale * (dydata[base + i] - a - xh[base + i] * b);
                    }
                });
                for ci in 0..c {
                    self.gamma.grad[ci] += s2[ci];
                    self.beta.grad[ci] += s1[ci];
                }
            }
            Pass::Loss => {
                let gamma = &self.gamma.data;
                let invstd = &cache.invstd;
                let dydata = &dy.data;
                par::chunks_mut(&mut dx.data, hw, |chunk, plane| {
                    let ci = chunk % c;
                    let base = chunk * hw;
                    let scale = gamma[ci] * invstd[ci];
                    for (i, slot) in plane.iter_mut().enumerate() {
                        *slot = dydata[base + i] * scale;
                    }
                });
            }
            Pass::Infer => panic!("bn backward after inference pass"),
        }
        dx
    }
}

impl HasParams for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(n, c, h, w);
        let mut r = rng::stream(seed, 0);
        for v in t.data.iter_mut() {
            *v = r.random_range(-2.0..2.0);
        }
        t
    }

    #[test]
    fn train_output_is_normalized() {
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = random_tensor(4, 3, 5, 5, 1);
        let y = bn.forward(&x, Pass::Train);
        let hw = 25;
        for ci in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..4 {
                for v in y.plane(n, ci) {
                    mean += v;
                }
            }
            mean /= (4 * hw) as f64;
            for n in 0..4 {
                for v in y.plane(n, ci) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= (4 * hw) as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_pass_does_not_touch_state() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = random_tensor(2, 2, 4, 4, 2);
        let _ = bn.forward(&x, Pass::Train);
        let rm = bn.running_mean.data.clone();
        let rv = bn.running_var.data.clone();
        let _ = bn.forward(&x, Pass::Loss);
        let _ = bn.forward(&x, Pass::Infer);
        assert_eq!(bn.running_mean.data, rm);
        assert_eq!(bn.running_var.data, rv);
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 2);
        // Asymmetric gamma/beta so the test covers them.
        bn.gamma.data = vec![1.3, 0.7];
        bn.beta.data = vec![0.1, -0.2];
        let x = random_tensor(3, 2, 4, 4, 3);
        let mask = random_tensor(3, 2, 4, 4, 4);
        let loss = |bn: &mut BatchNorm2d, x: &Tensor| -> f64 {
            let y = bn.forward(x, Pass::Train);
            y.data.iter().zip(mask.data.iter()).map(|(a, b)| a * b).sum()
        };
        let _ = bn.forward(&x, Pass::Train);
        let dx = bn.backward(&mask);
        let eps = 1e-6;
        for idx in [0usize, 17, 40, 95] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let before_rm = bn.running_mean.data.clone();
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * eps);
            bn.running_mean.data = before_rm; // undo fd-side running updates
            let an = dx.data[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(1.0) < 1e-4,
                "dx[{idx}]: {fd} vs {an}"
            );
        }
        // Gamma / beta.
        for ci in 0..2 {
            let orig = bn.gamma.data[ci];
            bn.gamma.data[ci] = orig + eps;
            let lp = loss(&mut bn, &x);
            bn.gamma.data[ci] = orig - eps;
            let lm = loss(&mut bn, &x);
            bn.gamma.data[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - bn.gamma.grad[ci]).abs() / fd.abs().max(1.0) < 1e-4);
        }
    }

    #[test]
    fn loss_pass_backward_is_affine() {
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.running_var.data = vec![4.0, 0.25];
        bn.gamma.data = vec![2.0, 3.0];
        let x = random_tensor(1, 2, 2, 2, 5);
        let _ = bn.forward(&x, Pass::Loss);
        let mut dy = Tensor::zeros(1, 2, 2, 2);
        dy.data.fill(1.0);
        let dx = bn.backward(&dy);
        let expect0 = 2.0 / (4.0f64 + 1e-5).sqrt();
        let expect1 = 3.0 / (0.25f64 + 1e-5).sqrt();
        assert!((dx.data[0] - expect0).abs() < 1e-12);
        assert!((dx.data[4] - expect1).abs() < 1e-12);
        assert!(bn.gamma.grad.iter().all(|&g| g == 0.0));
    }
}
