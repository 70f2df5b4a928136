//! The compute core: explicit-backprop layers over NCHW tensors.
//!
//! There is no tape. Every layer caches what its backward pass needs
//! during `forward` and models wire the chain rule explicitly. That
//! keeps gradient flow fully inspectable — which the training modes
//! rely on (frozen recognizers, the stop-gradient boundary) — and makes
//! bitwise reproducibility a matter of fixed loop order rather than
//! scheduler luck. Heavy kernels parallelize over disjoint output
//! chunks through [`crate::par`], so worker count never changes results.

pub mod common;
pub mod conv;
pub mod norm;

pub use common::{AvgPool2, GlobalAvgPool, InputNorm, Linear, MaxPool2, PRelu, PixelShuffle, Relu};
pub use conv::Conv2d;
pub use norm::BatchNorm2d;

/// How a forward pass will be used.
///
/// * `Train` — caches for backward, batch statistics, running-stat
///   updates; parameter gradients accumulate on backward.
/// * `Loss` — frozen-model pass that still supports backward *through*
///   the model (running statistics, activations cached, but no
///   parameter gradients and no state mutation). Used when a fixed
///   recognizer serves as a loss function.
/// * `Infer` — plain inference, nothing cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Train,
    Loss,
    Infer,
}

impl Pass {
    pub fn caches(self) -> bool {
        !matches!(self, Pass::Infer)
    }

    pub fn trains_params(self) -> bool {
        matches!(self, Pass::Train)
    }
}

/// One named parameter tensor with its gradient accumulator.
/// Non-trainable entries (batch-norm running statistics) ride along for
/// serialization but are skipped by optimizers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Self {
        let len = data.len();
        assert_eq!(len, shape.iter().product::<usize>(), "param shape mismatch");
        Param {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; len],
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding parameters, visited in a fixed deterministic order.
/// The order defines the optimizer state layout and the checkpoint
/// weight stream, so implementations must keep it stable.
pub trait HasParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
}

pub fn zero_grads(net: &mut dyn HasParams) {
    net.visit_params(&mut |p| p.zero_grad());
}

/// L2 norm over the gradients of all trainable parameters.
pub fn grad_norm(net: &mut dyn HasParams) -> f64 {
    let mut acc = 0.0;
    net.visit_params(&mut |p| {
        if p.trainable {
            acc += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    });
    acc.sqrt()
}

/// `(name, shape)` of every parameter in visit order.
pub fn param_census(net: &mut dyn HasParams) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push((p.name.clone(), p.shape.clone())));
    out
}

pub fn param_count(net: &mut dyn HasParams) -> usize {
    let mut n = 0;
    net.visit_params(&mut |p| n += p.data.len());
    n
}

/// Serialize every parameter (trainable or not) as little-endian f64,
/// in visit order.
pub fn params_to_bytes(net: &mut dyn HasParams) -> Vec<u8> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

/// Inverse of [`params_to_bytes`]. Fails if the byte count disagrees
/// with the model's parameter census.
pub fn params_from_bytes(net: &mut dyn HasParams, bytes: &[u8]) -> Result<(), String> {
    let expected = {
        let mut n = 0;
        net.visit_params(&mut |p| n += p.data.len());
        n * 8
    };
    if bytes.len() != expected {
        return Err(format!(
            "weight blob holds {} bytes, model needs {}",
            bytes.len(),
            expected
        ));
    }
    let mut offset = 0usize;
    net.visit_params(&mut |p| {
        for v in p.data.iter_mut() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    });
    Ok(())
}

/// Adam with PyTorch conventions (bias-corrected moments).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn HasParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if !p.trainable {
                return;
            }
            if ms.len() == idx {
                ms.push(vec![0.0; p.data.len()]);
                vs.push(vec![0.0; p.data.len()]);
            }
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            assert_eq!(m.len(), p.data.len(), "optimizer state out of sync");
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Plain SGD with momentum (used when fine-tuning the recognizer).
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    v: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn HasParams) {
        let (lr, mu) = (self.lr, self.momentum);
        let vs = &mut self.v;
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if !p.trainable {
                return;
            }
            if vs.len() == idx {
                vs.push(vec![0.0; p.data.len()]);
            }
            let v = &mut vs[idx];
            for i in 0..p.data.len() {
                v[i] = mu * v[i] + p.grad[i];
                p.data[i] -= lr * v[i];
            }
            idx += 1;
        });
    }
}

/// Kaiming-uniform bound used by the default initializers.
pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy {
        p: Param,
    }

    impl HasParams for Toy {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut net = Toy {
            p: Param::new("w", vec![2], vec![1.0, -1.0], true),
        };
        net.p.grad = vec![1.0, -1.0];
        let mut opt = Adam::new(0.1);
        opt.step(&mut net);
        assert!(net.p.data[0] < 1.0);
        assert!(net.p.data[1] > -1.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut net = Toy {
            p: Param::new("w", vec![1], vec![0.0], true),
        };
        let mut opt = SgdMomentum::new(1.0, 0.9);
        net.p.grad = vec![1.0];
        opt.step(&mut net);
        assert_eq!(net.p.data[0], -1.0);
        net.p.grad = vec![0.0];
        opt.step(&mut net);
        // Velocity carries over: v = 0.9, w = -1.9.
        assert!((net.p.data[0] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        struct Two {
            a: Param,
            b: Param,
        }
        impl HasParams for Two {
            fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.a);
                f(&mut self.b);
            }
        }
        let mut net = Two {
            a: Param::new("w", vec![1], vec![1.0], true),
            b: Param::new("stat", vec![1], vec![1.0], false),
        };
        net.a.grad = vec![1.0];
        net.b.grad = vec![1.0];
        Adam::new(0.5).step(&mut net);
        assert_ne!(net.a.data[0], 1.0);
        assert_eq!(net.b.data[0], 1.0);
    }

    #[test]
    fn bytes_roundtrip_and_mismatch() {
        let mut net = Toy {
            p: Param::new("w", vec![3], vec![1.5, -2.25, 0.125], true),
        };
        let bytes = params_to_bytes(&mut net);
        let mut other = Toy {
            p: Param::new("w", vec![3], vec![0.0; 3], true),
        };
        params_from_bytes(&mut other, &bytes).unwrap();
        assert_eq!(other.p.data, vec![1.5, -2.25, 0.125]);
        assert!(params_from_bytes(&mut other, &bytes[..8]).is_err());
    }
}
