//! Minimal layer zoo: convolution, batch norm, linear, pooling, ReLU.
//!
//! Each layer owns its parameters, gradient buffers and a forward cache, and
//! implements an explicit backward pass. Gradients for every layer are checked
//! against central finite differences in the test suite.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use ndarray::Array4;

use crate::rng::{fnv1a, StreamRng};

/// Mutable view of one parameter tensor during a visit.
pub struct ParamRef<'a> {
    /// Hierarchical name, e.g. `encoder.stage2.0.conv1.weight`.
    pub name: String,
    /// Bias or normalization parameter: skipped by layer-wise lr adaptation
    /// and weight decay in LARS.
    pub excluded: bool,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Mutable view of a non-trainable state tensor (batch-norm running stats).
pub struct BufferRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub type ParamFn<'c> = dyn FnMut(ParamRef<'_>) + 'c;
pub type BufferFn<'c> = dyn FnMut(BufferRef<'_>) + 'c;

/// Anything that exposes parameters and buffers by hierarchical name.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn);
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut BufferFn) {}

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |p: ParamRef<'_>| {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        });
    }
}

/// Initialize parameters from name-keyed streams so results do not depend on
/// visit order: conv weights get He-normal, linear weights the usual
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, norm scales one.
pub fn init_params<M: Params + ?Sized>(model: &mut M, seed: u64) {
    model.visit_params("", &mut |p: ParamRef<'_>| {
        let mut rng = StreamRng::from_key(&[seed, fnv1a(&p.name)]);
        if p.name.ends_with(".gamma") {
            p.data.iter_mut().for_each(|v| *v = 1.0);
        } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        } else if p.shape.len() == 4 {
            let fan_in = (p.shape[1] * p.shape[2] * p.shape[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            p.data.iter_mut().for_each(|v| *v = rng.normal_scaled(0.0, std));
        } else {
            let fan_in = *p.shape.last().unwrap_or(&1) as f64;
            let bound = (1.0 / fan_in).sqrt();
            p.data
                .iter_mut()
                .for_each(|v| *v = rng.uniform_in(-bound, bound));
        }
    });
}

/// ReLU with a cached activation mask.
#[derive(Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
        if train {
            self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.as_ref().expect("backward before forward");
        let mut grad = grad_out.clone();
        for (g, &m) in grad.iter_mut().zip(mask.iter()) {
            if !m {
                *g = 0.0;
            }
        }
        grad
    }
}
