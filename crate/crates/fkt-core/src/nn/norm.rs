//! Batch normalization over (N, H, W) per channel.

use ndarray::{Array1, Array4, Axis};

use super::{BufferFn, BufferRef, ParamFn, ParamRef, Params};
use crate::par;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
    train_mode: bool,
}

#[derive(Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    grad_gamma: Array1<f64>,
    grad_beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let count = n * h * w;

        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let stats = par::map_indexed(c, |ch| {
                let view = x.index_axis(Axis(1), ch);
                let mut sum = 0.0;
                for v in view.iter() {
                    sum += v;
                }
                let mu = sum / count as f64;
                let mut sq = 0.0;
                for v in view.iter() {
                    sq += (v - mu) * (v - mu);
                }
                (mu, sq / count as f64)
            });
            let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
            // Running stats track the unbiased variance.
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - MOMENTUM) * self.running_mean[ch] + MOMENTUM * mean[ch];
                self.running_var[ch] =
                    (1.0 - MOMENTUM) * self.running_var[ch] + MOMENTUM * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (
                self.running_mean.to_vec(),
                self.running_var.to_vec(),
            )
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut xhat = x.clone();
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * is);
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train_mode: train,
        });
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let count = (n * h * w) as f64;
        let mut grad_in = Array4::<f64>::zeros((n, c, h, w));

        for ch in 0..c {
            let g_view = grad_out.index_axis(Axis(1), ch);
            let xhat_view = cache.xhat.index_axis(Axis(1), ch);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (g, xh) in g_view.iter().zip(xhat_view.iter()) {
                sum_g += g;
                sum_gx += g * xh;
            }
            self.grad_gamma[ch] += sum_gx;
            self.grad_beta[ch] += sum_g;

            let gamma = self.gamma[ch];
            let inv_std = cache.inv_std[ch];
            let mut gi_view = grad_in.index_axis_mut(Axis(1), ch);
            if cache.train_mode {
                // Batch statistics couple every element of the channel.
                for ((gi, g), xh) in gi_view
                    .iter_mut()
                    .zip(g_view.iter())
                    .zip(xhat_view.iter())
                {
                    *gi = gamma * inv_std * (g - sum_g / count - xh * sum_gx / count);
                }
            } else {
                for (gi, g) in gi_view.iter_mut().zip(g_view.iter()) {
                    *gi = gamma * inv_std * g;
                }
            }
        }
        grad_in
    }
}

impl Params for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(ParamRef {
            name: format!("{prefix}.gamma"),
            excluded: true,
            shape: vec![self.channels],
            data: self.gamma.as_slice_mut().unwrap(),
            grad: self.grad_gamma.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.beta"),
            excluded: true,
            shape: vec![self.channels],
            data: self.beta.as_slice_mut().unwrap(),
            grad: self.grad_beta.as_slice_mut().unwrap(),
        });
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        f(BufferRef {
            name: format!("{prefix}.running_mean"),
            shape: vec![self.channels],
            data: self.running_mean.as_slice_mut().unwrap(),
        });
        f(BufferRef {
            name: format!("{prefix}.running_var"),
            shape: vec![self.channels],
            data: self.running_var.as_slice_mut().unwrap(),
        });
    }
}
