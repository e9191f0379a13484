//! Max pooling and global average pooling.

use ndarray::{Array2, Array4};

#[derive(Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<Vec<usize>>,
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            argmax: None,
            input_dim: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let x_flat = x.as_slice().unwrap();

        let mut oi = 0usize;
        for i in 0..n {
            for ch in 0..c {
                let plane = &x_flat[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let sy =
                                (oy * self.stride + ky) as isize - self.padding as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let sx =
                                    (ox * self.stride + kx) as isize - self.padding as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let idx = sy as usize * w + sx as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[[i, ch, oy, ox]] = best;
                        argmax[oi] = (i * c + ch) * h * w + best_idx;
                        oi += 1;
                    }
                }
            }
        }
        if train {
            self.argmax = Some(argmax);
            self.input_dim = Some((n, c, h, w));
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let argmax = self.argmax.take().expect("backward before forward");
        let dim = self.input_dim.take().unwrap();
        let mut grad_in = Array4::<f64>::zeros(dim);
        let gi = grad_in.as_slice_mut().unwrap();
        for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
            gi[idx] += g;
        }
        grad_in
    }
}

/// (N, C, H, W) -> (N, C) mean over the spatial grid.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut sum = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    sum += x[[i, ch, y, xx]];
                }
            }
            out[[i, ch]] = sum * scale;
        }
    }
    out
}

/// Spread feature gradients uniformly back over the spatial grid.
pub fn global_avg_pool_backward(
    grad_out: &Array2<f64>,
    spatial: (usize, usize),
) -> Array4<f64> {
    let (n, c) = grad_out.dim();
    let (h, w) = spatial;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| grad_out[[i, ch]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_maximum() {
        let x = Array4::from_shape_vec(
            (1, 1, 4, 4),
            (0..16).map(|v| v as f64).collect(),
        )
        .unwrap();
        let mut pool = MaxPool2d::new(2, 2, 0);
        let y = pool.forward(&x, true);
        assert_eq!(y.as_slice().unwrap(), &[5.0, 7.0, 13.0, 15.0]);
        let g = pool.backward(&Array4::ones((1, 1, 2, 2)));
        assert_eq!(g[[0, 0, 1, 1]], 1.0);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn gap_and_backward_are_means() {
        let x = Array4::from_shape_vec((1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 2.5);
        assert_eq!(y[[0, 1]], 6.5);
        let g = global_avg_pool_backward(&y, (2, 2));
        assert_eq!(g[[0, 0, 0, 0]], 2.5 / 4.0);
    }
}
