//! 2D convolution via im2col and per-image matmul.
//!
//! Images are independent work items, so the batch loop parallelizes without
//! changing results; weight-gradient partials are reduced sequentially in
//! image order to keep f64 sums bit-stable.

use ndarray::{Array1, Array2, Array4};

use super::{ParamFn, ParamRef, Params};
use crate::par;

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

/// Unfold one image into (oh*ow, cin*k*k) with zero padding.
fn im2col(g: Geom, img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Array2<f64> {
    let Geom { cin, k, stride, padding } = g;
    let mut col = Array2::<f64>::zeros((oh * ow, cin * k * k));
    let col_s = col.as_slice_mut().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cin * k * k;
            let base_y = (oy * stride) as isize - padding as isize;
            let base_x = (ox * stride) as isize - padding as isize;
            for c in 0..cin {
                for ky in 0..k {
                    let sy = base_y + ky as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = base_x + kx as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col_s[row + (c * k + ky) * k + kx] =
                            img[(c * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold column gradients back onto an image, accumulating overlaps.
fn col2im(g: Geom, col: &Array2<f64>, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let Geom { cin, k, stride, padding } = g;
    let mut img = vec![0.0f64; cin * h * w];
    let col_s = col.as_slice().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cin * k * k;
            let base_y = (oy * stride) as isize - padding as isize;
            let base_x = (ox * stride) as isize - padding as isize;
            for c in 0..cin {
                for ky in 0..k {
                    let sy = base_y + ky as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = base_x + kx as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        img[(c * h + sy as usize) * w + sx as usize] +=
                            col_s[row + (c * k + ky) * k + kx];
                    }
                }
            }
        }
    }
    img
}

#[derive(Debug)]
pub struct Conv2d {
    // weight stored as (out_channels, in_channels * kh * kw); exported shape
    // is the usual 4-D one.
    weight: Array2<f64>,
    bias: Option<Array1<f64>>,
    grad_weight: Array2<f64>,
    grad_bias: Option<Array1<f64>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        Conv2d {
            weight: Array2::zeros((out_channels, k)),
            bias: bias.then(|| Array1::zeros(out_channels)),
            grad_weight: Array2::zeros((out_channels, k)),
            grad_bias: bias.then(|| Array1::zeros(out_channels)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache_input: None,
        }
    }

    pub fn output_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn geom(&self) -> Geom {
        Geom {
            cin: self.in_channels,
            k: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels, "channel mismatch");
        let (oh, ow) = self.output_spatial(h, w);
        let cout = self.out_channels;

        let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
        let x_flat = x.as_slice().unwrap();
        let img_len = cin * h * w;
        let weight = &self.weight;
        let bias = &self.bias;
        let geom = self.geom();
        par::for_each_chunk_mut(out.as_slice_mut().unwrap(), cout * oh * ow, |i, o| {
            let img = &x_flat[i * img_len..(i + 1) * img_len];
            let col = im2col(geom, img, h, w, oh, ow);
            // (cout, k) x (k, oh*ow) -> (cout, oh*ow)
            let y = weight.dot(&col.t());
            o.copy_from_slice(y.as_slice().expect("matmul output is contiguous"));
            if let Some(b) = bias {
                for c in 0..cout {
                    for v in &mut o[c * oh * ow..(c + 1) * oh * ow] {
                        *v += b[c];
                    }
                }
            }
        });

        if train {
            self.cache_input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_input.take().expect("backward before forward");
        let (n, cin, h, w) = x.dim();
        let (ng, cout, oh, ow) = grad_out.dim();
        assert_eq!(n, ng);
        assert_eq!(cout, self.out_channels);

        let mut grad_in = Array4::<f64>::zeros((n, cin, h, w));
        let x_flat = x.as_slice().unwrap();
        let g_flat = grad_out.as_slice().unwrap();
        let img_len = cin * h * w;
        let out_len = cout * oh * ow;

        // Cap in-flight dW partials (one per image) at roughly 64 MB.
        let dw_bytes = self.weight.len() * 8;
        let chunk = (64 << 20) / dw_bytes.max(1);
        let chunk = chunk.clamp(1, n.max(1));

        let weight = self.weight.clone();
        let geom = self.geom();
        let mut start = 0usize;
        while start < n {
            let end = (start + chunk).min(n);
            let parts: Vec<(Vec<f64>, Array2<f64>, Vec<f64>)> =
                par::map_indexed(end - start, |j| {
                    let i = start + j;
                    let img = &x_flat[i * img_len..(i + 1) * img_len];
                    let g = &g_flat[i * out_len..(i + 1) * out_len];
                    let g_mat =
                        ndarray::ArrayView2::from_shape((cout, oh * ow), g).unwrap();
                    let col = im2col(geom, img, h, w, oh, ow);
                    // dX col: (oh*ow, cout) x (cout, k)
                    let dcol = g_mat.t().dot(&weight);
                    let dimg = col2im(geom, &dcol, h, w, oh, ow);
                    // dW partial: (cout, oh*ow) x (oh*ow, k)
                    let dw = g_mat.dot(&col);
                    let db: Vec<f64> = (0..cout)
                        .map(|c| g[c * oh * ow..(c + 1) * oh * ow].iter().sum())
                        .collect();
                    (dimg, dw, db)
                });
            let gi_flat = grad_in.as_slice_mut().unwrap();
            for (j, (dimg, dw, db)) in parts.into_iter().enumerate() {
                let i = start + j;
                gi_flat[i * img_len..(i + 1) * img_len].copy_from_slice(&dimg);
                self.grad_weight += &dw;
                if let Some(gb) = &mut self.grad_bias {
                    for (c, v) in db.iter().enumerate() {
                        gb[c] += v;
                    }
                }
            }
            start = end;
        }
        grad_in
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

impl Params for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        let shape = self.weight_shape();
        f(ParamRef {
            name: format!("{prefix}.weight"),
            excluded: false,
            shape,
            data: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice_mut().unwrap(),
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            f(ParamRef {
                name: format!("{prefix}.bias"),
                excluded: true,
                shape: vec![b.len()],
                data: b.as_slice_mut().unwrap(),
                grad: gb.as_slice_mut().unwrap(),
            });
        }
    }
}
