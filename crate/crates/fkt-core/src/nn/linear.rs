//! Fully connected layer on (N, features).

use ndarray::{Array1, Array2};

use super::{ParamFn, ParamRef, Params};

#[derive(Debug)]
pub struct Linear {
    weight: Array2<f64>, // (out, in)
    bias: Option<Array1<f64>>,
    grad_weight: Array2<f64>,
    grad_bias: Option<Array1<f64>>,
    pub in_features: usize,
    pub out_features: usize,
    cache_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((out_features, in_features)),
            bias: bias.then(|| Array1::zeros(out_features)),
            grad_weight: Array2::zeros((out_features, in_features)),
            grad_bias: bias.then(|| Array1::zeros(out_features)),
            in_features,
            out_features,
            cache_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                row += b;
            }
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_input.take().expect("backward before forward");
        self.grad_weight += &grad_out.t().dot(&x);
        if let Some(gb) = &mut self.grad_bias {
            for row in grad_out.rows() {
                *gb += &row;
            }
        }
        grad_out.dot(&self.weight)
    }

    /// Input gradient alone; touches neither caches nor parameter grads.
    pub fn input_grad(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        grad_out.dot(&self.weight)
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }
}

impl Params for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(ParamRef {
            name: format!("{prefix}.weight"),
            excluded: false,
            shape: vec![self.out_features, self.in_features],
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_matmul() {
        let mut lin = Linear::new(2, 2, true);
        *lin.weight_mut() = array![[1.0, 2.0], [3.0, 4.0]];
        lin.bias = Some(array![0.5, -0.5]);
        let x = array![[1.0, 1.0]];
        let y = lin.forward(&x, false);
        assert_eq!(y, array![[3.5, 6.5]]);
    }

    #[test]
    fn backward_accumulates_weight_grads() {
        let mut lin = Linear::new(2, 1, false);
        *lin.weight_mut() = array![[1.0, -1.0]];
        let x = array![[2.0, 3.0], [4.0, 5.0]];
        lin.forward(&x, true);
        let gx = lin.backward(&array![[1.0], [1.0]]);
        assert_eq!(lin.grad_weight, array![[6.0, 8.0]]);
        assert_eq!(gx, array![[1.0, -1.0], [1.0, -1.0]]);
    }
}
