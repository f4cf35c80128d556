use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use crate::scalar::{abs_subgradient, Scalar};

/// Fully connected layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(BtnError::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "dense weight must be rank 2".into(),
            });
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(BtnError::ShapeMismatch {
                op: "dense bias",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn from_rows(rows: &[&[f64]], bias: &[f64]) -> Result<Self> {
        let out = rows.len();
        let inp = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(Tensor::from_f64(&[out, inp], &flat)?, Tensor::from_f64(&[out], bias)?)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.in_features()] {
            return Err(BtnError::LayerShape {
                index: 0,
                kind: "dense",
                expected: vec![self.in_features()],
                actual: input.to_vec(),
            });
        }
        Ok(vec![self.out_features()])
    }

    /// `W x` (+ `b` when `with_bias`), optionally with `|W|` in place of `W`.
    pub(crate) fn affine(&self, x: &[T], with_bias: bool, absolute: bool) -> Tensor<T> {
        let (out, inp) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        let mut y = Vec::with_capacity(out);
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            let mut acc = if with_bias { self.bias.data()[o] } else { T::zero() };
            if absolute {
                for (&wv, &xv) in row.iter().zip(x) {
                    acc = acc + wv.abs() * xv;
                }
            } else {
                for (&wv, &xv) in row.iter().zip(x) {
                    acc = acc + wv * xv;
                }
            }
            y.push(acc);
        }
        Tensor::vector(y)
    }

    /// Accumulates parameter gradients for `y = W x + b` and optionally
    /// returns `W^T g`. With `absolute`, treats the map as `|W| x` (no bias):
    /// the weight gradient picks up `sign(W)` and the bias is untouched.
    pub(crate) fn affine_backward(
        &self,
        x: &[T],
        grad_out: &[T],
        grads: Option<&mut [Tensor<T>]>,
        absolute: bool,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let (out, inp) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        if let Some(grads) = grads {
            self.accumulate_param_grads(x, grad_out, grads, absolute);
        }
        if !want_input {
            return None;
        }
        let mut gx = vec![T::zero(); inp];
        for o in 0..out {
            let g = grad_out[o];
            let row_w = &w[o * inp..(o + 1) * inp];
            for (gxv, &wv) in gx.iter_mut().zip(row_w) {
                let wv = if absolute { wv.abs() } else { wv };
                *gxv = *gxv + wv * g;
            }
        }
        Some(Tensor::vector(gx))
    }

    fn accumulate_param_grads(&self, x: &[T], grad_out: &[T], grads: &mut [Tensor<T>], absolute: bool) {
        let (out, inp) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        let (gw, rest) = grads.split_at_mut(1);
        let gw = gw[0].data_mut();
        for o in 0..out {
            let g = grad_out[o];
            let row_w = &w[o * inp..(o + 1) * inp];
            let row_g = &mut gw[o * inp..(o + 1) * inp];
            if absolute {
                for ((gv, &wv), &xv) in row_g.iter_mut().zip(row_w).zip(x) {
                    *gv = *gv + abs_subgradient(wv) * g * xv;
                }
            } else {
                for (gv, &xv) in row_g.iter_mut().zip(x) {
                    *gv = *gv + g * xv;
                }
            }
        }
        if !absolute {
            let gb = rest[0].data_mut();
            for (b, &g) in gb.iter_mut().zip(grad_out) {
                *b = *b + g;
            }
        }
    }
}
