use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Max pooling over `[ch, h, w]` inputs. Windows never hang off the edge:
/// `(h - window) % stride == 0` is required (likewise for `w`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2dLayer {
    window: (usize, usize),
    stride: (usize, usize),
}

impl MaxPool2dLayer {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(BtnError::Geometry("maxpool window and stride must be positive".into()));
        }
        Ok(MaxPool2dLayer { window, stride })
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub(crate) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 {
            return Err(BtnError::LayerShape {
                index: 0,
                kind: "maxpool2d",
                expected: vec![0, self.window.0, self.window.1],
                actual: input.to_vec(),
            });
        }
        let (h, w) = (input[1], input[2]);
        if h < self.window.0
            || w < self.window.1
            || !(h - self.window.0).is_multiple_of(self.stride.0)
            || !(w - self.window.1).is_multiple_of(self.stride.1)
        {
            return Err(BtnError::Geometry(format!(
                "maxpool window {:?} stride {:?} leaves a partial window on {h}x{w}",
                self.window, self.stride
            )));
        }
        Ok(vec![
            input[0],
            (h - self.window.0) / self.stride.0 + 1,
            (w - self.window.1) / self.stride.1 + 1,
        ])
    }

    /// Pooled values and the flat input index of each window's first
    /// row-major maximum.
    pub(crate) fn pool<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let out_shape = self.output_shape(x.shape())?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let data = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * self.stride.0;
                    let x0 = ox * self.stride.1;
                    let mut best_i = (ch * h + y0) * w + x0;
                    let mut best = data[best_i];
                    for dy in 0..self.window.0 {
                        for dx in 0..self.window.1 {
                            let i = (ch * h + y0 + dy) * w + x0 + dx;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        Ok((Tensor::new(out_shape, out)?, arg))
    }
}

/// Routes each output gradient to its recorded argmax.
pub(crate) fn unpool<T: Scalar>(grad_out: &[T], argmax: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&v, &i) in grad_out.iter().zip(argmax) {
        gd[i] = gd[i] + v;
    }
    g
}
