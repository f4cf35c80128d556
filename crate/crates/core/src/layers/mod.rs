//! Layer kinds with their forward, reverse-mode and interval rules.
//!
//! Affine layers (dense, conv) propagate boxes in center/radius form:
//! `c' = A c + b`, `r' = |A| r`. ReLU and max pooling are monotone, so they
//! map lower and upper bounds independently and exactly.

mod conv;
mod dense;
mod pool;

pub use conv::Conv2dLayer;
pub use dense::DenseLayer;
pub use pool::MaxPool2dLayer;

use crate::error::{BtnError, Result};
use crate::numerics::{IntervalTensor, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense(DenseLayer<T>),
    Conv2d(Conv2dLayer<T>),
    Relu,
    MaxPool2d(MaxPool2dLayer),
}

/// Forward-pass record needed by [`Layer::backward`]. Only valid for the
/// input that produced it.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Affine { input: Tensor<T> },
    Relu { input: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
}

/// Interval-pass record needed by [`Layer::interval_backward`].
#[derive(Clone, Debug)]
pub enum IntervalCache<T> {
    Affine { center: Tensor<T>, radius: Tensor<T> },
    Relu { lower: Tensor<T>, upper: Tensor<T> },
    MaxPool {
        input_shape: Vec<usize>,
        arg_lower: Vec<usize>,
        arg_upper: Vec<usize>,
    },
}

/// Norms of an affine layer's weight rows (bias excluded). A conv "row" is
/// the flattened kernel of one output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNorms<T> {
    pub l1_total: T,
    pub max_row_l1: T,
    pub row_l2: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    /// Number of parameter tensors (weight and bias for affine layers).
    pub fn param_count(&self) -> usize {
        if self.is_affine() {
            2
        } else {
            0
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![d.weight(), d.bias()],
            Layer::Conv2d(c) => vec![c.kernel(), c.bias()],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => d.params_mut().into_iter().collect(),
            Layer::Conv2d(c) => c.params_mut().into_iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Weight rows as `(row count, flat row-major data)`.
    pub fn weight_rows(&self) -> Result<(usize, &[T])> {
        match self {
            Layer::Dense(d) => Ok((d.out_features(), d.weight().data())),
            Layer::Conv2d(c) => Ok((c.out_channels(), c.kernel().data())),
            other => Err(BtnError::NonAffineLayer(other.kind())),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => d.output_shape(input),
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d(p) => p.output_shape(input),
        }
    }

    /// Forward value without recording a cache.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => {
                d.output_shape(x.shape())?;
                Ok(d.affine(x.data(), true, false))
            }
            Layer::Conv2d(c) => c.affine(x, true, false),
            Layer::Relu => Ok(relu(x)),
            Layer::MaxPool2d(p) => Ok(p.pool(x)?.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) => {
                let y = self.apply(x)?;
                Ok((y, LayerCache::Affine { input: x.clone() }))
            }
            Layer::Relu => Ok((relu(x), LayerCache::Relu { input: x.clone() })),
            Layer::MaxPool2d(p) => {
                let (y, argmax) = p.pool(x)?;
                Ok((
                    y,
                    LayerCache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
        }
    }

    /// Exact reverse-mode step: returns the input gradient and the parameter
    /// gradients (weight then bias; empty for parameter-free layers).
    pub fn backward(&self, grad_out: &Tensor<T>, cache: &LayerCache<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut grads: Vec<Tensor<T>> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let gx = self.backward_accumulate(grad_out, cache, Some(&mut grads), true)?;
        Ok((gx.expect("input gradient requested"), grads))
    }

    /// Like [`Layer::backward`] but adds parameter gradients into `grads`
    /// and skips the input gradient unless `want_input`.
    pub(crate) fn backward_accumulate(
        &self,
        grad_out: &Tensor<T>,
        cache: &LayerCache<T>,
        grads: Option<&mut [Tensor<T>]>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Affine { input }) => {
                let out = d.output_shape(input.shape()).map_err(stale)?;
                check_grad_shape(grad_out, &out, "dense")?;
                Ok(d.affine_backward(input.data(), grad_out.data(), grads, false, want_input))
            }
            (Layer::Conv2d(c), LayerCache::Affine { input }) => {
                c.output_shape(input.shape()).map_err(stale)?;
                c.affine_backward(input, grad_out, grads, false, want_input)
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                check_grad_shape(grad_out, input.shape(), "relu")?;
                Ok(want_input.then(|| mask_positive(grad_out, input)))
            }
            (Layer::MaxPool2d(p), LayerCache::MaxPool { input_shape, argmax }) => {
                let out = p.output_shape(input_shape).map_err(stale)?;
                check_grad_shape(grad_out, &out, "maxpool2d")?;
                Ok(want_input.then(|| pool::unpool(grad_out.data(), argmax, input_shape)))
            }
            (layer, _) => Err(BtnError::StaleCache(format!(
                "{} layer given a cache from a different layer kind",
                layer.kind()
            ))),
        }
    }

    pub fn interval_forward(&self, iv: &IntervalTensor<T>) -> Result<IntervalTensor<T>> {
        Ok(self.interval_forward_cached(iv)?.0)
    }

    pub(crate) fn interval_forward_cached(
        &self,
        iv: &IntervalTensor<T>,
    ) -> Result<(IntervalTensor<T>, IntervalCache<T>)> {
        match self {
            Layer::Dense(d) => {
                d.output_shape(iv.shape())?;
                let (center, radius) = iv.center_radius();
                let c = d.affine(center.data(), true, false);
                let r = d.affine(radius.data(), false, true);
                Ok((recombine(&c, &r), IntervalCache::Affine { center, radius }))
            }
            Layer::Conv2d(conv) => {
                let (center, radius) = iv.center_radius();
                let c = conv.affine(&center, true, false)?;
                let r = conv.affine(&radius, false, true)?;
                Ok((recombine(&c, &r), IntervalCache::Affine { center, radius }))
            }
            Layer::Relu => {
                let out = IntervalTensor::from_ordered(relu(iv.lower()), relu(iv.upper()));
                Ok((
                    out,
                    IntervalCache::Relu {
                        lower: iv.lower().clone(),
                        upper: iv.upper().clone(),
                    },
                ))
            }
            Layer::MaxPool2d(p) => {
                let (lo, arg_lower) = p.pool(iv.lower())?;
                let (hi, arg_upper) = p.pool(iv.upper())?;
                Ok((
                    IntervalTensor::from_ordered(lo, hi),
                    IntervalCache::MaxPool {
                        input_shape: iv.shape().to_vec(),
                        arg_lower,
                        arg_upper,
                    },
                ))
            }
        }
    }

    /// Reverse-mode step through [`Layer::interval_forward`]: given gradients
    /// with respect to the output lower and upper bounds, accumulates
    /// parameter gradients and optionally returns `(d lower_in, d upper_in)`.
    pub(crate) fn interval_backward(
        &self,
        grad_lower: &Tensor<T>,
        grad_upper: &Tensor<T>,
        cache: &IntervalCache<T>,
        mut grads: Option<&mut [Tensor<T>]>,
        want_input: bool,
    ) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        match (self, cache) {
            (Layer::Dense(_) | Layer::Conv2d(_), IntervalCache::Affine { center, radius }) => {
                // lower = c' - r', upper = c' + r'
                let gc = grad_lower.add(grad_upper)?;
                let gr = grad_upper.sub(grad_lower)?;
                let (gc_in, gr_in) = match self {
                    Layer::Dense(d) => {
                        let out = d.output_shape(center.shape()).map_err(stale)?;
                        check_grad_shape(&gc, &out, "dense")?;
                        (
                            d.affine_backward(center.data(), gc.data(), grads.as_deref_mut(), false, want_input),
                            d.affine_backward(radius.data(), gr.data(), grads, true, want_input),
                        )
                    }
                    Layer::Conv2d(c) => (
                        c.affine_backward(center, &gc, grads.as_deref_mut(), false, want_input)?,
                        c.affine_backward(radius, &gr, grads, true, want_input)?,
                    ),
                    _ => unreachable!(),
                };
                match (gc_in, gr_in) {
                    (Some(gc), Some(gr)) => {
                        let h = T::half();
                        let gl = gc.zip_with(&gr, "interval", |c, r| (c - r) * h)?;
                        let gu = gc.zip_with(&gr, "interval", |c, r| (c + r) * h)?;
                        Ok(Some((gl, gu)))
                    }
                    _ => Ok(None),
                }
            }
            (Layer::Relu, IntervalCache::Relu { lower, upper }) => {
                check_grad_shape(grad_lower, lower.shape(), "relu")?;
                check_grad_shape(grad_upper, upper.shape(), "relu")?;
                Ok(want_input.then(|| (mask_positive(grad_lower, lower), mask_positive(grad_upper, upper))))
            }
            (
                Layer::MaxPool2d(p),
                IntervalCache::MaxPool {
                    input_shape,
                    arg_lower,
                    arg_upper,
                },
            ) => {
                let out = p.output_shape(input_shape).map_err(stale)?;
                check_grad_shape(grad_lower, &out, "maxpool2d")?;
                check_grad_shape(grad_upper, &out, "maxpool2d")?;
                Ok(want_input.then(|| {
                    (
                        pool::unpool(grad_lower.data(), arg_lower, input_shape),
                        pool::unpool(grad_upper.data(), arg_upper, input_shape),
                    )
                }))
            }
            (layer, _) => Err(BtnError::StaleCache(format!(
                "{} layer given an interval cache from a different layer kind",
                layer.kind()
            ))),
        }
    }

    pub fn weight_norms(&self) -> Result<WeightNorms<T>> {
        let (rows, data) = self.weight_rows()?;
        let row_len = data.len().checked_div(rows).unwrap_or(0);
        let mut l1_total = T::zero();
        let mut max_row_l1 = T::zero();
        let mut row_l2 = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * row_len..(r + 1) * row_len];
            let mut l1 = T::zero();
            let mut sq = T::zero();
            for &v in row {
                l1 = l1 + v.abs();
                sq = sq + v * v;
            }
            l1_total = l1_total + l1;
            if l1 > max_row_l1 {
                max_row_l1 = l1;
            }
            row_l2.push(sq.sqrt());
        }
        Ok(WeightNorms {
            l1_total,
            max_row_l1,
            row_l2: Tensor::vector(row_l2),
        })
    }

    /// Box around the clean affine output `A x + b` whose half-width at each
    /// output element is `eps * ||row||_2` for the row producing that element.
    /// Contains every output reachable from `||x' - x||_2 <= eps` (Cauchy-Schwarz;
    /// for padded conv borders the full-kernel norm only over-approximates).
    pub fn l2_ball_interval(&self, x: &Tensor<T>, eps: T) -> Result<IntervalTensor<T>> {
        let z = self.apply(x)?;
        let norms = self.weight_norms()?.row_l2;
        let plane = z.len() / norms.len().max(1);
        let radius = Tensor::new(
            z.shape().to_vec(),
            (0..z.len()).map(|i| eps * norms.data()[i / plane]).collect(),
        )?;
        IntervalTensor::from_center_radius(&z, &radius)
    }

    /// Parameter gradients of [`Layer::l2_ball_interval`] given gradients with
    /// respect to its lower and upper outputs. The input is not differentiated.
    pub(crate) fn l2_ball_interval_backward(
        &self,
        x: &Tensor<T>,
        eps: T,
        grad_lower: &Tensor<T>,
        grad_upper: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let gc = grad_lower.add(grad_upper)?;
        let gr = grad_upper.sub(grad_lower)?;
        match self {
            Layer::Dense(d) => {
                d.affine_backward(x.data(), gc.data(), Some(&mut *grads), false, false);
            }
            Layer::Conv2d(c) => {
                c.affine_backward(x, &gc, Some(&mut *grads), false, false)?;
            }
            other => return Err(BtnError::NonAffineLayer(other.kind())),
        }
        let (rows, data) = self.weight_rows()?;
        let row_len = data.len() / rows.max(1);
        let plane = gr.len() / rows.max(1);
        let norms = self.weight_norms()?.row_l2;
        let gw = grads[0].data_mut();
        for r in 0..rows {
            let n = norms.data()[r];
            if n == T::zero() {
                continue;
            }
            let mut s = T::zero();
            for &v in &gr.data()[r * plane..(r + 1) * plane] {
                s = s + v;
            }
            let coef = s * eps / n;
            for (g, &w) in gw[r * row_len..(r + 1) * row_len]
                .iter_mut()
                .zip(&data[r * row_len..(r + 1) * row_len])
            {
                *g = *g + coef * w;
            }
        }
        Ok(())
    }
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `g` where `x > 0`, else 0 (subgradient 0 at the kink).
fn mask_positive<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    g.zip_with(x, "relu mask", |g, v| if v > T::zero() { g } else { T::zero() })
        .expect("shapes checked")
}

fn recombine<T: Scalar>(c: &Tensor<T>, r: &Tensor<T>) -> IntervalTensor<T> {
    let lower = c.zip_with(r, "interval", |c, r| c - r).expect("same shape");
    let upper = c.zip_with(r, "interval", |c, r| c + r).expect("same shape");
    IntervalTensor::from_ordered(lower, upper)
}

fn check_grad_shape<T: Scalar>(g: &Tensor<T>, expected: &[usize], kind: &str) -> Result<()> {
    if g.shape() != expected {
        return Err(BtnError::StaleCache(format!(
            "{kind}: gradient shape {:?} does not match forward output {:?}",
            g.shape(),
            expected
        )));
    }
    Ok(())
}

fn stale(e: BtnError) -> BtnError {
    BtnError::StaleCache(e.to_string())
}

/// Rewrites the layer index of a shape error raised inside layer `index`.
pub(crate) fn at_layer(e: BtnError, index: usize) -> BtnError {
    match e {
        BtnError::LayerShape {
            kind,
            expected,
            actual,
            ..
        } => BtnError::LayerShape {
            index,
            kind,
            expected,
            actual,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests;
