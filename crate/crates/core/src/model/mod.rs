//! Whole-network composition: sequential chains and the multi-column
//! density-map model, behind a common [`Network`] trait.

mod mcnn;
mod params;
mod sequential;

pub use mcnn::{build_mcnn_micro, ColumnConfig, ModelConfig, MultiColumnModel};
pub use params::{ParamEntry, ParamRole, ParameterSet};
pub use sequential::Sequential;

use crate::error::Result;
use crate::layers::Layer;
use crate::numerics::{IntervalTensor, Tensor};
use crate::scalar::Scalar;

/// Everything certification, attacks and training need from a model.
///
/// Parameter-gradient buffers passed to the `*_backward` methods are laid
/// out in [`Network::parameters`] order and are accumulated into, never
/// overwritten.
pub trait Network<T: Scalar> {
    /// Forward record for [`Network::backward`].
    type Tape;
    /// Interval-pass record for [`Network::interval_backward`]; also covers
    /// the L2 first-layer pass.
    type IntervalTape;

    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn forward_taped(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Tape)>;
    fn backward(
        &self,
        tape: &Self::Tape,
        grad_out: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>>;

    fn interval_forward(&self, iv: &IntervalTensor<T>) -> Result<IntervalTensor<T>>;
    fn interval_forward_taped(&self, iv: &IntervalTensor<T>) -> Result<(IntervalTensor<T>, Self::IntervalTape)>;

    /// Output box for the L2 ball of radius `eps` around `x`: each column's
    /// first affine layer is bounded by `eps * ||row||_2`, later layers use
    /// interval propagation. Also returns the first-layer boxes.
    fn l2_interval_forward_taped(
        &self,
        x: &Tensor<T>,
        eps: T,
    ) -> Result<(IntervalTensor<T>, Vec<IntervalTensor<T>>, Self::IntervalTape)>;

    /// Parameter gradients through either interval pass.
    fn interval_backward(
        &self,
        tape: &Self::IntervalTape,
        grad_lower: &Tensor<T>,
        grad_upper: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()>;

    /// Global multiplier `M` with `||f(x') - f(x)||_inf <= M * ||x' - x||_inf`
    /// from products of max-row L1 norms (ReLU and max pooling count as 1).
    fn lipschitz_linf(&self) -> Result<T>;

    /// Affine layers in parameter order, flagged when the layer is the first
    /// layer of its column (the layer an L2 input ball enters directly).
    fn affine_layers(&self) -> Vec<(&Layer<T>, bool)>;

    fn parameters(&self) -> Vec<&Tensor<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn parameter_set(&self) -> ParameterSet<T>;

    fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn l2_interval_forward(&self, x: &Tensor<T>, eps: T) -> Result<(IntervalTensor<T>, Vec<IntervalTensor<T>>)> {
        let (out, first, _) = self.l2_interval_forward_taped(x, eps)?;
        Ok((out, first))
    }

    /// Gradient of `sum(grad_out * f(x))` with respect to `x`.
    fn input_gradient(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, tape) = self.forward_taped(x)?;
        Ok(self
            .backward(&tape, grad_out, None, true)?
            .expect("input gradient requested"))
    }

    fn flat_parameters(&self) -> Vec<T> {
        self.parameters().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in parameter order.
    fn load_flat_parameters(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Sum of a density map. Negative pixels are kept as is.
pub fn predicted_count<T: Scalar>(density: &Tensor<T>) -> T {
    density.sum()
}
