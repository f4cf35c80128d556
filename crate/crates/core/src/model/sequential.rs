use super::{Network, ParamEntry, ParamRole, ParameterSet};
use crate::error::{BtnError, Result};
use crate::layers::{at_layer, IntervalCache, Layer, LayerCache};
use crate::numerics::{IntervalTensor, Tensor};
use crate::scalar::Scalar;

/// A chain of layers with a declared input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub struct SeqTape<T> {
    caches: Vec<LayerCache<T>>,
}

#[derive(Clone, Debug)]
pub struct SeqIntervalTape<T> {
    /// Set when the first layer was bounded from an L2 ball around `x`.
    l2_origin: Option<(Tensor<T>, T)>,
    /// Caches for the layers propagated with interval rules, in order,
    /// starting at layer 0 (plain) or layer 1 (L2 origin).
    caches: Vec<IntervalCache<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| at_layer(e, i))?;
        }
        Ok(Sequential {
            input_shape,
            output_shape: shape,
            layers,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape.as_slice() {
            let kind = self.layers.first().map_or("input", |l| l.kind());
            return Err(BtnError::LayerShape {
                index: 0,
                kind,
                expected: self.input_shape.clone(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }

    pub(crate) fn param_entries(&self, prefix: &str) -> Vec<ParamEntry<T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, role) in layer.params().into_iter().zip([ParamRole::Weight, ParamRole::Bias]) {
                out.push(ParamEntry {
                    layer: format!("{prefix}layer{i}"),
                    role,
                    value: p.clone(),
                });
            }
        }
        out
    }
}

fn slot<'a, T>(grads: &'a mut Option<&mut [Tensor<T>]>, off: usize, n: usize) -> Option<&'a mut [Tensor<T>]> {
    grads.as_deref_mut().map(|g| &mut g[off..off + n])
}

impl<T: Scalar> Network<T> for Sequential<T> {
    type Tape = SeqTape<T>;
    type IntervalTape = SeqIntervalTape<T>;

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply(&cur).map_err(|e| at_layer(e, i))?;
        }
        Ok(cur)
    }

    fn forward_taped(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SeqTape<T>)> {
        self.check_input(x.shape())?;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&cur).map_err(|e| at_layer(e, i))?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, SeqTape { caches }))
    }

    fn backward(
        &self,
        tape: &SeqTape<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut [Tensor<T>]>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if tape.caches.len() != self.layers.len() {
            return Err(BtnError::StaleCache("tape length does not match layer count".into()));
        }
        let offsets = self.param_offsets();
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let need = i > 0 || want_input;
            let out = layer.backward_accumulate(
                &g,
                &tape.caches[i],
                slot(&mut grads, offsets[i], layer.param_count()),
                need,
            )?;
            match out {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    fn interval_forward(&self, iv: &IntervalTensor<T>) -> Result<IntervalTensor<T>> {
        self.check_input(iv.shape())?;
        let mut cur = iv.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.interval_forward(&cur).map_err(|e| at_layer(e, i))?;
        }
        Ok(cur)
    }

    fn interval_forward_taped(&self, iv: &IntervalTensor<T>) -> Result<(IntervalTensor<T>, SeqIntervalTape<T>)> {
        self.check_input(iv.shape())?;
        let mut cur = iv.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.interval_forward_cached(&cur).map_err(|e| at_layer(e, i))?;
            caches.push(cache);
            cur = next;
        }
        Ok((
            cur,
            SeqIntervalTape {
                l2_origin: None,
                caches,
            },
        ))
    }

    fn l2_interval_forward_taped(
        &self,
        x: &Tensor<T>,
        eps: T,
    ) -> Result<(IntervalTensor<T>, Vec<IntervalTensor<T>>, SeqIntervalTape<T>)> {
        self.check_input(x.shape())?;
        let first = match self.layers.first() {
            Some(l) if l.is_affine() => l,
            Some(l) => {
                return Err(BtnError::UnsupportedArchitecture(format!(
                    "L2 certification needs an affine first layer, found {}",
                    l.kind()
                )))
            }
            None => return Err(BtnError::UnsupportedArchitecture("empty network".into())),
        };
        let first_box = first.l2_ball_interval(x, eps)?;
        let mut cur = first_box.clone();
        let mut caches = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let (next, cache) = layer.interval_forward_cached(&cur).map_err(|e| at_layer(e, i))?;
            caches.push(cache);
            cur = next;
        }
        Ok((
            cur,
            vec![first_box],
            SeqIntervalTape {
                l2_origin: Some((x.clone(), eps)),
                caches,
            },
        ))
    }

    fn interval_backward(
        &self,
        tape: &SeqIntervalTape<T>,
        grad_lower: &Tensor<T>,
        grad_upper: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let start = usize::from(tape.l2_origin.is_some());
        if tape.caches.len() + start != self.layers.len() {
            return Err(BtnError::StaleCache("interval tape length does not match layer count".into()));
        }
        let offsets = self.param_offsets();
        let mut gl = grad_lower.clone();
        let mut gu = grad_upper.clone();
        for i in (start..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let slice = &mut grads[offsets[i]..offsets[i] + layer.param_count()];
            let need = i > start || tape.l2_origin.is_some();
            match layer.interval_backward(&gl, &gu, &tape.caches[i - start], Some(slice), need)? {
                Some((l, u)) => {
                    gl = l;
                    gu = u;
                }
                None => return Ok(()),
            }
        }
        if let Some((x, eps)) = &tape.l2_origin {
            let first = &self.layers[0];
            let slice = &mut grads[0..first.param_count()];
            first.l2_ball_interval_backward(x, *eps, &gl, &gu, slice)?;
        }
        Ok(())
    }

    fn lipschitz_linf(&self) -> Result<T> {
        let mut m = T::one();
        for layer in self.layers.iter().filter(|l| l.is_affine()) {
            m = m * layer.weight_norms()?.max_row_l1;
        }
        Ok(m)
    }

    fn affine_layers(&self) -> Vec<(&Layer<T>, bool)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_affine())
            .map(|(i, l)| (l, i == 0))
            .collect()
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn parameter_set(&self) -> ParameterSet<T> {
        ParameterSet {
            entries: self.param_entries(""),
        }
    }
}
