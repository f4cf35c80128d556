use super::sequential::{SeqIntervalTape, SeqTape};
use super::{Network, ParamEntry, ParamRole, ParameterSet, Sequential};
use crate::error::{BtnError, Result};
use crate::layers::{Conv2dLayer, IntervalCache, Layer, LayerCache, MaxPool2dLayer};
use crate::numerics::{IntervalTensor, Tensor};
use crate::rng::{CounterRng, Stream};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Several parallel columns over the same input, channel-concatenated in
/// column order and fused by a 1x1 convolution to a single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiColumnModel<T> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    columns: Vec<Sequential<T>>,
    column_channels: Vec<usize>,
    fusion: Layer<T>,
}

#[derive(Clone, Debug)]
pub struct McTape<T> {
    columns: Vec<SeqTape<T>>,
    fusion: LayerCache<T>,
}

#[derive(Clone, Debug)]
pub struct McIntervalTape<T> {
    columns: Vec<SeqIntervalTape<T>>,
    fusion: IntervalCache<T>,
}

impl<T: Scalar> MultiColumnModel<T> {
    pub fn new(input_shape: Vec<usize>, columns: Vec<Sequential<T>>, fusion: Conv2dLayer<T>) -> Result<Self> {
        if columns.is_empty() {
            return Err(BtnError::Geometry("model needs at least one column".into()));
        }
        let ks = fusion.kernel().shape();
        if ks[0] != 1 || ks[2] != 1 || ks[3] != 1 || fusion.stride() != (1, 1) || fusion.padding() != (0, 0) {
            return Err(BtnError::Geometry(format!(
                "fusion must be a 1x1, stride-1, unpadded conv to one channel; kernel is {ks:?}"
            )));
        }
        let mut column_channels = Vec::with_capacity(columns.len());
        let mut spatial: Option<Vec<usize>> = None;
        for (c, col) in columns.iter().enumerate() {
            if col.input_shape() != input_shape.as_slice() {
                return Err(BtnError::Geometry(format!(
                    "column {c} expects input {:?}, model input is {input_shape:?}",
                    col.input_shape()
                )));
            }
            let out = col.output_shape();
            if out.len() != 3 {
                return Err(BtnError::Geometry(format!("column {c} output {out:?} is not [ch, h, w]")));
            }
            match &spatial {
                Some(s) if s.as_slice() != &out[1..] => {
                    return Err(BtnError::Geometry(format!(
                        "column {c} output spatial extents {:?} differ from {s:?}",
                        &out[1..]
                    )))
                }
                None => spatial = Some(out[1..].to_vec()),
                _ => {}
            }
            column_channels.push(out[0]);
        }
        let total: usize = column_channels.iter().sum();
        if fusion.in_channels() != total {
            return Err(BtnError::Geometry(format!(
                "fusion expects {} input channels, columns provide {total}",
                fusion.in_channels()
            )));
        }
        let s = spatial.expect("at least one column");
        Ok(MultiColumnModel {
            input_shape,
            output_shape: vec![1, s[0], s[1]],
            columns,
            column_channels,
            fusion: Layer::Conv2d(fusion),
        })
    }

    pub fn columns(&self) -> &[Sequential<T>] {
        &self.columns
    }

    pub fn fusion(&self) -> &Layer<T> {
        &self.fusion
    }

    fn fusion_weights(&self) -> &[T] {
        self.fusion.weight_rows().expect("fusion is affine").1
    }

    fn column_param_counts(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.layers().iter().map(|l| l.param_count()).sum()).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape.as_slice() {
            return Err(BtnError::LayerShape {
                index: 0,
                kind: "model input",
                expected: self.input_shape.clone(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }
}

impl<T: Scalar> Network<T> for MultiColumnModel<T> {
    type Tape = McTape<T>;
    type IntervalTape = McIntervalTape<T>;

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let outs = self.columns.iter().map(|c| c.forward(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        self.fusion.apply(&Tensor::concat_leading(&refs)?)
    }

    fn forward_taped(&self, x: &Tensor<T>) -> Result<(Tensor<T>, McTape<T>)> {
        self.check_input(x.shape())?;
        let mut outs = Vec::with_capacity(self.columns.len());
        let mut tapes = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let (y, tape) = col.forward_taped(x)?;
            outs.push(y);
            tapes.push(tape);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let (y, fusion) = self.fusion.forward(&Tensor::concat_leading(&refs)?)?;
        Ok((y, McTape { columns: tapes, fusion }))
    }

    fn backward(
        &self,
        tape: &McTape<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut [Tensor<T>]>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let counts = self.column_param_counts();
        let fusion_off: usize = counts.iter().sum();
        let g_cat = self
            .fusion
            .backward_accumulate(
                grad_out,
                &tape.fusion,
                grads.as_deref_mut().map(|g| &mut g[fusion_off..fusion_off + 2]),
                true,
            )?
            .expect("input gradient requested");
        let parts = g_cat.split_leading(&self.column_channels)?;
        let mut gx: Option<Tensor<T>> = None;
        let mut off = 0;
        for (c, col) in self.columns.iter().enumerate() {
            let slice = grads.as_deref_mut().map(|g| &mut g[off..off + counts[c]]);
            if let Some(g) = col.backward(&tape.columns[c], &parts[c], slice, want_input)? {
                match gx.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => gx = Some(g),
                }
            }
            off += counts[c];
        }
        Ok(gx)
    }

    fn interval_forward(&self, iv: &IntervalTensor<T>) -> Result<IntervalTensor<T>> {
        self.check_input(iv.shape())?;
        let outs = self
            .columns
            .iter()
            .map(|c| c.interval_forward(iv))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&IntervalTensor<T>> = outs.iter().collect();
        self.fusion.interval_forward(&IntervalTensor::concat_leading(&refs)?)
    }

    fn interval_forward_taped(&self, iv: &IntervalTensor<T>) -> Result<(IntervalTensor<T>, McIntervalTape<T>)> {
        self.check_input(iv.shape())?;
        let mut outs = Vec::with_capacity(self.columns.len());
        let mut tapes = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let (o, t) = col.interval_forward_taped(iv)?;
            outs.push(o);
            tapes.push(t);
        }
        let refs: Vec<&IntervalTensor<T>> = outs.iter().collect();
        let (out, fusion) = self
            .fusion
            .interval_forward_cached(&IntervalTensor::concat_leading(&refs)?)?;
        Ok((out, McIntervalTape { columns: tapes, fusion }))
    }

    fn l2_interval_forward_taped(
        &self,
        x: &Tensor<T>,
        eps: T,
    ) -> Result<(IntervalTensor<T>, Vec<IntervalTensor<T>>, McIntervalTape<T>)> {
        self.check_input(x.shape())?;
        let mut outs = Vec::with_capacity(self.columns.len());
        let mut firsts = Vec::with_capacity(self.columns.len());
        let mut tapes = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let (o, mut f, t) = col.l2_interval_forward_taped(x, eps)?;
            outs.push(o);
            firsts.append(&mut f);
            tapes.push(t);
        }
        let refs: Vec<&IntervalTensor<T>> = outs.iter().collect();
        let (out, fusion) = self
            .fusion
            .interval_forward_cached(&IntervalTensor::concat_leading(&refs)?)?;
        Ok((out, firsts, McIntervalTape { columns: tapes, fusion }))
    }

    fn interval_backward(
        &self,
        tape: &McIntervalTape<T>,
        grad_lower: &Tensor<T>,
        grad_upper: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let counts = self.column_param_counts();
        let fusion_off: usize = counts.iter().sum();
        let (gl, gu) = self
            .fusion
            .interval_backward(
                grad_lower,
                grad_upper,
                &tape.fusion,
                Some(&mut grads[fusion_off..fusion_off + 2]),
                true,
            )?
            .expect("input gradient requested");
        let gls = gl.split_leading(&self.column_channels)?;
        let gus = gu.split_leading(&self.column_channels)?;
        let mut off = 0;
        for (c, col) in self.columns.iter().enumerate() {
            col.interval_backward(&tape.columns[c], &gls[c], &gus[c], &mut grads[off..off + counts[c]])?;
            off += counts[c];
        }
        Ok(())
    }

    /// Per-column products `P_c` combine through the fusion rows as
    /// `max_j sum_c ||fusion row j restricted to column c||_1 * P_c`.
    fn lipschitz_linf(&self) -> Result<T> {
        let w = self.fusion_weights();
        let mut acc = T::zero();
        let mut k = 0;
        for (col, &ch) in self.columns.iter().zip(&self.column_channels) {
            let block: T = w[k..k + ch].iter().map(|v| v.abs()).sum();
            acc = acc + block * col.lipschitz_linf()?;
            k += ch;
        }
        Ok(acc)
    }

    fn affine_layers(&self) -> Vec<(&Layer<T>, bool)> {
        let mut out: Vec<(&Layer<T>, bool)> = self.columns.iter().flat_map(|c| c.affine_layers()).collect();
        out.push((&self.fusion, false));
        out
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.columns.iter().flat_map(|c| c.parameters()).collect();
        out.extend(self.fusion.params());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.columns.iter_mut().flat_map(|c| c.parameters_mut()).collect();
        out.extend(self.fusion.params_mut());
        out
    }

    fn parameter_set(&self) -> ParameterSet<T> {
        let mut entries: Vec<ParamEntry<T>> = Vec::new();
        for (c, col) in self.columns.iter().enumerate() {
            entries.extend(col.param_entries(&format!("col{c}.")));
        }
        for (p, role) in self.fusion.params().into_iter().zip([ParamRole::Weight, ParamRole::Bias]) {
            entries.push(ParamEntry {
                layer: "fusion".into(),
                role,
                value: p.clone(),
            });
        }
        ParameterSet { entries }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnConfig {
    /// Odd kernel size of each conv stage.
    pub kernels: Vec<usize>,
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
}

/// Micro multi-column geometry. Each column is
/// `conv-relu-pool, conv-relu-pool, conv-relu, ...` with "same" zero padding,
/// so the output is a single-channel map at a quarter of the input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub columns: Vec<ColumnConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: [1, 64, 64],
            columns: vec![
                ColumnConfig {
                    kernels: vec![7, 5, 5],
                    channels: vec![2, 4, 2],
                },
                ColumnConfig {
                    kernels: vec![5, 3, 3],
                    channels: vec![3, 6, 3],
                },
                ColumnConfig {
                    kernels: vec![3, 3, 3],
                    channels: vec![4, 8, 4],
                },
            ],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 {
            return Err(BtnError::config("model.input_shape", "channel count must be positive"));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(BtnError::Geometry(format!(
                "input {h}x{w} must be non-empty and divisible by 4 (two 2x2 pools)"
            )));
        }
        if self.columns.is_empty() {
            return Err(BtnError::config("model.columns", "at least one column required"));
        }
        for (i, col) in self.columns.iter().enumerate() {
            if col.kernels.len() != col.channels.len() || col.kernels.len() < 2 {
                return Err(BtnError::config(
                    format!("model.columns[{i}]"),
                    "kernels and channels need equal length of at least 2",
                ));
            }
            if col.channels.contains(&0) {
                return Err(BtnError::config(format!("model.columns[{i}].channels"), "must be positive"));
            }
            let (mut sh, mut sw) = (h, w);
            for (stage, &k) in col.kernels.iter().enumerate() {
                if k % 2 == 0 {
                    return Err(BtnError::Geometry(format!(
                        "column {i} stage {stage}: kernel {k} must be odd for same padding"
                    )));
                }
                if k > sh || k > sw {
                    return Err(BtnError::Geometry(format!(
                        "column {i} stage {stage}: kernel {k} exceeds {sh}x{sw} feature map"
                    )));
                }
                if stage < 2 {
                    sh /= 2;
                    sw /= 2;
                }
            }
        }
        Ok(())
    }
}

/// Builds the micro multi-column model with seeded uniform initialization
/// `U(-s, s)`, `s = sqrt(1 / fan_in)`, drawn in parameter order from the
/// init stream; biases start at zero.
pub fn build_mcnn_micro<T: Scalar>(cfg: &ModelConfig) -> Result<MultiColumnModel<T>> {
    cfg.validate()?;
    let mut rng = CounterRng::new(cfg.seed, Stream::Init);
    let input_shape = cfg.input_shape.to_vec();
    let mut columns = Vec::with_capacity(cfg.columns.len());
    for col in &cfg.columns {
        let mut layers = Vec::new();
        let mut in_ch = cfg.input_shape[0];
        for (stage, (&k, &out_ch)) in col.kernels.iter().zip(&col.channels).enumerate() {
            layers.push(Layer::Conv2d(init_conv(&mut rng, out_ch, in_ch, k)?));
            layers.push(Layer::Relu);
            if stage < 2 {
                layers.push(Layer::MaxPool2d(MaxPool2dLayer::new((2, 2), (2, 2))?));
            }
            in_ch = out_ch;
        }
        columns.push(Sequential::new(input_shape.clone(), layers)?);
    }
    let fused: usize = cfg.columns.iter().map(|c| *c.channels.last().expect("validated")).sum();
    let fusion = init_conv(&mut rng, 1, fused, 1)?;
    MultiColumnModel::new(input_shape, columns, fusion)
}

fn init_conv<T: Scalar>(rng: &mut CounterRng, out_ch: usize, in_ch: usize, k: usize) -> Result<Conv2dLayer<T>> {
    let fan_in = in_ch * k * k;
    let s = (1.0 / fan_in as f64).sqrt();
    let n = out_ch * fan_in;
    let kernel = Tensor::new(
        vec![out_ch, in_ch, k, k],
        (0..n).map(|_| T::of(rng.uniform(-s, s))).collect(),
    )?;
    Conv2dLayer::new(kernel, Tensor::zeros(&[out_ch]), (1, 1), (k / 2, k / 2))
}
