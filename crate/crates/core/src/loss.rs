//! The composite training objective: natural squared error, worst-case
//! certified error and weight-norm regularization, with exact gradients
//! through the interval passes.
//!
//! For a batch of `N` pairs the total is
//!
//! ```text
//! (1 / 2N) * sum_j [ kappa * nat_j + (1 - kappa) * cert_j + reg ]
//!   = (1 / 2N) * sum_j [ kappa * nat_j + (1 - kappa) * cert_j ] + reg / 2
//! ```
//!
//! so the regularizer enters with half its nominal coefficient.

use crate::bounds::{input_box, NormKind, PerturbationSpec};
use crate::error::{BtnError, Result};
use crate::model::Network;
use crate::numerics::Tensor;
use crate::scalar::{abs_subgradient, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub kappa: T,
    pub lambda_l1: T,
    /// First-layer row-norm coefficient, used only for the `L2` case.
    pub beta_l2: T,
    pub norm: NormKind,
    pub epsilon: T,
}

impl<T: Scalar> LossWeights<T> {
    /// `kappa = 1`, `lambda = 1e-3`, `beta = 10`, `L∞`, `eps = 0`.
    pub fn standard() -> Self {
        LossWeights {
            kappa: T::one(),
            lambda_l1: T::of(1e-3),
            beta_l2: T::of(10.0),
            norm: NormKind::Linf,
            epsilon: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: T| v.is_finite() && v >= T::zero();
        if !ok(self.kappa) || self.kappa > T::one() {
            return Err(BtnError::config("kappa", format!("must lie in [0, 1], got {}", self.kappa)));
        }
        if !ok(self.lambda_l1) {
            return Err(BtnError::config("lambda_l1", "must be finite and non-negative"));
        }
        if !ok(self.beta_l2) {
            return Err(BtnError::config("beta_l2", "must be finite and non-negative"));
        }
        if !ok(self.epsilon) {
            return Err(BtnError::config("epsilon", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Weighted contributions to the total: `total = natural + certify + reg`.
/// With `kappa = 1` the certified pass is skipped and `certify` is exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub natural: T,
    pub certify: T,
    pub reg: T,
    pub total: T,
}

/// `||pred - gt||^2`.
pub fn natural_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    pred.ensure_same_shape(gt, "natural_loss")?;
    Ok(pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p - g) * (p - g)).sum())
}

/// `sum_i max(|gt_i - lower_i|, |upper_i - gt_i|)^2`.
pub fn certify_error_loss<T: Scalar>(lower: &Tensor<T>, upper: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    Ok(certify_terms(lower, upper, gt)?.0)
}

/// Loss value and, per pixel, which bound is worst and its signed deviation.
fn certify_terms<T: Scalar>(lower: &Tensor<T>, upper: &Tensor<T>, gt: &Tensor<T>) -> Result<(T, Vec<(bool, T)>)> {
    lower.ensure_same_shape(upper, "certify_error_loss")?;
    lower.ensure_same_shape(gt, "certify_error_loss")?;
    let mut total = T::zero();
    let mut picks = Vec::with_capacity(gt.len());
    for (i, ((&l, &u), &g)) in lower.data().iter().zip(upper.data()).zip(gt.data()).enumerate() {
        if l > u {
            return Err(BtnError::IntervalOrder {
                index: i,
                lower: l.to_f64_lossy(),
                upper: u.to_f64_lossy(),
            });
        }
        let dl = l - g;
        let du = u - g;
        // Ties go to the upper bound.
        let pick = if du.abs() >= dl.abs() { (true, du) } else { (false, dl) };
        total = total + pick.1 * pick.1;
        picks.push(pick);
    }
    Ok((total, picks))
}

/// `L∞`: `lambda * sum |W|` over all affine layers. `L2`: `beta * sum_j
/// ||W_1j||_2` over the first-layer rows of every column plus `lambda *
/// sum |W|` over the remaining layers. Biases never enter.
pub fn reg_loss<T: Scalar, M: Network<T> + ?Sized>(m: &M, w: &LossWeights<T>) -> Result<T> {
    let mut total = T::zero();
    for (layer, first) in m.affine_layers() {
        let norms = layer.weight_norms()?;
        total = total
            + if first && w.norm == NormKind::L2 {
                w.beta_l2 * norms.row_l2.sum()
            } else {
                w.lambda_l1 * norms.l1_total
            };
    }
    Ok(total)
}

/// Adds `scale * d reg_loss / d theta` into `grads` (parameter order).
pub fn reg_loss_grad<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    w: &LossWeights<T>,
    scale: T,
    grads: &mut [Tensor<T>],
) -> Result<()> {
    // Every trainable layer is affine with a (weight, bias) pair.
    for (ai, (layer, first)) in m.affine_layers().into_iter().enumerate() {
        let (rows, wdata) = layer.weight_rows()?;
        let g = grads[2 * ai].data_mut();
        if first && w.norm == NormKind::L2 {
            let width = wdata.len() / rows;
            for r in 0..rows {
                let row = &wdata[r * width..(r + 1) * width];
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n > T::zero() {
                    let c = scale * w.beta_l2 / n;
                    for (gi, &v) in g[r * width..(r + 1) * width].iter_mut().zip(row) {
                        *gi = *gi + c * v;
                    }
                }
            }
        } else {
            let c = scale * w.lambda_l1;
            for (gi, &v) in g.iter_mut().zip(wdata) {
                *gi = *gi + c * abs_subgradient(v);
            }
        }
    }
    Ok(())
}

struct ItemResult<T> {
    natural: T,
    certify: T,
    grads: Vec<Tensor<T>>,
}

fn item_loss<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    x: &Tensor<T>,
    gt: &Tensor<T>,
    w: &LossWeights<T>,
    n: usize,
) -> Result<ItemResult<T>> {
    let mut grads = m.zero_grads();
    let inv_n = T::one() / T::of_usize(n);
    let half_inv_n = inv_n * T::half();

    let (pred, tape) = m.forward_taped(x)?;
    let nat = natural_loss(&pred, gt)?;
    if w.kappa > T::zero() {
        // d/dpred of kappa/(2N) * ||pred - gt||^2
        let c = w.kappa * inv_n;
        let g = pred.zip_with(gt, "natural grad", |p, t| c * (p - t))?;
        m.backward(&tape, &g, Some(&mut grads), false)?;
    }

    let mut cert = T::zero();
    let cw = T::one() - w.kappa;
    if cw > T::zero() {
        let (out, itape) = match w.norm {
            NormKind::Linf => m.interval_forward_taped(&input_box(x, &PerturbationSpec::linf(w.epsilon))?)?,
            NormKind::L2 => {
                let (o, _, t) = m.l2_interval_forward_taped(x, w.epsilon)?;
                (o, t)
            }
        };
        let (value, picks) = certify_terms(out.lower(), out.upper(), gt)?;
        cert = value;
        let c = cw * inv_n;
        let mut gl = Tensor::zeros(gt.shape());
        let mut gu = Tensor::zeros(gt.shape());
        for (i, &(upper, d)) in picks.iter().enumerate() {
            if upper {
                gu.data_mut()[i] = c * d;
            } else {
                gl.data_mut()[i] = c * d;
            }
        }
        m.interval_backward(&itape, &gl, &gu, &mut grads)?;
    }
    Ok(ItemResult {
        natural: w.kappa * half_inv_n * nat,
        certify: cw * half_inv_n * cert,
        grads,
    })
}

/// Batch objective and its gradient in parameter order.
pub fn total_loss<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    batch: &[(&Tensor<T>, &Tensor<T>)],
    w: &LossWeights<T>,
) -> Result<(LossBreakdown<T>, Vec<Tensor<T>>)> {
    total_loss_with_workers(m, batch, w, 1)
}

/// [`total_loss`] with batch items spread over up to `workers` threads.
/// Per-item results are reduced in batch order, so the output does not
/// depend on `workers`.
pub fn total_loss_with_workers<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    batch: &[(&Tensor<T>, &Tensor<T>)],
    w: &LossWeights<T>,
    workers: usize,
) -> Result<(LossBreakdown<T>, Vec<Tensor<T>>)> {
    w.validate()?;
    if batch.is_empty() {
        return Err(BtnError::Empty("batch"));
    }
    let n = batch.len();
    let items = crate::par::map_ordered(batch, workers, |(x, gt)| item_loss(m, x, gt, w, n));

    let mut grads = m.zero_grads();
    let mut natural = T::zero();
    let mut certify = T::zero();
    for item in items {
        let item = item?;
        natural = natural + item.natural;
        certify = certify + item.certify;
        for (g, gi) in grads.iter_mut().zip(&item.grads) {
            g.add_assign(gi)?;
        }
    }
    let reg = reg_loss(m, w)? * T::half();
    reg_loss_grad(m, w, T::half(), &mut grads)?;
    Ok((
        LossBreakdown {
            natural,
            certify,
            reg,
            total: natural + certify + reg,
        },
        grads,
    ))
}
