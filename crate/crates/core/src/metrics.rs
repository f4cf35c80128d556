//! Clean and certified counting metrics over a dataset split.
//!
//! Per image `i` with ground-truth count `C_i = sum(gt)` and certified
//! output box `[lo, hi]`:
//!
//! * clean deviation `|C_i - sum f(x_i)|`,
//! * certify-tight `t_i = max(|C_i - sum lo|, |sum hi - C_i|)`,
//! * certify-pixel `p_i = sum_j max(|hi_j - gt_j|, |gt_j - lo_j|)`, with
//!   squared form `q_i = sum_j max(...)^2`.
//!
//! MAE averages the per-image values; MSE is `sqrt(mean(t_i^2))` for the
//! clean and tight metrics and `sqrt(mean(q_i))` for the pixel metric.

use crate::bounds::{certify, NormKind, PerturbationSpec};
use crate::datagen::Sample;
use crate::error::{BtnError, Result};
use crate::model::Network;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub clean_mae: f64,
    pub clean_mse: f64,
    pub ct_mae: f64,
    pub ct_mse: f64,
    pub cp_mae: f64,
    pub cp_mse: f64,
    pub epsilon: f64,
    pub norm: NormKind,
}

/// Per-image evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub index: usize,
    pub gt_count: f64,
    pub pred_count: f64,
    pub count_lower: f64,
    pub count_upper: f64,
    pub tight_deviation: f64,
    pub pixel_deviation: f64,
    pub pixel_deviation_sq: f64,
    /// Width of the widest output pixel interval.
    pub max_pixel_width: f64,
    pub theorem1_bound: Option<f64>,
}

fn mae_mse(devs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mae = devs.clone().sum::<f64>() / nf;
    let mse = (devs.map(|d| d * d).sum::<f64>() / nf).sqrt();
    (mae, mse)
}

fn check_nonempty<T>(data: &[Sample<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(BtnError::Empty("evaluation dataset"));
    }
    Ok(())
}

/// `(mae, mse)` of clean count errors.
pub fn clean_metrics<T: Scalar, M: Network<T> + Sync + ?Sized>(m: &M, data: &[Sample<T>]) -> Result<(f64, f64)> {
    check_nonempty(data)?;
    let devs = crate::par::map_ordered(data, crate::par::worker_count(), |s| -> Result<f64> {
        let pred = m.forward(&s.image)?.sum();
        Ok((s.gt_count() - pred).abs().to_f64_lossy())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(mae_mse(devs.iter().copied(), devs.len()))
}

/// Evaluates one image under `spec`.
pub fn evaluate_image<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    s: &Sample<T>,
    spec: &PerturbationSpec<T>,
    index: usize,
) -> Result<ImageEval> {
    let pred = m.forward(&s.image)?.sum();
    let cert = certify(m, &s.image, spec)?;
    let gt = &s.gt_density;
    let (lo, hi) = (cert.output_interval.lower(), cert.output_interval.upper());
    gt.ensure_same_shape(lo, "evaluate")?;
    let c = s.gt_count();
    let tight = (c - cert.count_lower).abs().max((cert.count_upper - c).abs());
    let mut p = T::zero();
    let mut q = T::zero();
    let mut width = T::zero();
    for ((&g, &l), &u) in gt.data().iter().zip(lo.data()).zip(hi.data()) {
        let d = (u - g).abs().max((g - l).abs());
        p = p + d;
        q = q + d * d;
        width = width.max(u - l);
    }
    Ok(ImageEval {
        index,
        gt_count: c.to_f64_lossy(),
        pred_count: pred.to_f64_lossy(),
        count_lower: cert.count_lower.to_f64_lossy(),
        count_upper: cert.count_upper.to_f64_lossy(),
        tight_deviation: tight.to_f64_lossy(),
        pixel_deviation: p.to_f64_lossy(),
        pixel_deviation_sq: q.to_f64_lossy(),
        max_pixel_width: width.to_f64_lossy(),
        theorem1_bound: cert.theorem1_bound.map(|b| b.to_f64_lossy()),
    })
}

/// Aggregates per-image records into a report.
pub fn summarize(images: &[ImageEval], epsilon: f64, norm: NormKind) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(BtnError::Empty("evaluation dataset"));
    }
    let n = images.len();
    let (clean_mae, clean_mse) = mae_mse(images.iter().map(|e| (e.gt_count - e.pred_count).abs()), n);
    let (ct_mae, ct_mse) = mae_mse(images.iter().map(|e| e.tight_deviation), n);
    let cp_mae = images.iter().map(|e| e.pixel_deviation).sum::<f64>() / n as f64;
    let cp_mse = (images.iter().map(|e| e.pixel_deviation_sq).sum::<f64>() / n as f64).sqrt();
    Ok(EvalReport {
        n_images: n,
        clean_mae,
        clean_mse,
        ct_mae,
        ct_mse,
        cp_mae,
        cp_mse,
        epsilon,
        norm,
    })
}

/// Full clean + certified evaluation, images spread over `workers` threads.
pub fn evaluate_with_workers<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    data: &[Sample<T>],
    spec: &PerturbationSpec<T>,
    workers: usize,
) -> Result<(EvalReport, Vec<ImageEval>)> {
    check_nonempty(data)?;
    let indexed: Vec<(usize, &Sample<T>)> = data.iter().enumerate().collect();
    let images = crate::par::map_ordered(&indexed, workers, |&(i, s)| evaluate_image(m, s, spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&images, spec.epsilon.to_f64_lossy(), spec.norm)?;
    Ok((report, images))
}

pub fn evaluate<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    data: &[Sample<T>],
    spec: &PerturbationSpec<T>,
) -> Result<(EvalReport, Vec<ImageEval>)> {
    evaluate_with_workers(m, data, spec, crate::par::worker_count())
}

/// Certify-tight `(mae, mse)`.
pub fn certify_tight<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    data: &[Sample<T>],
    spec: &PerturbationSpec<T>,
) -> Result<(f64, f64)> {
    let (r, _) = evaluate(m, data, spec)?;
    Ok((r.ct_mae, r.ct_mse))
}

/// Certify-pixel `(mae, mse)`.
pub fn certify_pixel<T: Scalar, M: Network<T> + Sync + ?Sized>(
    m: &M,
    data: &[Sample<T>],
    spec: &PerturbationSpec<T>,
) -> Result<(f64, f64)> {
    let (r, _) = evaluate(m, data, spec)?;
    Ok((r.cp_mae, r.cp_mse))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gt: f64, pred: f64, lo: f64, hi: f64, p: f64, q: f64) -> ImageEval {
        ImageEval {
            index: 0,
            gt_count: gt,
            pred_count: pred,
            count_lower: lo,
            count_upper: hi,
            tight_deviation: (gt - lo).abs().max((hi - gt).abs()),
            pixel_deviation: p,
            pixel_deviation_sq: q,
            max_pixel_width: 0.0,
            theorem1_bound: None,
        }
    }

    #[test]
    fn clean_examples() {
        let r = summarize(&[rec(10.0, 8.0, 8.0, 8.0, 0.0, 0.0)], 0.0, NormKind::Linf).unwrap();
        assert_eq!((r.clean_mae, r.clean_mse), (2.0, 2.0));
        let r = summarize(
            &[rec(10.0, 7.0, 7.0, 7.0, 0.0, 0.0), rec(5.0, 9.0, 9.0, 9.0, 0.0, 0.0)],
            0.0,
            NormKind::Linf,
        )
        .unwrap();
        assert_eq!(r.clean_mae, 3.5);
        assert!((r.clean_mse - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tight_example() {
        let e = rec(10.0, 10.0, 7.0, 14.0, 0.0, 0.0);
        assert_eq!(e.tight_deviation, 4.0);
    }

    #[test]
    fn pixel_example() {
        let r = summarize(&[rec(0.0, 0.0, 0.0, 0.0, 0.8, 0.36 + 0.04)], 0.1, NormKind::Linf).unwrap();
        assert!((r.cp_mae - 0.8).abs() < 1e-15);
        assert!((r.cp_mse - 0.4f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_rejected() {
        assert!(summarize(&[], 0.0, NormKind::Linf).is_err());
    }
}
