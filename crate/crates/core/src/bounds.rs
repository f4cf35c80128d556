//! Perturbation sets and whole-model certification.

use crate::error::{BtnError, Result};
use crate::model::Network;
use crate::numerics::{IntervalTensor, Tensor};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Linf,
    L2,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = BtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "inf" => Ok(NormKind::Linf),
            "l2" => Ok(NormKind::L2),
            _ => Err(BtnError::config("norm", format!("unknown norm {s:?}, expected linf or l2"))),
        }
    }
}

/// The adversary's budget: an `L∞` box or an `L2` ball of radius `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec<T> {
    pub norm: NormKind,
    pub epsilon: T,
    /// Intersect the `L∞` box with `[0, 1]`. Off by default.
    pub clamp_to_unit: bool,
}

impl<T: Scalar> PerturbationSpec<T> {
    pub fn linf(epsilon: T) -> Self {
        PerturbationSpec {
            norm: NormKind::Linf,
            epsilon,
            clamp_to_unit: false,
        }
    }

    pub fn l2(epsilon: T) -> Self {
        PerturbationSpec {
            norm: NormKind::L2,
            epsilon,
            clamp_to_unit: false,
        }
    }

    pub fn new(norm: NormKind, epsilon: T) -> Self {
        PerturbationSpec {
            norm,
            epsilon,
            clamp_to_unit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= T::zero()) || !self.epsilon.is_finite() {
            return Err(BtnError::InvalidPerturbation(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.clamp_to_unit && self.norm == NormKind::L2 {
            return Err(BtnError::InvalidPerturbation(
                "clamp_to_unit is only defined for the linf box".into(),
            ));
        }
        Ok(())
    }
}

/// Certified output box plus its count-level summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CertResult<T> {
    pub output_interval: IntervalTensor<T>,
    pub count_lower: T,
    pub count_upper: T,
    /// `epsilon * M` from the weight-norm product (`L∞` only).
    pub theorem1_bound: Option<T>,
    /// First-layer boxes of each column under an `L2` ball.
    pub lemma1_first_layer: Option<Vec<IntervalTensor<T>>>,
}

impl<T: Scalar> CertResult<T> {
    fn from_interval(
        output_interval: IntervalTensor<T>,
        theorem1_bound: Option<T>,
        lemma1_first_layer: Option<Vec<IntervalTensor<T>>>,
    ) -> Self {
        CertResult {
            count_lower: output_interval.lower().sum(),
            count_upper: output_interval.upper().sum(),
            output_interval,
            theorem1_bound,
            lemma1_first_layer,
        }
    }
}

/// `[x - eps, x + eps]`, optionally intersected with `[0, 1]`.
pub fn input_box<T: Scalar>(x: &Tensor<T>, spec: &PerturbationSpec<T>) -> Result<IntervalTensor<T>> {
    spec.validate()?;
    if spec.norm != NormKind::Linf {
        return Err(BtnError::InvalidPerturbation(
            "input_box builds L∞ boxes only; use certify_l2 for L2 balls".into(),
        ));
    }
    let eps = spec.epsilon;
    let (lo, hi) = if spec.clamp_to_unit {
        (T::zero(), T::one())
    } else {
        (T::neg_infinity(), T::infinity())
    };
    let lower = x.map(|v| (v - eps).max(lo).min(hi));
    let upper = x.map(|v| (v + eps).min(hi).max(lo));
    IntervalTensor::new(lower, upper)
}

pub fn certify_linf<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    x: &Tensor<T>,
    spec: &PerturbationSpec<T>,
) -> Result<CertResult<T>> {
    let bx = input_box(x, spec)?;
    let out = m.interval_forward(&bx)?;
    let bound = norm_duality_bound(m, spec.epsilon)?;
    Ok(CertResult::from_interval(out, Some(bound), None))
}

/// First affine layer of each column bounded by `z1 ± eps * ||row||_2`,
/// interval propagation afterwards.
pub fn certify_l2<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    x: &Tensor<T>,
    spec: &PerturbationSpec<T>,
) -> Result<CertResult<T>> {
    spec.validate()?;
    if spec.norm != NormKind::L2 {
        return Err(BtnError::InvalidPerturbation("certify_l2 needs an L2 spec".into()));
    }
    let (out, first) = m.l2_interval_forward(x, spec.epsilon)?;
    Ok(CertResult::from_interval(out, None, Some(first)))
}

pub fn certify<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    x: &Tensor<T>,
    spec: &PerturbationSpec<T>,
) -> Result<CertResult<T>> {
    match spec.norm {
        NormKind::Linf => certify_linf(m, x, spec),
        NormKind::L2 => certify_l2(m, x, spec),
    }
}

/// `eps1 * M`: a global bound on `||f(x') - f(x)||_∞` over the `L∞` ball.
pub fn norm_duality_bound<T: Scalar, M: Network<T> + ?Sized>(m: &M, eps1: T) -> Result<T> {
    if !(eps1 >= T::zero()) {
        return Err(BtnError::InvalidPerturbation(format!("epsilon must be non-negative, got {eps1}")));
    }
    if eps1 == T::zero() {
        return Ok(T::zero());
    }
    Ok(eps1 * m.lipschitz_linf()?)
}
