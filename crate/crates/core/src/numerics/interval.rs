use super::Tensor;
use crate::error::{BtnError, Result};
use crate::scalar::Scalar;

/// Elementwise box `[lower, upper]` over a tensor shape.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor<T> {
    lower: Tensor<T>,
    upper: Tensor<T>,
}

impl<T: Scalar> IntervalTensor<T> {
    /// Checked constructor: shapes must agree and `lower <= upper` everywhere.
    pub fn new(lower: Tensor<T>, upper: Tensor<T>) -> Result<Self> {
        lower.ensure_same_shape(&upper, "interval")?;
        for (index, (&l, &u)) in lower.data().iter().zip(upper.data()).enumerate() {
            if !(l <= u) {
                return Err(BtnError::IntervalOrder {
                    index,
                    lower: l.to_f64_lossy(),
                    upper: u.to_f64_lossy(),
                });
            }
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Constructor for bounds produced by a propagation rule that preserves
    /// ordering by construction. Checked in debug builds only.
    pub(crate) fn from_ordered(lower: Tensor<T>, upper: Tensor<T>) -> Self {
        debug_assert_eq!(lower.shape(), upper.shape());
        debug_assert!(
            lower.data().iter().zip(upper.data()).all(|(l, u)| l <= u),
            "interval propagation produced lower > upper"
        );
        IntervalTensor { lower, upper }
    }

    /// Degenerate interval `[x, x]`.
    pub fn point(x: &Tensor<T>) -> Self {
        IntervalTensor {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// `[center - radius, center + radius]`; radius must be non-negative.
    pub fn from_center_radius(center: &Tensor<T>, radius: &Tensor<T>) -> Result<Self> {
        center.ensure_same_shape(radius, "from_center_radius")?;
        if let Some(index) = radius.data().iter().position(|&r| !(r >= T::zero())) {
            return Err(BtnError::IntervalOrder {
                index,
                lower: 0.0,
                upper: radius.data()[index].to_f64_lossy(),
            });
        }
        let lower = center.zip_with(radius, "interval", |c, r| c - r)?;
        let upper = center.zip_with(radius, "interval", |c, r| c + r)?;
        Ok(IntervalTensor { lower, upper })
    }

    pub fn lower(&self) -> &Tensor<T> {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor<T> {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.lower, self.upper)
    }

    /// `((lower + upper) / 2, (upper - lower) / 2)`.
    pub fn center_radius(&self) -> (Tensor<T>, Tensor<T>) {
        let h = T::half();
        let center = self.lower.zip_with(&self.upper, "center", |l, u| (l + u) * h);
        let radius = self.lower.zip_with(&self.upper, "radius", |l, u| (u - l) * h);
        (center.expect("same shape"), radius.expect("same shape"))
    }

    pub fn widths(&self) -> Tensor<T> {
        self.upper.sub(&self.lower).expect("same shape")
    }

    /// True iff `lower - tol <= x <= upper + tol` elementwise.
    pub fn contains(&self, x: &Tensor<T>, tol: T) -> Result<bool> {
        self.lower.ensure_same_shape(x, "contains")?;
        Ok(self
            .lower
            .data()
            .iter()
            .zip(self.upper.data())
            .zip(x.data())
            .all(|((&l, &u), &v)| l - tol <= v && v <= u + tol))
    }

    /// True iff `other` lies inside `self` (up to `tol`).
    pub fn encloses(&self, other: &Self, tol: T) -> Result<bool> {
        Ok(self.contains(&other.lower, tol)? && self.contains(&other.upper, tol)?)
    }

    pub fn concat_leading(parts: &[&Self]) -> Result<Self> {
        let lowers: Vec<&Tensor<T>> = parts.iter().map(|p| &p.lower).collect();
        let uppers: Vec<&Tensor<T>> = parts.iter().map(|p| &p.upper).collect();
        Ok(IntervalTensor {
            lower: Tensor::concat_leading(&lowers)?,
            upper: Tensor::concat_leading(&uppers)?,
        })
    }
}
