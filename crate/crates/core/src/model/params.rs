use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    /// Stable layer identifier, e.g. `col1.layer3` or `fusion`.
    pub layer: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// Flattened model parameters in a fixed order: columns in declaration
/// order, layers in sequence, weight before bias, fusion last.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T> ParameterSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|e| &e.value)
    }
}
