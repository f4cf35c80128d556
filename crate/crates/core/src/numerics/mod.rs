//! Dense tensors, interval tensors and their binary encoding.

mod interval;
pub mod io;
mod tensor;

pub use interval::IntervalTensor;
pub use io::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor};
pub use tensor::Tensor;
