//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Sized for small fully-connected networks: element-wise ops, matrix
//! products, reductions, and softmax cross entropy. Forward values are
//! bitwise deterministic for identical inputs.

mod array;
mod tape;

pub use array::DenseArray;
pub use tape::{Gradients, NodeId, ParamNode, Tape};
