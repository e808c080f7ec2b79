//! Sparse voxel perception building blocks: feature extractors, sparse
//! down-sampling layers, global spatial aggregation over a bird's-eye view, an
//! 8-bit Adam optimizer, and the desk-scale experiment harness around them.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod effioptim;
pub mod error;
pub mod extract;
pub mod gsa;
pub mod harness;
pub mod nn;
pub mod sparse_conv;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Coord, DenseTensor, Extent, Scalar, SparseVoxelTensor, Value};
