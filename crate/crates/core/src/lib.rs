//! Sparse external-memory layers for small transformers: partial experts,
//! lookup functions (token id, softmax router, hyperplane and spherical LSH,
//! min-hash), Alternating Updates, and the Monte Carlo and training
//! harnesses used to study them.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod altup;
pub mod error;
pub mod experiments;
pub mod lsh_sim;
pub mod memory_lookup;
pub mod tensor_nn;

pub use error::{Error, Result};
pub use tensor_nn::Tensor;
