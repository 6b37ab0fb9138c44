//! Progressive PHM (parameterized hypercomplex multiplication) compression of
//! dense linear layers.
//!
//! A dense `2n × 2m` weight is replaced by `Σ_b H_b ⊗ A_b` with fixed 2×2
//! bases `H_b` and learnable `n × m` cores `A_b`. The crate provides the
//! operator itself, dense-to-PHM projection, the residual fade-in training
//! objective, capacity allocation, and a small decoder-only transformer on
//! which the whole compression pipeline runs end to end.

pub mod allocator;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod phm;
pub mod projection;
pub mod schedule;
pub mod tensor_file;

pub use error::{PhmError, Result};
pub use linalg::{Matrix, SeededRng};
pub use phm::{BasisSet, PhmOperator, ResidualBlock};
