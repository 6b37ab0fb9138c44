//! Deterministic dense linear algebra and randomness.

mod lstsq;
mod matrix;
mod rng;

pub use lstsq::{lstsq, pinv, PivotedQr};
pub use matrix::{frobenius, gemm, kron2, matmul, matmul_nt, matmul_tn, MatMut, MatRef, Matrix};
pub use rng::SeededRng;
