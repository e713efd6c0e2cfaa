//! Dense f64 kernels shared by every other module: matrices, seeded
//! randomness, softmax-family losses, and symmetric eigendecomposition.

pub mod eigen;
pub mod loss;
pub mod matrix;
pub mod rng;

pub use eigen::{sym_eigen, SymEigen};
pub use loss::{accuracy, argmax, cross_entropy, kl_divergence, log_softmax, softmax};
pub use matrix::{dot, norm, Matrix};
pub use rng::{gaussian_matrix, mix_seed, SeededRng};
