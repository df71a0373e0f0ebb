//! Small dense linear algebra, special functions and seeded randomness.

mod binom;
mod eigen;
mod matrix;
mod rng;
mod special;

pub use binom::{binom_lower_confidence, binom_upper_tail};
pub use eigen::{log_det_sym, min_eigenvalue_sym, sym_eigen, SymEigen};
pub use matrix::{dot, matmul, matmul_nt, matmul_tn, matvec, matvec_t, Matrix, Vector};
pub use rng::{seeded_rng, NormalStream};
pub use special::{erf, erfc, std_normal_cdf, std_normal_cdf_inv, std_normal_pdf, std_normal_sf};
