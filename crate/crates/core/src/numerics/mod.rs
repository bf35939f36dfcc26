//! Dense `f64` linear algebra: products, Jacobi eigen/singular value
//! decompositions, truncation and effective rank.

mod eig;
mod matrix;
mod qr;
mod svd;

pub use eig::{sym_eig, SYMMETRY_TOL};
pub use matrix::Matrix;
pub use qr::qr_r;
pub use svd::{effective_rank, svd, truncate, SvdResult};
