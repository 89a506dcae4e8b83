//! Dense real/complex linear algebra and seeded random streams.

mod matrix;
mod qr;
mod rng;
mod svd;

pub use matrix::{axpy, dot, matvec_into, norm2, CMatrix, Matrix};
pub use qr::qr_thin;
pub use rng::{sample_normal, RngStream};
pub use svd::{singular_values, svd_trunc, TruncatedSvd};
