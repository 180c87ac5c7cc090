//! Real spherical harmonics, real Wigner-D matrices and tensor-product
//! change of basis.

mod cg;
mod sh;
mod wigner;

use thiserror::Error;

pub use cg::{cg_change_of_basis, CgBasis};
pub use sh::{real_sh, real_sh_into};
pub use wigner::{wigner_d_real, IrrepTable};

/// Highest harmonic order supported. Kernels between order-2 fields need 4.
pub const L_MAX: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    #[error("direction must be a unit vector, got norm {0}")]
    NotUnit(f64),
    #[error("order {0} exceeds the supported maximum {L_MAX}")]
    OrderTooHigh(usize),
    #[error("harmonic sample matrix for order {0} is ill-conditioned")]
    IllConditioned(usize),
    #[error("no isolated intertwiner for {l} x {j} -> {order}")]
    NoIntertwiner { l: usize, j: usize, order: usize },
}
