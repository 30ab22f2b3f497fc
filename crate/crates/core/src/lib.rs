//! Orientation and in-plane shift estimation for tomographic projection
//! images from common-line geometry.
//!
//! The crate is organized along the processing chain:
//!
//! * [`simdata`]: Gaussian-blob phantoms, ray-driven projection, shifts and
//!   noise, plus the binary stack/volume file formats.
//! * [`polarfft`]: polar Fourier rays of every projection, phase correction
//!   for in-plane shifts, ray extraction.
//! * [`commonline`]: common-line detection by normalized cross-correlation,
//!   the geometric oracle, and dihedral-angle voting.
//! * [`poseopt`]: the robust ℓ1 joint embedding of viewing directions and
//!   in-plane axes (initialization, alignment, projected coordinate descent).
//! * [`shiftfix`]: iterative common-line-consistent shift refinement on a
//!   sparse least-squares system.
//! * [`eval`]: global alignment, error metrics, FSC and a gridding
//!   reconstructor.
//! * [`pipeline`]: configuration and the staged batch driver used by the CLI.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Pairwise loops index symmetric tables with both `(i, j)` and `(j, i)`.
#![allow(clippy::needless_range_loop)]

pub mod commonline;
pub mod error;
pub mod eval;
mod fourier;
pub mod pipeline;
pub mod polarfft;
pub mod poseopt;
pub mod shiftfix;
pub mod simdata;

pub use error::{Error, Result};
