//! Synthetic ground truth: phantoms, projections at known poses, known
//! in-plane shifts and additive white Gaussian noise.

mod image;
pub mod io;
mod phantom;
mod projector;
mod rotation;
mod stack;

pub use image::{apply_shift, Image};
pub use phantom::{make_phantom, GaussianBlob, GaussianBlobPhantom, Volume};
pub use projector::{project, project_analytic};
pub use rotation::{random_rotations, Rotation};
pub use stack::{add_noise, random_shifts, simulate_stack, ProjectionStack};
