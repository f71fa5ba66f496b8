//! Orientation-aware vector neuron networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` tensors, with
//!   finite-difference checking and an Adam optimizer.
//! * [`geometry`] and [`shapes`]: point clouds, XYZ files, kNN patches, O(3)
//!   transforms and mirror-symmetric synthetic shapes.
//! * [`symmetry`]: shell-vector / cross-vector planar symmetry detection and
//!   the origin-plane classifier built on it.
//! * [`layers`]: vector-neuron layers, the orientation-aware complex linear
//!   layer and cross-product attention.
//! * [`model`]: the segmentation network and its ablations, training,
//!   evaluation and the equivariance / ambiguity probes.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod model;
pub mod shapes;
pub mod symmetry;

pub use error::{Error, Result};
