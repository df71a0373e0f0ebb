//! Certified robustness radii from Gaussian moment propagation.
//!
//! An input perturbation `ε ~ N(0, σ²I)` is carried through a small network as
//! per-pixel means plus one channel covariance shared by every pixel of a
//! layer. The final logit moments give a closed-form certified radius, which
//! Monte Carlo randomized smoothing cross-checks by randomized smoothing.

pub mod certify;
pub mod cost;
pub mod data;
pub mod interval;
pub mod mc;
pub mod error;
pub mod moments;
pub mod network;
pub mod numkit;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use network::{FeatureMap, LayerSpec, NetworkSpec, Shape3};
pub use numkit::{Matrix, Vector};
