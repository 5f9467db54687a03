//! Unsupervised out-of-distribution detection from learned non-linear
//! invariants.
//!
//! A volume-preserving network maps training features to a representation
//! whose first `K` coordinates are nearly constant on the data. The squared
//! size of those coordinates, normalized per coordinate, is the invariant
//! score; a nearest-neighbour score complements it.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod invariant;
pub mod knn;
pub mod linalg;
pub mod optim;
pub mod vpn;

pub use data::FeatureMatrix;
pub use detector::{DetectorConfig, InvariantDetector, ScoreTable};
pub use error::{Error, ErrorKind, Result};
pub use invariant::{ScaleConfig, TrainedScale};
pub use linalg::Matrix;
pub use vpn::VpnModel;
