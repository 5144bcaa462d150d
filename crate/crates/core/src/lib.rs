//! netdyn-core: a laboratory for analyzing the learning dynamics of fully
//! connected networks.
//!
//! The crate trains small dense networks and instruments them with a set of
//! dynamics-oriented diagnostics:
//!
//! - rank probability distributions ([`rpd`]): how the samples of a class
//!   rank inside each neuron's signed projection sequence, layer by layer;
//! - linear substitution maps ([`lmap`]): the single affine map obtained by
//!   replacing activations beyond a layer with the identity, with optional
//!   batch-norm folding, plus the pruning accuracy it yields;
//! - attraction basins ([`basin`]): accuracy-vs-noise curves and their 50%
//!   crossing, in sample space and in weight space;
//! - learning phases and grokking detection ([`phase`]);
//! - low-dimensional views ([`project`]): the 2D bottleneck from the final
//!   layer's singular vectors and 3D PCA.
//!
//! Everything is seeded and deterministic: repeated runs of the same
//! configuration produce byte-identical outputs regardless of thread count.

pub mod basin;
pub mod config;
pub mod data;
pub mod experiment;
pub mod linalg;
pub mod lmap;
pub mod net;
pub mod parallel;
pub mod phase;
pub mod plot;
pub mod project;
pub mod rng;
pub mod rpd;
pub mod train;

pub use data::LabeledDataset;
pub use linalg::Matrix;
pub use net::{ActivationKind, BnMode, Network};
