//! Core machinery for sequentially training neural networks with partially
//! shared parameters without the earlier models forgetting.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`graph`]), a registry of parameter vectors with per-model ownership tags
//! ([`params`]), a diagonal Fisher information accumulator ([`fisher`]), the
//! weight plasticity loss that combines them ([`wpl`]), and a set of
//! Laplace-approximation oracles ([`laplace`]) that verify the statistical
//! derivation behind the loss on tiny models.
//!
//! All numeric code is generic over a [`scalar::Scalar`] type; the
//! experiments run on `f64`, for which concrete aliases are exported at the
//! crate root.

pub mod fisher;
pub mod graph;
pub mod laplace;
pub mod matrix;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod wpl;

pub use params::ParamId;
pub use scalar::Scalar;

/// Dense row-major array of 64-bit reals.
pub type Tensor = tensor::Tensor<f64>;
/// Computation graph over 64-bit reals.
pub type Graph = graph::Graph<f64>;
/// Per-parameter gradients of a 64-bit scalar loss.
pub type GradientMap = graph::GradientMap<f64>;
/// Evaluated node values of a 64-bit graph.
pub type NodeValues = graph::NodeValues<f64>;
/// Parameter registry over 64-bit tensors.
pub type ParameterStore = params::ParameterStore<f64>;
/// Frozen parameter copy over 64-bit tensors.
pub type Snapshot = params::Snapshot<f64>;
/// Diagonal Fisher state over 64-bit tensors.
pub type FisherState = fisher::FisherState<f64>;
/// Small dense matrix of 64-bit reals.
pub type Matrix = matrix::Matrix<f64>;
