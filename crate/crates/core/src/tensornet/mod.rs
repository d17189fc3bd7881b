//! Minimal tensor and reverse-mode differentiation core.
//!
//! [`Tensor`] holds dense data, [`ops`] has the per-layer forward/backward
//! kernels, [`Network`] chains [`LayerSpec`]s and records a [`Tape`] for
//! back-propagation, and [`ParamStore`] owns the weights.

pub mod network;
pub mod ops;
pub mod params;
pub mod tensor;

pub use network::{LayerSpec, Network, ResidualSpec, Tape};
pub use ops::Mode;
pub use params::ParamStore;
pub use tensor::{DType, Real, Tensor};
