//! Minimal differentiable-computation core.
//!
//! A reverse-mode tape over f64 matrices, sized for the needs of the policy
//! networks: dense layers, layer normalization, masked softmax attention,
//! tanh/gelu activations, grouped softmax heads, and the reductions used by
//! the PPO loss. Values are computed eagerly when ops are recorded; a single
//! `backward` pass accumulates parameter gradients into a flat buffer.

pub mod adam;
pub mod graph;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use params::{GradBuf, ParamId, ParamSet};

pub type Mat = ndarray::Array2<f64>;
