//! Synchronised map-reduce SGD for neural networks.
//!
//! The crate holds the transport-agnostic parts of the system:
//!
//! - [`nn`]: the network math, generic over [`Scalar`] (`f32` or `f64`).
//! - [`protocol`]: typed messages exchanged by coordinator, workers and
//!   monitoring clients, and their wire encoding.
//! - [`coordinator`]: the master event loop as a state machine, data
//!   allocation, the reduce step and latency-driven budgets.
//! - [`datastore`]: zip ingestion, shard packing and item decoding.
//! - [`worker`]: the worker-side cache and budgeted gradient computation.
//!
//! Everything that leaves a process uses `f64`; the aliases below name the
//! concrete instantiations.

pub mod coordinator;
pub mod datastore;
pub mod nn;
pub mod protocol;
pub mod scalar;
pub mod worker;

pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Params64 = nn::Params<f64>;
pub type Params32 = nn::Params<f32>;
pub type ParamSet64 = nn::ParamSet<f64>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type AdaGradState64 = nn::AdaGradState<f64>;
pub type AdaGradState32 = nn::AdaGradState<f32>;
pub type GradientBundle64 = nn::GradientBundle<f64>;
pub type GradientBundle32 = nn::GradientBundle<f32>;
