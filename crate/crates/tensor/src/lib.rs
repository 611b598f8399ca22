//! A compact reverse-mode automatic differentiation engine.
//!
//! Tensors are dense row-major buffers. A [`Graph`] records operations
//! eagerly while computing their values, and [`Graph::backward`] walks the
//! tape in reverse to accumulate gradients. Parameters live outside the
//! graph in a [`ParamStore`] so one store can serve many short-lived graphs
//! (one per training step or sampling step).
//!
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod array;
mod float;
mod graph;
mod kernels;
pub mod nn;
mod optim;
mod params;

pub use array::Array;
pub use float::Float;
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
