//! Minimal reverse-mode differentiable computation substrate.
//!
//! A differentiable value is a [`Var`]: a [`Tensor`] plus its node in a
//! recording [`Graph`]. After [`Graph::backward`] from a scalar output, every
//! reachable parameter's gradient has the shape of its value; unreachable
//! parameters have none (zero). Identical parameter snapshots and inputs
//! produce bit-identical losses and gradients.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, Checkpoint, ParameterSet};
pub use tensor::Tensor;
