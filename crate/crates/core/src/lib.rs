//! Concept-based interpretability on small convolutional networks, and the
//! token-pushing attacks that subvert it.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f32` tensors and a reverse-mode
//!   differentiation engine with gradients at every node.
//! - [`synthdata`]: procedural textures, a shape+texture classification
//!   dataset with known concept/class associations, and concept token sets.
//! - [`model`]: layered convnets with named split points, training and the
//!   `CPAK1` weight container.
//! - [`cav`] and [`tcav`]: linear probes, concept activation vectors,
//!   magnitude and relative TCAV scores with Welch t-tests.
//! - [`attack`]: PGD token pushing (untargeted/targeted) and the Gaussian
//!   noise baseline.
//! - [`ffv`]: channel, faceted and CAV DeepDream feature visualization.
//! - [`freval`]: Fréchet distances between visualization sets.
//! - [`harness`]: declarative end-to-end experiment scenarios.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod cav;
pub mod container;
pub mod error;
pub mod ffv;
pub mod freval;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synthdata;
pub mod tape;
pub mod tcav;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
