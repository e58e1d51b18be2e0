//! Desk-scale laboratory for targeted transfer attacks with random
//! parameter pruning.
//!
//! The crate is organized around small, fully deterministic pieces:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors with reverse-mode autodiff and
//!   a finite-difference oracle.
//! - [`nets`]: small conv/MLP classifiers, training, and bit-exact
//!   checkpoints.
//! - [`data`]: the synthetic ShapeSet image classification dataset.
//! - [`masking`]: DropConnect-style Bernoulli masks over selected parameter
//!   groups.
//! - [`attacks`]: iterative sign-gradient attacks (momentum, gradient
//!   smoothing, input transforms, scaled copies) and the masked-variant
//!   attack driver.
//! - [`analysis`]: parameter importance, importance-ranked pruning, Gini
//!   concentration, masked-loss expectation checks, and variant
//!   diversity/utility metrics.

pub mod analysis;
pub mod attacks;
pub mod container;
pub mod data;
pub mod error;
pub mod masking;
pub mod nets;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{finite_diff_grad, GradMap, NodeId, Tape};
pub use tensor::Tensor;
