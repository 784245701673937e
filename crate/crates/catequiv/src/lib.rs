//! Category-equivariant 1-D convolutional networks for inertial human-activity
//! recognition.
//!
//! The crate is organised around a small dense-tensor core with reverse-mode
//! gradients ([`tensor`], [`tape`]), the symmetry category acting on signal
//! tensors ([`category`]), the UCI-HAR signal pipeline ([`pipeline`]), the
//! CatEquiv model and its CNN baselines ([`model`]), a training engine
//! ([`train`]), the composite out-of-distribution evaluation harness
//! ([`ood`], [`metrics`]) and a numerical verifier for the architecture's
//! equivariance and invariance guarantees ([`verify`]).
//!
//! All floating-point state is `f64` and every random draw flows through the
//! seeded [`rng::Rng`], so identical seeds reproduce identical results across
//! runs and platforms.

pub mod category;
pub mod error;
pub mod metrics;
mod par;
pub mod model;
pub mod ood;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
