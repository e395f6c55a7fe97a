//! Transfer learning for a desk-scale style-based generator with an
//! anchored-noise feature-matching loss, noise interpolation for
//! controlling preserved source features, surgery baselines, and
//! distribution metrics.

#[macro_use]
pub mod error;
pub mod checkpoint;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
