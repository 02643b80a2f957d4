//! Cross-modal prompt generation with null-space projection and
//! prototype routing for continual vision-language learning.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod nullspace;
pub mod optim;
pub mod projector;
pub mod report;
pub mod router;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
