//! A small reverse-mode training engine and an adversarial
//! feature-consistency regularizer, with the experiment harness that
//! exercises it.

pub mod autodiff;
pub mod cf;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
