// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsio;
pub mod intervention;
pub mod linalg;
pub mod rng;
pub mod router;
pub mod taskbench;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Tensor;
