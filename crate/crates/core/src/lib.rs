// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod error;
pub mod model;
pub mod taskgen;

pub use error::{LabError, Result};
pub mod trainer;
pub mod tale;
pub mod geometry;
pub mod surrogate;
pub mod harness;
