// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod subspace;
pub mod tensorfile;
pub mod training;

pub use error::{Error, Result};
