// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` linear algebra used by the analysis pipeline.

mod linalg;
mod matrix;

pub use linalg::{
    cosine, numerical_rank, orthonormalize, project, projector, pseudoinverse, top_r_svd, Orthonormalized, SvdResult,
    RANK_TOLERANCE,
};
pub(crate) use matrix::{gemm, Layout};
pub use matrix::{Matrix, Vector};
