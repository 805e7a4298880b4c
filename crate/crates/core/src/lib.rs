//! Reconstruction and disaggregation of multi-band radio maps from partial
//! tensor observations, via coupled multilinear rank-(L,L,1) block-term
//! decomposition.
//!
//! The crate provides:
//! * dense third-order tensor algebra ([`tensor`]),
//! * synthetic scenario generation with correlated log-normal shadowing
//!   ([`scenario`]),
//! * observation planning (slab, fiber-group, and random-fiber regimes) with
//!   identifiability checkers ([`sampling`]),
//! * block coordinate descent solvers for the coupled-slab and the
//!   weighted/masked criteria ([`solver`]),
//! * post-processing and error metrics ([`posteval`], [`tps`]),
//! * file formats and a seeded Monte-Carlo experiment harness ([`io`],
//!   [`experiment`]).

pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod posteval;
pub mod sampling;
pub mod scenario;
pub mod solver;
pub mod tensor;
pub mod tps;

pub use error::{Error, Result};
pub use tensor::{
    fold, khatri_rao, ll1_synthesize, mode_product, partition_khatri_rao, slf_matrix, unfold,
    Ll1Factors, Mode, Tensor3, UnfoldedTensor,
};
