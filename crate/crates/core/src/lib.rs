//! Numerical core for training small vision transformers with an auxiliary
//! caption-alignment objective.
//!
//! The crate is `no_std` (with `alloc`) so that the math can be embedded
//! anywhere; the `std` feature (on by default) only turns on runtime SIMD
//! detection in the matrix kernels and std-backed float intrinsics. File
//! formats, the CLI and experiment drivers live in the companion `textalign`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod text_targets;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
