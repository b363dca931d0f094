//! Gated networks in path space.
//!
//! A bias-free network with gates computes `ŷ(x) = ⟨φ(x), v⟩`, where the
//! neural path feature `φ` records which input-to-output paths are active and
//! the neural path value `v` is the product of the weights along each path.
//! This crate evaluates such networks, enumerates their paths, computes the
//! neural path kernel both by brute force and in closed form, and compares it
//! with the empirical neural tangent kernel.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod network;
pub mod paths;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use network::{ArchKind, ArchSpec, Family, GateStack, Gating, InitScheme, Model, ModelKind, Pooling, Weights};
pub use rng::RngStream;
pub use tensor::Tensor;
