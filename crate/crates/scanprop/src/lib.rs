//! Gradient back-propagation restructured as an exclusive scan.
//!
//! The gradient of a chain-structured network is a left fold of transposed
//! Jacobians into the loss gradient vector. Folds over an associative
//! operator can be evaluated as a scan, so this crate defines the operator
//! `diamond(a, b) = b * a`, stores the per-operation transposed Jacobians
//! as CSR matrices, and runs a work-efficient parallel exclusive scan over
//! the resulting sequence. Analytical CSR builders produce the Jacobians of
//! common layers directly from layer metadata, without materializing dense
//! intermediates.
//!
//! Modules:
//!
//! - [`sparse`]: CSR storage, structural products, and serialization.
//! - [`jacobians`]: analytical transposed-Jacobian builders plus a
//!   finite-difference oracle.
//! - [`scan`]: linear, Blelloch, and hybrid scan executors over chains of
//!   vectors, dense matrices, and CSR matrices.
//! - [`datagen`]: seeded synthetic sequence datasets.
//! - [`training`]: RNN/GRU training loops whose backward pass is a scan.
//! - [`analysis`]: static FLOP and memory models for the scan schedules.

pub mod analysis;
pub mod datagen;
pub mod jacobians;
pub mod scalar;
pub mod scan;
pub mod sparse;
pub mod training;

pub use scalar::Scalar;
