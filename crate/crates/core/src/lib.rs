//! Dense-network training lab built around an orthogonal softmax
//! classification layer.
//!
//! The classification layer multiplies its weight matrix elementwise with a
//! fixed block-diagonal 0/1 mask, giving every class a disjoint contiguous
//! block of input neurons. Class weight vectors therefore stay exactly
//! orthogonal throughout training. The crate bundles the layer together with
//! the baselines it is usually compared against (plain dense classifier,
//! focal / center / truncated-Lq / large-margin losses, dropout, snapshot
//! ensembles) and a seeded multi-round experiment harness with paired
//! t-test reporting.
//!
//! Everything is built on a small hand-rolled dense [`linalg::Matrix`];
//! backpropagation, optimizers and statistics are implemented from scratch
//! so that every gradient and p-value can be checked against an independent
//! oracle in the test suite.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
