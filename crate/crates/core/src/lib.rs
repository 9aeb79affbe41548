//! Desk-scale laboratory for entropy dynamics under group-relative policy
//! optimization.
//!
//! The crate trains small position-factored softmax policies with GRPO and
//! with the self-information advantage reshape (ECVGPO), on synthetic
//! grounding, exact-match reasoning and numeric bandit environments, and
//! measures how policy entropy evolves. [`entropy_lab`] checks the
//! first-order entropy-change law for tabular softmax policies against exact
//! recomputation.

pub mod ecvgpo;
pub mod entropy_lab;
pub mod envs;
pub mod error;
pub mod geometry;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod vocab;

pub use error::{LabError, Result};
