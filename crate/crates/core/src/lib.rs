//! Deterministic desk-scale engine for continual novel-concept injection
//! into a frozen visual space.
//!
//! The visual side is a synthetic compositional world of unit-norm region
//! features; the trainable side is a small text branch (trigram tokenizer,
//! residual encoder stack, affine projector). Concepts arrive in a fixed
//! sequence of heterogeneous tasks. Two mechanisms protect old knowledge
//! while new concepts are learned:
//!
//! * dual-level distillation against a frozen task-start teacher — absolute
//!   cosine alignment plus relational structure matching, at both the
//!   encoder and projector levels;
//! * a per-element update mask derived from probe gradients on the old
//!   concepts — elements whose probe gradient is small stay live, the rest
//!   are frozen for the refresh interval.
//!
//! Everything is pure-Rust `f64` with fixed reduction orders, so every run
//! is bit-reproducible from its seeds.

pub mod cli;
pub mod config;
pub mod continual;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod kpd;
mod linalg;
pub mod losses;
pub mod synthworld;
pub mod textmodel;
pub mod util;

pub use error::{Error, Result};
