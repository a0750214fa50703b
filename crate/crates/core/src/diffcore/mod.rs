//! Deterministic scalar autodiff core: parameter storage, the fused
//! forward/backward evaluator, and the masked AdamW optimizer.

pub mod adamw;
pub mod graph;
pub mod params;
