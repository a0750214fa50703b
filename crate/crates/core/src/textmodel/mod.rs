//! The trainable text branch: deterministic trigram tokenizer plus the
//! residual encoder stack and projector.

pub mod branch;
pub mod tokenizer;
