//! Two-stage compression of a dual-encoder vision-language model.
//!
//! Stage 1 distills a student image encoder (through a 1×1 channel
//! adapter) and a student text encoder (through a projection head) onto
//! a frozen teacher's output features with a Smooth-L1 objective.
//! Stage 2 freezes the image tower and tunes the text tower with a
//! bidirectional InfoNCE objective. Everything runs on a seeded synthetic
//! bilingual world so each stage's effect can be measured exactly.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
