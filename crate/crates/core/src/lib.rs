//! Sequential recommendation with knowledge distilled from a generative
//! teacher: ranking distillation over the teacher's top-K lists weighted by
//! position, confidence and teacher–student consistency, and embedding
//! distillation through a projector plus a per-item collaborative offset.

pub mod data;
pub mod distill;
pub mod embed;
pub mod error;
pub mod eval;
pub mod seed;
pub mod student;
pub mod synthetic;
pub mod teacher;
pub mod trainer;

pub use error::{CoreError, Result};
