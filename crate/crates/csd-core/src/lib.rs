//! Contrastive self-distillation (CSD) for super-resolution model compression.
//!
//! A width-sliced student network shares its weights with the teacher it is
//! cut from; both are trained jointly with a reconstruction loss and an
//! L1-ratio contrastive loss computed in a frozen embedding space, with the
//! teacher's output detached inside the contrastive term.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
