//! Relational knowledge distillation between a frozen teacher and a student
//! dual encoder, on a small reverse-mode autodiff engine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod run;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
