//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Each primitive appends a node whose
//! parents already exist, and [`Graph::backward`] sweeps the nodes in reverse
//! creation order accumulating vector-Jacobian products. Only first-order
//! derivatives are supported; the graph is dropped after each step.

mod grad_check;
mod graph;
mod param;
mod tensor;

pub use grad_check::{grad_check, grad_check_report, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, OpKind, Var, LOG_FLOOR, MIN_ROW_NORM};
pub use param::{ParamSet, Parameter};
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;
pub(crate) use tensor::dot;
