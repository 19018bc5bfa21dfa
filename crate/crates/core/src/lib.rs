//! Structured weight pruning for convolutional networks.
//!
//! The pipeline constrains each layer's weights to a sparsity set (element
//! cardinality, whole filters, whole GEMM columns, or filters-then-columns)
//! and runs three phases: penalty-regularized pre-pruning that alternates
//! weight training with Euclidean projections and scaled dual updates, a
//! hard masked mapping onto the constraint set, and gradient-masked
//! retraining. Structured masks compact to physically smaller dense GEMMs;
//! accounting tracks parameters, FLOPs, and storage before and after, and
//! detection quality is measured as mAP over an IoU-threshold sweep.

pub mod admm;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod schedules;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
