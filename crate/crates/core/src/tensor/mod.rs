//! Dense tensors, reverse-mode autodiff, and the optimizer.

mod batchnorm;
mod conv;
mod dense;
mod gemm;
mod gradcheck;
mod graph;
mod optim;

pub use batchnorm::{BatchNormState, BnMode, BnVariant};
pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{sigmoid_scalar, BackwardFn, BatchMoments, Graph, Normalization, Var};
pub use optim::{sgd_step, SgdConfig, SgdState};
