//! Stochastic gradient descent with classical momentum.
//!
//! Update rule, applied element-wise:
//!
//! ```text
//! v     <- momentum * v + grad + weight_decay * param
//! param <- param - lr * v
//! ```
//!
//! Weight decay is folded into the gradient (L2 penalty), not decoupled.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Per-parameter velocity buffers, matched to parameters by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One optimizer step using each parameter's attached gradient. Nothing is
/// modified if any gradient is missing or non-finite.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::dim(
            "sgd_step",
            format!(
                "{} velocity buffers for {} parameters",
                state.velocity.len(),
                params.len()
            ),
        ));
    }
    for (k, (p, v)) in params.iter().zip(&state.velocity).enumerate() {
        let Some(g) = p.grad() else {
            return Err(Error::InvalidArgument(format!(
                "sgd_step: parameter {k} has no gradient"
            )));
        };
        if v.len() != p.len() {
            return Err(Error::dim(
                "sgd_step",
                format!("velocity {k} has {} entries, parameter has {}", v.len(), p.len()),
            ));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("sgd_step: gradient of parameter {k} at element {i}"),
            });
        }
    }
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let g = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for ((x, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *x;
            *x -= cfg.lr * *vi;
        }
    }
    Ok(())
}
