use serde::{Deserialize, Serialize};

use super::graph::{Graph, Normalization, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Which axes batch statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnVariant {
    /// Per channel over (N, H, W) of a rank-4 input.
    Spatial,
    /// Per channel over N of a rank-2 (N, C) input.
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Flattened `(outer, channels, inner)` view of a BN input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn of(variant: BnVariant, shape: &[usize]) -> Result<BnLayout> {
        match (variant, shape) {
            (BnVariant::Spatial, &[n, c, h, w]) => Ok(BnLayout {
                outer: n,
                channels: c,
                inner: h * w,
            }),
            (BnVariant::Vector, &[n, c]) => Ok(BnLayout {
                outer: n,
                channels: c,
                inner: 1,
            }),
            (BnVariant::Spatial, s) => Err(Error::dim(
                "batchnorm",
                format!("spatial variant needs rank-4 input, got {s:?}"),
            )),
            (BnVariant::Vector, s) => Err(Error::dim(
                "batchnorm",
                format!("vector variant needs rank-2 input, got {s:?}"),
            )),
        }
    }

    /// Elements contributing to each channel's statistics.
    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_channel(&self, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.outer).map(move |n| {
            let start = (n * self.channels + c) * self.inner;
            start..start + self.inner
        })
    }
}

/// Per-channel mean and biased variance.
pub(crate) fn moments(x: &[f64], l: BnLayout) -> (Vec<f64>, Vec<f64>) {
    let m = l.count() as f64;
    let mut mean = vec![0.0; l.channels];
    let mut var = vec![0.0; l.channels];
    for c in 0..l.channels {
        let s: f64 = l.for_channel(c).map(|r| x[r].iter().sum::<f64>()).sum();
        let mu = s / m;
        let ss: f64 = l
            .for_channel(c)
            .map(|r| x[r].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum();
        mean[c] = mu;
        var[c] = ss / m;
    }
    (mean, var)
}

/// Returns `(y, x_hat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn normalize(
    x: &[f64],
    l: BnLayout,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for c in 0..l.channels {
        for r in l.for_channel(c) {
            for i in r {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Gradients `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance
/// are functions of `x` and contribute to `dx`.
pub(crate) fn backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    l: BnLayout,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = l.count() as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; l.channels];
    let mut dbeta = vec![0.0; l.channels];
    for c in 0..l.channels {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for r in l.for_channel(c) {
            for i in r {
                sdy += dy[i];
                sdyx += dy[i] * xhat[i];
            }
        }
        dgamma[c] = sdyx;
        dbeta[c] = sdy;
        let scale = gamma[c] * inv_std[c];
        for r in l.for_channel(c) {
            for i in r {
                dx[i] = if batch_stats {
                    scale * (dy[i] - sdy / m - xhat[i] * sdyx / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization layer state: affine parameters plus running moments.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    pub variant: BnVariant,
    /// When false, gamma/beta stay at 1/0 and are not trained.
    pub affine: bool,
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize, variant: BnVariant) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: BnMode::Train,
            variant,
            affine: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Applies the layer; in train mode this also folds the batch moments
    /// into the running statistics.
    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = if self.affine {
            (g.param(&self.gamma), g.param(&self.beta))
        } else {
            (g.constant(self.gamma.clone()), g.constant(self.beta.clone()))
        };
        let norm = match self.mode {
            BnMode::Train => Normalization::Batch { eps: self.eps },
            BnMode::Eval => Normalization::Fixed {
                mean: &self.running_mean,
                var: &self.running_var,
                eps: self.eps,
            },
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, self.variant, norm)?;
        if let Some(stats) = stats {
            let m = stats.count as f64;
            let unbias = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
            for c in 0..self.channels() {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                    + self.momentum * stats.var[c] * unbias;
            }
        }
        Ok(y)
    }

    /// Trainable tensors in the order `forward` registers them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        if self.affine {
            vec![&mut self.gamma, &mut self.beta]
        } else {
            Vec::new()
        }
    }

    pub fn param_count(&self) -> usize {
        if self.affine {
            2 * self.channels()
        } else {
            0
        }
    }
}
