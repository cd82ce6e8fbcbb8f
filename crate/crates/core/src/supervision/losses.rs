//! Loss functions. Every loss consumes pre-sigmoid logits and applies the
//! sigmoid exactly once, internally, in log-sum-exp form:
//! `-log σ(z) = softplus(-z)` and `-log(1 - σ(z)) = softplus(z)`.

use serde::{Deserialize, Serialize};

use super::keypoints::{map_keypoint, KeypointSet};
use crate::error::{Error, Result};
use crate::model::AttributeSchema;
use crate::tensor::{sigmoid_scalar, Graph, Tensor, Var};

/// Positive ratios are clamped into `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-4;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the keypoint heatmap loss.
    pub alpha: f64,
    /// Weight of the classification loss.
    pub beta: f64,
    /// Temperature of the imbalance weights.
    pub lambda: f64,
    /// Clamped per-attribute positive ratios.
    pub positive_ratios: Vec<f64>,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, lambda: f64, ratios: &[f64]) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be >= 0, got alpha={alpha} beta={beta}"
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(LossWeights {
            alpha,
            beta,
            lambda,
            positive_ratios: ratios.iter().map(|&p| clamp_ratio(p)).collect(),
        })
    }

    /// `exp((1 - p_j)/λ²)`.
    pub fn positive_weight(&self, j: usize) -> f64 {
        ((1.0 - self.positive_ratios[j]) / (self.lambda * self.lambda)).exp()
    }

    /// `exp(p_j/λ²)`.
    pub fn negative_weight(&self, j: usize) -> f64 {
        (self.positive_ratios[j] / (self.lambda * self.lambda)).exp()
    }
}

fn clamp_ratio(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

fn check_binary(labels: &Tensor, op: &'static str) -> Result<()> {
    if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{op}: label {v} is not 0 or 1")));
    }
    Ok(())
}

/// Fraction of positive labels per attribute of an (N, J) matrix, clamped.
pub fn positive_ratios(labels: &Tensor) -> Result<Vec<f64>> {
    let (n, j) = labels.dims2("positive_ratios")?;
    if n == 0 {
        return Err(Error::InvalidArgument("positive_ratios: no samples".into()));
    }
    check_binary(labels, "positive_ratios")?;
    let mut counts = vec![0usize; j];
    for row in labels.data().chunks(j.max(1)) {
        for (c, &v) in counts.iter_mut().zip(row) {
            if v == 1.0 {
                *c += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| clamp_ratio(c as f64 / n as f64))
        .collect())
}

/// Imbalance-weighted sigmoid cross-entropy, averaged over samples and
/// summed over attributes.
pub fn wce_loss(g: &mut Graph, logits: Var, labels: &Tensor, weights: &LossWeights) -> Result<Var> {
    let z = g.value(logits);
    if z.shape() != labels.shape() {
        return Err(Error::dim(
            "wce_loss",
            format!("logits {:?} vs labels {:?}", z.shape(), labels.shape()),
        ));
    }
    let (n, j) = z.dims2("wce_loss")?;
    if weights.positive_ratios.len() != j {
        return Err(Error::dim(
            "wce_loss",
            format!("{} positive ratios for {j} attributes", weights.positive_ratios.len()),
        ));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite {
            context: "wce_loss logits".into(),
        });
    }
    check_binary(labels, "wce_loss")?;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * j];
    for (k, (&zi, &y)) in z.data().iter().zip(labels.data()).enumerate() {
        let a = k % j;
        if y == 1.0 {
            let w = weights.positive_weight(a);
            loss += w * softplus(-zi);
            grad[k] = -w * sigmoid_scalar(-zi) * inv_n;
        } else {
            let w = weights.negative_weight(a);
            loss += w * softplus(zi);
            grad[k] = w * sigmoid_scalar(zi) * inv_n;
        }
    }
    let value = Tensor::scalar(loss * inv_n);
    Ok(g.custom(
        &[logits],
        value,
        Box::new(move |gout| vec![grad.iter().map(|d| d * gout[0]).collect()]),
    ))
}

/// Heatmap cells (flat `row·W + col`) of each local attribute's visible
/// assigned joints, sorted and deduplicated. One entry per local attribute,
/// in schema order.
pub fn awk_targets(
    schema: &AttributeSchema,
    keypoints: &KeypointSet,
    stride: usize,
    heatmap_dims: (usize, usize),
) -> Result<Vec<Vec<usize>>> {
    let (hh, hw) = heatmap_dims;
    schema
        .local_indices()
        .into_iter()
        .map(|j| {
            let mut cells = Vec::new();
            for &k in &schema.get(j).keypoint_ids {
                let kp = keypoints.joints[k];
                if !kp.visible {
                    continue;
                }
                let (col, row) = map_keypoint(kp.x, kp.y, stride)?;
                if col < hw && row < hh {
                    cells.push(row * hw + col);
                }
            }
            cells.sort_unstable();
            cells.dedup();
            Ok(cells)
        })
        .collect()
}

/// Keypoint heatmap loss over (N, J_l, H, W) logits.
///
/// Positive samples score only their target cells (mean of `-log σ` over the
/// K_j cells; skipped when K_j = 0). Negative samples score every cell (mean
/// of `-log(1 - σ)`). The total is averaged over samples.
pub fn awk_loss(
    g: &mut Graph,
    heatmaps: Var,
    local_labels: &Tensor,
    targets: &[Vec<Vec<usize>>],
) -> Result<Var> {
    let h = g.value(heatmaps);
    let (n, jl, hh, hw) = h.dims4("awk_loss")?;
    let (ln, lj) = local_labels.dims2("awk_loss")?;
    if (ln, lj) != (n, jl) {
        return Err(Error::dim(
            "awk_loss",
            format!("labels ({ln}, {lj}) vs heatmaps axes 0,1 ({n}, {jl})"),
        ));
    }
    if targets.len() != n || targets.iter().any(|t| t.len() != jl) {
        return Err(Error::dim(
            "awk_loss",
            format!("targets must be {n} samples × {jl} local attributes"),
        ));
    }
    if !h.all_finite() {
        return Err(Error::NonFinite {
            context: "awk_loss heatmaps".into(),
        });
    }
    check_binary(local_labels, "awk_loss")?;
    let s = hh * hw;
    let inv_n = 1.0 / n.max(1) as f64;
    let data = h.data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; data.len()];
    for i in 0..n {
        for j in 0..jl {
            let base = (i * jl + j) * s;
            let plane = &data[base..base + s];
            let gplane = &mut grad[base..base + s];
            if local_labels.data()[i * jl + j] == 1.0 {
                let cells = &targets[i][j];
                if cells.is_empty() {
                    continue;
                }
                if let Some(&bad) = cells.iter().find(|&&c| c >= s) {
                    return Err(Error::dim(
                        "awk_loss",
                        format!("target cell {bad} outside heatmap of {s} cells"),
                    ));
                }
                let inv_k = 1.0 / cells.len() as f64;
                for &c in cells {
                    loss += softplus(-plane[c]) * inv_k;
                    gplane[c] -= sigmoid_scalar(-plane[c]) * inv_k * inv_n;
                }
            } else {
                let inv_s = 1.0 / s as f64;
                for (gv, &v) in gplane.iter_mut().zip(plane) {
                    loss += softplus(v) * inv_s;
                    *gv = sigmoid_scalar(v) * inv_s * inv_n;
                }
            }
        }
    }
    let value = Tensor::scalar(loss * inv_n);
    Ok(g.custom(
        &[heatmaps],
        value,
        Box::new(move |gout| vec![grad.iter().map(|d| d * gout[0]).collect()]),
    ))
}

/// `alpha · L_awk + beta · L_wce`; a missing AWK term counts as zero.
pub fn total_loss(
    g: &mut Graph,
    l_awk: Option<Var>,
    l_wce: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "total_loss: weights must be >= 0, got alpha={alpha} beta={beta}"
        )));
    }
    let cls = g.scale(l_wce, beta);
    match l_awk {
        Some(a) => {
            let aux = g.scale(a, alpha);
            g.add(aux, cls)
        }
        None => Ok(cls),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamped_ratios() {
        let labels = Tensor::new(&[4, 3], vec![
            1.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, //
            1.0, 0.0, 0.0,
        ])
        .unwrap();
        let p = positive_ratios(&labels).unwrap();
        assert_eq!(p, vec![1.0 - P_CLAMP, P_CLAMP, 0.5]);
        assert!(positive_ratios(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn weights_reject_negative() {
        assert!(LossWeights::new(-1.0, 1.0, 1.0, &[0.5]).is_err());
        assert!(LossWeights::new(1.0, 1.0, 0.0, &[0.5]).is_err());
    }
}
