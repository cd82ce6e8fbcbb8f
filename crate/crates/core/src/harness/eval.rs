use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{images_tensor, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Checkpoint, DtmModel};
use crate::supervision::awk_targets;
use crate::tensor::{sigmoid_scalar, BnMode, Graph, Tensor};

pub const EVAL_BATCH: usize = 50;

/// Runs `f` on eval-mode forward passes over chunks of `samples`, in
/// parallel, returning results in chunk order.
fn map_chunks<T, F>(model: &DtmModel, samples: &[Sample], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut DtmModel, &mut Graph, &crate::model::ForwardOutput, &[Sample]) -> Result<T> + Sync,
{
    let mut base = model.clone();
    base.set_mode(BnMode::Eval);
    samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut m = base.clone();
            let mut g = Graph::new();
            let x = g.constant(images_tensor(chunk.iter())?);
            let out = m.forward(&mut g, x)?;
            f(&mut m, &mut g, &out, chunk)
        })
        .collect()
}

/// Sigmoid probabilities (N, J) with BN on running statistics.
pub fn predict(model: &DtmModel, ds: &Dataset) -> Result<Tensor> {
    check_schema(model, ds)?;
    let j = model.schema.len();
    let parts = map_chunks(model, &ds.samples, |_, g, out, _| {
        Ok(g.value(out.logits).data().iter().map(|&z| sigmoid_scalar(z)).collect::<Vec<_>>())
    })?;
    Tensor::new(&[ds.len(), j], parts.concat())
}

pub fn check_schema(model: &DtmModel, ds: &Dataset) -> Result<()> {
    let diff = model.schema.diff(&ds.schema);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::SchemaMismatch(format!(
            "model vs dataset attributes differ: {}",
            diff.join("; ")
        )))
    }
}

pub fn evaluate(model: &DtmModel, ds: &Dataset, threshold: f64) -> Result<MetricsReport> {
    let probs = predict(model, ds)?;
    MetricsReport::from_probabilities(&probs, &ds.label_matrix(), threshold)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset, threshold: f64) -> Result<MetricsReport> {
    evaluate(&ckpt.model, ds, threshold)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Per local attribute (schema order of locals): hits and trials.
    pub hits: Vec<usize>,
    pub totals: Vec<usize>,
}

impl LocalizationReport {
    pub fn rate(&self) -> f64 {
        let total: usize = self.totals.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.hits.iter().sum::<usize>() as f64 / total as f64
    }
}

/// Cell `(row, col)` of the largest value, lowest flat index on ties.
pub fn argmax_cell(plane: &[f64], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (k, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = k;
        }
    }
    (best / width, best % width)
}

pub fn chebyshev_near(cell: (usize, usize), targets: &[usize], width: usize, radius: usize) -> bool {
    targets.iter().any(|&t| {
        let (r, c) = (t / width, t % width);
        r.abs_diff(cell.0) <= radius && c.abs_diff(cell.1) <= radius
    })
}

/// For every positive sample of every keypoint-assigned attribute with at
/// least one visible assigned joint, checks whether the heatmap argmax lies
/// within Chebyshev distance 1 of a target cell.
pub fn localization(model: &DtmModel, ds: &Dataset) -> Result<LocalizationReport> {
    check_schema(model, ds)?;
    let locals = model.schema.local_indices();
    let r = model.down_stride();
    let (hh, hw) = model.heatmap_dims(ds.height, ds.width);
    let parts = map_chunks(model, &ds.samples, |m, g, out, chunk| {
        let mut hits = vec![0usize; locals.len()];
        let mut totals = vec![0usize; locals.len()];
        let targets = chunk
            .iter()
            .map(|s| awk_targets(&m.schema, &s.keypoints, r, (hh, hw)))
            .collect::<Result<Vec<_>>>()?;
        for (k, &j) in locals.iter().enumerate() {
            let Some((hm, ch)) = m.heatmap_of(out, j) else {
                return Err(Error::InvalidArgument(
                    "localization needs a template-matching head".into(),
                ));
            };
            let t = g.value(hm);
            let planes = t.shape()[1];
            for (i, s) in chunk.iter().enumerate() {
                if s.labels[j] != 1 {
                    continue;
                }
                let targets = &targets[i][k];
                if targets.is_empty() {
                    continue;
                }
                let base = (i * planes + ch) * hh * hw;
                let cell = argmax_cell(&t.data()[base..base + hh * hw], hw);
                totals[k] += 1;
                hits[k] += usize::from(chebyshev_near(cell, targets, hw, 1));
            }
        }
        Ok((hits, totals))
    })?;
    let mut report = LocalizationReport {
        hits: vec![0; locals.len()],
        totals: vec![0; locals.len()],
    };
    for (h, t) in parts {
        for k in 0..locals.len() {
            report.hits[k] += h[k];
            report.totals[k] += t[k];
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax_cell(&[1.0, 3.0, 3.0, 0.0], 2), (0, 1));
        assert_eq!(argmax_cell(&[0.0; 6], 3), (0, 0));
    }

    #[test]
    fn chebyshev_ring() {
        // 4x4 grid, target at (1, 1)
        assert!(chebyshev_near((2, 2), &[5], 4, 1));
        assert!(chebyshev_near((0, 0), &[5], 4, 1));
        assert!(!chebyshev_near((3, 1), &[5], 4, 1));
        assert!(!chebyshev_near((0, 0), &[], 4, 1));
    }
}
