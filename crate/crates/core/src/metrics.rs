//! Label-based (mA) and instance-based (accuracy, precision, recall, F1)
//! multi-label metrics.
//!
//! Means are accumulated as exact rationals and rounded once, so results do
//! not depend on sample or attribute order.

use std::fmt::Write;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `prob >= threshold`, else `0`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Tensor {
    let data = probs
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(probs.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl Counts {
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBased {
    pub ma: f64,
    pub per_attribute: Vec<f64>,
    /// Attributes lacking positives or negatives in this split; their mA_j
    /// is the one defined rate alone.
    pub one_sided: Vec<bool>,
    pub counts: Vec<Counts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// From mean precision and recall, not a mean of per-sample F1.
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("metric ratios lie in [0, 1]")
}

fn check_pair(preds: &Tensor, labels: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (n, j) = labels.dims2(op)?;
    if preds.shape() != labels.shape() {
        return Err(Error::dim(
            op,
            format!("predictions {:?} vs labels {:?}", preds.shape(), labels.shape()),
        ));
    }
    for (what, t) in [("prediction", preds), ("label", labels)] {
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("{op}: {what} {v} is not 0 or 1")));
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty prediction set")));
    }
    Ok((n, j))
}

pub fn confusion_counts(preds: &Tensor, labels: &Tensor) -> Result<Vec<Counts>> {
    let (_, j) = check_pair(preds, labels, "confusion_counts")?;
    let mut counts = vec![Counts::default(); j];
    for (k, (&p, &y)) in preds.data().iter().zip(labels.data()).enumerate() {
        let c = &mut counts[k % j];
        match (p == 1.0, y == 1.0) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(counts)
}

pub fn label_based_ma(preds: &Tensor, labels: &Tensor) -> Result<LabelBased> {
    let counts = confusion_counts(preds, labels)?;
    let mut total = BigRational::zero();
    let mut per_attribute = Vec::with_capacity(counts.len());
    let mut one_sided = Vec::with_capacity(counts.len());
    for c in &counts {
        let (p, n) = (c.positives(), c.negatives());
        let m = match (p > 0, n > 0) {
            (true, true) => (ratio(c.true_pos, p) + ratio(c.true_neg, n)) / ratio(2, 1),
            (true, false) => ratio(c.true_pos, p),
            (false, true) => ratio(c.true_neg, n),
            (false, false) => unreachable!("at least one sample"),
        };
        one_sided.push(p == 0 || n == 0);
        per_attribute.push(to_f64(&m));
        total += m;
    }
    let ma = if counts.is_empty() {
        0.0
    } else {
        to_f64(&(total / ratio(counts.len() as u64, 1)))
    };
    Ok(LabelBased {
        ma,
        per_attribute,
        one_sided,
        counts,
    })
}

/// Per-sample Jaccard accuracy, precision and recall averaged over samples.
///
/// Empty sets: a sample with no true and no predicted attributes scores 1
/// on all three. When only one side is empty, the ratios whose denominator
/// vanishes score 0.
pub fn instance_metrics(preds: &Tensor, labels: &Tensor) -> Result<InstanceMetrics> {
    let (n, j) = check_pair(preds, labels, "instance_metrics")?;
    let (mut acc, mut prec, mut rec) = (
        BigRational::zero(),
        BigRational::zero(),
        BigRational::zero(),
    );
    let pd = preds.data();
    let ld = labels.data();
    for i in 0..n {
        let (mut inter, mut union, mut npred, mut ntrue) = (0u64, 0u64, 0u64, 0u64);
        for k in i * j..(i + 1) * j {
            let (p, y) = (pd[k] == 1.0, ld[k] == 1.0);
            inter += u64::from(p && y);
            union += u64::from(p || y);
            npred += u64::from(p);
            ntrue += u64::from(y);
        }
        if union == 0 {
            acc += ratio(1, 1);
            prec += ratio(1, 1);
            rec += ratio(1, 1);
            continue;
        }
        acc += ratio(inter, union);
        if npred > 0 {
            prec += ratio(inter, npred);
        }
        if ntrue > 0 {
            rec += ratio(inter, ntrue);
        }
    }
    let count = ratio(n as u64, 1);
    let (acc, prec, rec) = (acc / &count, prec / &count, rec / &count);
    let sum = &prec + &rec;
    let f1 = if sum.is_zero() {
        BigRational::zero()
    } else {
        ratio(2, 1) * &prec * &rec / sum
    };
    Ok(InstanceMetrics {
        accuracy: to_f64(&acc),
        precision: to_f64(&prec),
        recall: to_f64(&rec),
        f1: to_f64(&f1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute_ma: Vec<f64>,
    pub one_sided: Vec<bool>,
    pub threshold: f64,
    pub counts: Vec<Counts>,
    pub num_samples: usize,
}

impl MetricsReport {
    /// Scores (N, J) probabilities against 0/1 labels.
    pub fn from_probabilities(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<Self> {
        let preds = binarize(probs, threshold);
        Self::from_predictions(&preds, labels, threshold)
    }

    pub fn from_predictions(preds: &Tensor, labels: &Tensor, threshold: f64) -> Result<Self> {
        let lb = label_based_ma(preds, labels)?;
        let inst = instance_metrics(preds, labels)?;
        Ok(MetricsReport {
            ma: lb.ma,
            accuracy: inst.accuracy,
            precision: inst.precision,
            recall: inst.recall,
            f1: inst.f1,
            per_attribute_ma: lb.per_attribute,
            one_sided: lb.one_sided,
            threshold,
            counts: lb.counts,
            num_samples: labels.shape()[0],
        })
    }

    /// `key = value` lines. `names` labels the per-attribute entries.
    pub fn to_key_value(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.num_samples);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        for (k, v) in [
            ("mA", self.ma),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        for (j, v) in self.per_attribute_ma.iter().enumerate() {
            let name = names.get(j).map_or_else(|| j.to_string(), Clone::clone);
            let flag = if self.one_sided[j] { " (one-sided)" } else { "" };
            let _ = writeln!(s, "mA.{name} = {v:.6}{flag}");
        }
        s
    }

    /// Comma-separated per-attribute table with a header row.
    pub fn attribute_table(&self, names: &[String]) -> String {
        let mut s = String::from("attribute,mA,tp,tn,fp,fn,one_sided\n");
        for (j, (m, c)) in self.per_attribute_ma.iter().zip(&self.counts).enumerate() {
            let name = names.get(j).map_or_else(|| j.to_string(), Clone::clone);
            let _ = writeln!(
                s,
                "{name},{m:.6},{},{},{},{},{}",
                c.true_pos, c.true_neg, c.false_pos, c.false_neg, self.one_sided[j]
            );
        }
        s
    }
}
