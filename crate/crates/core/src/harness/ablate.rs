use std::fmt::Write as _;

use super::config::TrainConfig;
use super::eval::evaluate;
use super::train::{train, TrainOptions};
use crate::data::Splits;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::model::HeadMode;

pub const BATCH_SWEEP: [usize; 4] = [16, 32, 64, 128];

/// A named head configuration of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub label: &'static str,
    pub head: HeadMode,
    pub awk: bool,
}

pub const ABLATION_ROWS: [Variant; 5] = [
    Variant { label: "FC + BN", head: HeadMode::FcBaseline, awk: false },
    Variant { label: "DTM (GMP)", head: HeadMode::DtmGmp, awk: false },
    Variant { label: "DTM (GAP)", head: HeadMode::DtmGap, awk: false },
    Variant { label: "DTM (GAP+GMP)", head: HeadMode::DtmMixed, awk: false },
    Variant { label: "DTM+AWK (GAP+GMP)", head: HeadMode::DtmMixed, awk: true },
];

/// The two classifiers compared across batch sizes.
pub const SWEEP_VARIANTS: [Variant; 2] = [ABLATION_ROWS[0], ABLATION_ROWS[2]];

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.head = self.head;
        cfg.awk = self.awk;
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub batch_size: usize,
    pub report: MetricsReport,
}

/// Trains `variant` on `data` and scores the test split.
pub fn run_variant(base: &TrainConfig, variant: &Variant, data: &Splits) -> Result<AblationRow> {
    let cfg = variant.apply(base);
    log::info!("ablation: {} (batch {})", variant.label, cfg.batch_size);
    let outcome = train(&cfg, data, &TrainOptions::default())?;
    let report = evaluate(&outcome.best, &data.test, cfg.threshold)?;
    Ok(AblationRow {
        label: variant.label.to_string(),
        batch_size: cfg.batch_size,
        report,
    })
}

pub fn run_grid(base: &TrainConfig, data: &Splits) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS.iter().map(|v| run_variant(base, v, data)).collect()
}

pub fn run_batch_sweep(base: &TrainConfig, data: &Splits, sizes: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &b in sizes {
        let mut cfg = base.clone();
        cfg.batch_size = b;
        for v in &SWEEP_VARIANTS {
            rows.push(run_variant(&cfg, v, data)?);
        }
    }
    Ok(rows)
}

/// `method,mA,Accu,Prec,Recall,F1`, one row per head.
pub fn grid_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,mA,Accu,Prec,Recall,F1\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.label, m.ma, m.accuracy, m.precision, m.recall, m.f1
        );
    }
    s
}

/// `batch_size,method,mA,F1`.
pub fn sweep_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("batch_size,method,mA,F1\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", r.batch_size, r.label, r.report.ma, r.report.f1);
    }
    s
}
