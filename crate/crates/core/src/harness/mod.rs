//! Training, evaluation, heatmap export and the ablation grid.

mod ablate;
mod config;
mod eval;
mod export;
mod train;

pub use ablate::{
    grid_table, run_batch_sweep, run_grid, run_variant, sweep_table, AblationRow, Variant, ABLATION_ROWS,
    BATCH_SWEEP, SWEEP_VARIANTS,
};
pub use config::{DataConfig, TrainConfig};
pub use eval::{
    argmax_cell, check_schema, chebyshev_near, evaluate, evaluate_checkpoint, localization, predict,
    LocalizationReport, EVAL_BATCH,
};
pub use export::{export_heatmaps, normalize_plane, write_pgm, ExportReport};
pub use train::{
    batch_gradients, format_log, loss_weights, producer_config, train, BatchLoss, EpochLog, TrainOptions, TrainOutcome,
    BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT, TRAIN_LOG,
};

/// Sizes the global worker pool. `0` leaves the rayon default. Only the
/// first call in a process takes effect.
pub fn configure_threads(threads: usize) -> crate::Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
}
