use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate;
use crate::data::{augment, images_tensor, labels_tensor, Dataset, Sample, Splits};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DtmModel};
use crate::supervision::{awk_loss, awk_targets, positive_ratios, total_loss, wce_loss, LossWeights};
use crate::tensor::{sgd_step, BnMode, Graph, SgdState, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub loss: f64,
    pub wce: f64,
    pub awk: f64,
    pub val_ma: Option<f64>,
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss,wce,awk,val_ma\n");
    for e in log {
        let val = e.val_ma.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{},{val}", e.epoch, e.lr, e.loss, e.wce, e.awk);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Weights after the final epoch.
    pub last: DtmModel,
    /// Weights of the epoch with the best validation mA, or the last epoch
    /// when there is no validation split.
    pub best: DtmModel,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and the epoch log go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` if it exists.
    pub resume: bool,
    /// Stop before this epoch, as if interrupted; the run can be resumed.
    pub epoch_limit: Option<usize>,
}

/// Resumable state stored in the producer block of `last.ckpt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    #[serde(rename = "train_config")]
    config: TrainConfig,
    next_epoch: usize,
    log: Vec<EpochLog>,
    best_epoch: Option<usize>,
    best_val_ma: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Augmentation draws come from a stream per (epoch, sample index), so the
/// result does not depend on thread count or batch composition.
fn augment_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a116);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

pub fn loss_weights(cfg: &TrainConfig, train: &Dataset) -> Result<LossWeights> {
    let ratios = positive_ratios(&train.label_matrix())?;
    LossWeights::new(cfg.alpha, cfg.beta, cfg.lambda, &ratios)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub wce: f64,
    pub awk: f64,
}

/// Forward and backward on one batch, leaving gradients on the parameters.
pub fn batch_gradients(
    model: &mut DtmModel,
    batch: &[Sample],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    let x = g.constant(images_tensor(batch.iter())?);
    let out = model.forward(&mut g, x)?;
    let labels = labels_tensor(batch.iter(), model.schema.len());
    let wce = wce_loss(&mut g, out.logits, &labels, weights)?;
    let mut awk = None;
    if cfg.awk {
        if let Some(hm) = model.local_heatmaps(&mut g, &out)? {
            let locals = model.schema.local_indices();
            let local_labels = Tensor::new(
                &[batch.len(), locals.len()],
                batch
                    .iter()
                    .flat_map(|s| locals.iter().map(|&j| f64::from(s.labels[j])))
                    .collect(),
            )?;
            let (h, w) = (batch[0].image.height(), batch[0].image.width());
            let dims = model.heatmap_dims(h, w);
            let targets = batch
                .iter()
                .map(|s| awk_targets(&model.schema, &s.keypoints, model.down_stride(), dims))
                .collect::<Result<Vec<_>>>()?;
            awk = Some(awk_loss(&mut g, hm, &local_labels, &targets)?);
        }
    }
    let total = total_loss(&mut g, awk, wce, cfg.alpha, cfg.beta)?;
    let loss = BatchLoss {
        total: g.scalar(total),
        wce: g.scalar(wce),
        awk: awk.map_or(0.0, |a| g.scalar(a)),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss (wce {}, awk {})", loss.wce, loss.awk),
        });
    }
    g.backward(total)?;
    model.collect_grads(&g)?;
    Ok(loss)
}

fn save(path: &Path, model: &DtmModel, producer: serde_json::Value) -> Result<()> {
    Checkpoint::new(model.clone(), producer).save(path)
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    let path = dir.join(TRAIN_LOG);
    std::fs::write(&path, format_log(log)).map_err(|e| Error::io(&path, e))
}

/// The training configuration recorded in a checkpoint written by [`train`].
pub fn producer_config(producer: &serde_json::Value) -> Option<TrainConfig> {
    serde_json::from_value(producer.get("train_config")?.clone()).ok()
}

pub fn train(cfg: &TrainConfig, data: &Splits, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &data.train;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training split has {} samples, need at least 2",
            train.len()
        )));
    }
    let weights = loss_weights(cfg, train)?;
    let mut model = DtmModel::new(train.schema.clone(), cfg.model.clone(), cfg.seed)?;
    let mut state = SgdState::new();
    let mut log = Vec::new();
    let mut start = 0;
    let mut best_epoch = None;
    let mut best_val: Option<f64> = None;

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let last = dir.join(LAST_CHECKPOINT);
        if opts.resume && last.exists() {
            let ck = Checkpoint::load(&last)?;
            let rs: ResumeState = serde_json::from_value(ck.producer)
                .map_err(|e| Error::Checkpoint(format!("{}: resume state: {e}", last.display())))?;
            if rs.config != *cfg {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration",
                    last.display()
                )));
            }
            model = ck.model;
            state.velocity = rs.velocity;
            start = rs.next_epoch;
            log = rs.log;
            best_epoch = rs.best_epoch;
            best_val = rs.best_val_ma;
            log::info!("resuming at epoch {start}");
        }
    }
    let mut best = match (&opts.out_dir, best_epoch) {
        (Some(dir), Some(_)) => Checkpoint::load(&dir.join(BEST_CHECKPOINT))?.model,
        _ => model.clone(),
    };

    let n = train.len();
    let end = opts.epoch_limit.map_or(cfg.epochs, |l| l.min(cfg.epochs));
    for epoch in start..end {
        let t0 = Instant::now();
        let sgd = cfg.sgd(epoch);
        model.set_mode(BnMode::Train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let (mut sum, mut count) = (BatchLoss::default(), 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // a lone trailing sample would give the vector BN no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Sample> = chunk
                .par_iter()
                .map(|&i| augment(&train.samples[i], &cfg.augment, &mut augment_rng(cfg.seed, epoch, i)))
                .collect();
            let step = batch_gradients(&mut model, &batch, cfg, &weights)
                .and_then(|loss| sgd_step(&mut model.params_mut(), &sgd, &mut state).map(|()| loss));
            let loss = step.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!(
                        "{context} at epoch {epoch}; last good weights: {}",
                        opts.out_dir
                            .as_ref()
                            .map(|d| d.join(LAST_CHECKPOINT))
                            .filter(|p| p.exists())
                            .map_or("(none saved)".into(), |p| p.display().to_string())
                    ),
                },
                other => other,
            })?;
            let k = batch.len() as f64;
            sum.total += loss.total * k;
            sum.wce += loss.wce * k;
            sum.awk += loss.awk * k;
            count += batch.len();
        }
        let val_ma = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.val, cfg.threshold)?.ma)
        };
        let c = count.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr: sgd.lr,
            loss: sum.total / c,
            wce: sum.wce / c,
            awk: sum.awk / c,
            val_ma,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (wce {:.6}, awk {:.6}) val mA {} in {:.1}s",
            entry.loss,
            entry.wce,
            entry.awk,
            val_ma.map_or("-".into(), |v| format!("{v:.4}")),
            t0.elapsed().as_secs_f64()
        );
        log.push(entry);

        let improved = match (val_ma, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        model.clear_grads();
        if improved {
            best_val = val_ma;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        if let Some(dir) = &opts.out_dir {
            if improved {
                let producer = serde_json::json!({
                    "train_config": cfg,
                    "epoch": epoch,
                    "val_ma": val_ma,
                });
                save(&dir.join(BEST_CHECKPOINT), &model, producer)?;
            }
            let rs = ResumeState {
                config: cfg.clone(),
                next_epoch: epoch + 1,
                log: log.clone(),
                best_epoch,
                best_val_ma: best_val,
                velocity: state.velocity.clone(),
            };
            let producer = serde_json::to_value(&rs).map_err(|e| Error::Checkpoint(e.to_string()))?;
            save(&dir.join(LAST_CHECKPOINT), &model, producer)?;
            write_log(dir, &log)?;
        }
    }
    if cfg.epochs == 0 {
        if let Some(dir) = &opts.out_dir {
            let producer = serde_json::json!({ "train_config": cfg, "epoch": null });
            save(&dir.join(BEST_CHECKPOINT), &model, producer)?;
            write_log(dir, &log)?;
        }
    }
    Ok(TrainOutcome {
        log,
        last: model,
        best,
        best_epoch,
    })
}
