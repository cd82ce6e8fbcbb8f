use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtm_core::data::{load_dataset, write_dataset, Dataset, Split, Splits};
use dtm_core::harness::{
    configure_threads, evaluate, export_heatmaps, grid_table, localization, producer_config, run_batch_sweep,
    run_grid, sweep_table, train, TrainConfig, TrainOptions, BATCH_SWEEP, BEST_CHECKPOINT,
};
use dtm_core::model::Checkpoint;

#[derive(Parser)]
#[command(name = "dtm", version, about = "Deep template matching for pedestrian attribute recognition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (the synthetic data seed for gen-synth).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to disk.
    GenSynth,
    /// Train a model and write checkpoints and the epoch log.
    Train {
        /// Dataset root; overrides the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write per-attribute heatmaps of chosen samples as PGM files.
    ExportHeatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sample ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
    },
    /// Train the head ablation grid and the batch-size sweep.
    Ablate {
        /// Skip the batch-size sweep.
        #[arg(long)]
        no_sweep: bool,
        #[arg(long, value_delimiter = ',', default_values_t = BATCH_SWEEP)]
        batch_sizes: Vec<usize>,
    },
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dtm_core::Error> for Failure {
    fn from(e: dtm_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Option<TrainConfig>, Failure> {
    let Some(path) = path else { return Ok(None) };
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    TrainConfig::load(path).map(Some).map_err(|e| Failure::Usage(e.to_string()))
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out <dir> is required for this command".into()))
}

/// Data for scoring a checkpoint: an explicit root, else the `--config`
/// data section, else the configuration recorded in the checkpoint.
fn scoring_data(data: Option<&Path>, cfg: Option<&TrainConfig>, ckpt: &Checkpoint) -> Result<Splits, Failure> {
    if let Some(root) = data {
        return Ok(load_dataset(root, Some(&ckpt.model.schema))?.0);
    }
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => producer_config(&ckpt.producer).ok_or_else(|| {
            Failure::Usage("checkpoint records no training config; pass --data or --config".into())
        })?,
    };
    Ok(cfg.data.load()?)
}

fn run(cli: Cli) -> Outcome {
    let common = &cli.common;
    configure_threads(common.threads)?;
    let file_cfg = load_config(common.config.as_deref())?;
    match cli.command {
        Command::GenSynth => {
            let out = require_out(common)?;
            let mut synth = file_cfg.unwrap_or_default().data.synthetic;
            if let Some(s) = common.seed {
                synth.seed = s;
            }
            let splits = dtm_core::data::gen_synthetic(&synth)?;
            write_dataset(out, &splits)?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                out.display()
            );
        }
        Command::Train { data, resume } => {
            let out = require_out(common)?;
            let mut cfg = file_cfg.unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(root) = data {
                cfg.data.root = Some(root);
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let splits = cfg.data.load()?;
            let outcome = train(
                &cfg,
                &splits,
                &TrainOptions {
                    out_dir: Some(out.to_path_buf()),
                    resume,
                    epoch_limit: None,
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!("final epoch {}: loss {}", last.epoch, last.loss);
            }
            if !splits.test.is_empty() {
                let report = evaluate(&outcome.best, &splits.test, cfg.threshold)?;
                print!("{}", report.to_key_value(&splits.test.schema.names()));
            }
            println!("best checkpoint: {}", out.join(BEST_CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let splits = scoring_data(data.as_deref(), file_cfg.as_ref(), &ckpt)?;
            let ds: &Dataset = splits.get(split);
            if ds.is_empty() {
                return Err(Failure::Runtime(format!("split {} is empty", split.name())));
            }
            let thr = threshold
                .or(file_cfg.as_ref().map(|c| c.threshold))
                .or(producer_config(&ckpt.producer).map(|c| c.threshold))
                .unwrap_or(0.5);
            let report = evaluate(&ckpt.model, ds, thr)?;
            let names = ds.schema.names();
            let mut text = report.to_key_value(&names);
            if ckpt.model.config.head.is_dtm() {
                let loc = localization(&ckpt.model, ds)?;
                text.push_str(&format!("localization={}\n", loc.rate()));
            }
            print!("{text}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
                let path = out.join(format!("eval_{}.txt", split.name()));
                std::fs::write(&path, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                let path = out.join(format!("eval_{}_attributes.csv", split.name()));
                std::fs::write(&path, report.attribute_table(&names))
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
        }
        Command::ExportHeatmaps {
            checkpoint,
            data,
            split,
            ids,
        } => {
            let out = require_out(common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let splits = scoring_data(data.as_deref(), file_cfg.as_ref(), &ckpt)?;
            let report = export_heatmaps(&ckpt.model, splits.get(split), &ids, out)?;
            println!("wrote {} heatmaps to {}", report.written.len(), out.display());
            if !report.unknown.is_empty() {
                return Err(Failure::Runtime(format!(
                    "unknown ids in split {}: {}",
                    split.name(),
                    report.unknown.join(", ")
                )));
            }
        }
        Command::Ablate { no_sweep, batch_sizes } => {
            let out = require_out(common)?;
            let mut cfg = file_cfg.unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if cfg.data.root.is_some() {
                log::warn!("ablate runs on synthetic data; ignoring data.root");
                cfg.data.root = None;
            }
            let splits = cfg.data.load()?;
            std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            let grid = grid_table(&run_grid(&cfg, &splits)?);
            print!("{grid}");
            let path = out.join("ablation.csv");
            std::fs::write(&path, grid).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if !no_sweep {
                let sweep = sweep_table(&run_batch_sweep(&cfg, &splits, &batch_sizes)?);
                print!("{sweep}");
                let path = out.join("batch_sweep.csv");
                std::fs::write(&path, sweep).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}
