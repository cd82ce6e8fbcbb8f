use std::fs;

use dtm_core::data::{Splits, SynthConfig};
use dtm_core::harness::{
    evaluate, export_heatmaps, format_log, grid_table, predict, producer_config, train, TrainConfig,
    TrainOptions, Variant, ABLATION_ROWS, BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT, TRAIN_LOG,
};
use dtm_core::model::{AttributeSchema, Checkpoint, DtmModel, HeadMode};
use dtm_core::Error;

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    };
    cfg.data.synthetic = SynthConfig {
        n_train: 48,
        n_val: 16,
        n_test: 24,
        seed: 11,
        ..SynthConfig::default()
    };
    cfg
}

fn data(cfg: &TrainConfig) -> Splits {
    cfg.data.load().unwrap()
}

fn params(model: &DtmModel) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    m.params_mut().into_iter().map(|t| t.data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny_config(1);
    cfg.lr = 0.0;
    let d = data(&cfg);
    let out = train(&cfg, &d, &TrainOptions::default()).unwrap();
    let init = DtmModel::new(d.train.schema.clone(), cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(params(&out.last), params(&init));
}

#[test]
fn identical_seeds_give_identical_logs() {
    let cfg = tiny_config(2);
    let d = data(&cfg);
    let a = train(&cfg, &d, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &d, &TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(format_log(&a.log), format_log(&b.log));
    assert_eq!(params(&a.last), params(&b.last));
    let c = train(&tiny_config(3), &d, &TrainOptions::default()).unwrap();
    assert_ne!(a.log[0].loss, c.log[0].loss);
}

#[test]
fn thread_count_does_not_change_the_trajectory() {
    let cfg = tiny_config(4);
    let d = data(&cfg);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&cfg, &d, &TrainOptions::default()).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.log, b.log);
    assert_eq!(params(&a.last), params(&b.last));
}

#[test]
fn zero_alpha_matches_disabled_awk() {
    let mut with = tiny_config(5);
    with.alpha = 0.0;
    let mut without = with.clone();
    without.awk = false;
    let d = data(&with);
    let a = train(&with, &d, &TrainOptions::default()).unwrap();
    let b = train(&without, &d, &TrainOptions::default()).unwrap();
    assert_eq!(params(&a.last), params(&b.last));
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.wce, y.wce);
        assert_eq!(y.awk, 0.0);
    }
}

#[test]
fn untrained_model_is_at_chance_on_balanced_data() {
    let mut cfg = tiny_config(6);
    cfg.data.synthetic.positive_rates = vec![0.5; 12];
    cfg.data.synthetic.n_test = 400;
    let d = data(&cfg);
    for seed in 0..3 {
        let model = DtmModel::new(d.test.schema.clone(), cfg.model.clone(), seed).unwrap();
        let r = evaluate(&model, &d.test, 0.5).unwrap();
        assert!((r.ma - 0.5).abs() <= 0.05, "seed {seed}: mA {}", r.ma);
    }
}

#[test]
fn checkpoints_resume_and_round_trip() {
    let cfg = tiny_config(7);
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let full = train(&cfg, &d, &opts).unwrap();
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG, CONFIG_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.epochs);
    assert_eq!(log, format_log(&full.log));
    let saved: TrainConfig = toml::from_str(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(saved, cfg);

    // save -> load -> evaluate gives identical metrics
    let best = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.model, full.best);
    assert_eq!(producer_config(&best.producer), Some(cfg.clone()));
    let r1 = evaluate(&full.best, &d.test, 0.5).unwrap();
    let r2 = evaluate(&best.model, &d.test, 0.5).unwrap();
    let r3 = evaluate(&best.model, &d.test, 0.5).unwrap();
    assert_eq!(format!("{r1:?}"), format!("{r2:?}"));
    assert_eq!(format!("{r2:?}"), format!("{r3:?}"));

    // interrupted after one epoch, then resumed
    let part = tempfile::tempdir().unwrap();
    let leg = |limit, resume| TrainOptions {
        out_dir: Some(part.path().to_path_buf()),
        resume,
        epoch_limit: limit,
    };
    let first = train(&cfg, &d, &leg(Some(1), false)).unwrap();
    assert_eq!(first.log.len(), 1);
    let resumed = train(&cfg, &d, &leg(None, true)).unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(params(&resumed.last), params(&full.last));
    assert_eq!(resumed.best, full.best);

    let mut changed = cfg.clone();
    changed.lr = 0.02;
    let err = train(&changed, &d, &leg(None, true)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let mut cfg = tiny_config(8);
    cfg.lr = 1e150;
    cfg.momentum = 0.0;
    cfg.epochs = 3;
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &cfg,
        &d,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite { .. }), "{msg}");
    assert!(msg.contains(LAST_CHECKPOINT) || msg.contains("none saved"), "{msg}");
}

#[test]
fn schema_mismatch_is_reported() {
    let cfg = tiny_config(9);
    let d = data(&cfg);
    let names = d.test.schema.names();
    let perm: Vec<usize> = (0..names.len()).rev().collect();
    let other = d.test.schema.permuted(&perm).unwrap();
    let model = DtmModel::new(other, cfg.model.clone(), 0).unwrap();
    let err = predict(&model, &d.test).unwrap_err();
    assert!(matches!(err, Error::SchemaMismatch(_)), "{err}");

    let short = AttributeSchema::new(d.test.schema.attributes()[..4].to_vec()).unwrap();
    let model = DtmModel::new(short, cfg.model.clone(), 0).unwrap();
    assert!(matches!(evaluate(&model, &d.test, 0.5), Err(Error::SchemaMismatch(_))));
}

#[test]
fn heatmap_export_writes_one_map_per_attribute() {
    let cfg = tiny_config(10);
    let d = data(&cfg);
    let model = DtmModel::new(d.test.schema.clone(), cfg.model.clone(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = d.test.samples[..3].iter().map(|s| s.id.clone()).collect();
    let mut asked = ids.clone();
    asked.push("nope_1".into());
    let report = export_heatmaps(&model, &d.test, &asked, dir.path()).unwrap();
    assert_eq!(report.unknown, vec!["nope_1".to_string()]);
    let j = d.test.schema.len();
    assert_eq!(report.written.len(), ids.len() * j);
    let pgms = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, ids.len() * j);

    let (hh, hw) = model.heatmap_dims(d.test.height, d.test.width);
    let name = &d.test.schema.get(0).name;
    let bytes = fs::read(dir.path().join(format!("{}_{name}.pgm", ids[0]))).unwrap();
    let body = bytes.len() - hh * hw;
    let header: Vec<String> = String::from_utf8_lossy(&bytes[..body])
        .split_whitespace()
        .map(String::from)
        .collect();
    assert_eq!(header, ["P5", &hw.to_string(), &hh.to_string(), "255"]);

    let sidecar = fs::read_to_string(dir.path().join(format!("{}.txt", ids[0]))).unwrap();
    assert_eq!(sidecar.lines().count(), j);
    for (line, attr) in sidecar.lines().zip(d.test.schema.attributes()) {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], attr.name);
        let (lo, hi): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(lo <= hi);
        assert!(f[3].parse::<usize>().unwrap() < hh && f[4].parse::<usize>().unwrap() < hw);
        if attr.keypoint_ids.is_empty() {
            assert_eq!(f[5], "-");
        }
    }

    let mut fc = cfg.model.clone();
    fc.head = HeadMode::FcBaseline;
    let fc = DtmModel::new(d.test.schema.clone(), fc, 0).unwrap();
    assert!(export_heatmaps(&fc, &d.test, &ids, dir.path()).is_err());
}

#[test]
fn ablation_grid_has_five_rows_of_five_metrics() {
    let mut cfg = tiny_config(12);
    cfg.epochs = 1;
    let d = data(&cfg);
    let rows = dtm_core::harness::run_grid(&cfg, &d).unwrap();
    let table = grid_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,mA,Accu,Prec,Recall,F1");
    assert_eq!(lines.len(), 6);
    for (line, v) in lines[1..].iter().zip(ABLATION_ROWS) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], v.label);
        for c in &cells[1..] {
            let x: f64 = c.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
    let awk_on_fc = Variant {
        label: "bad",
        head: HeadMode::FcBaseline,
        awk: true,
    };
    assert!(awk_on_fc.apply(&cfg).validate().is_err());
}
