mod common;

use std::fs;

use amq::config::SweepPoint;
use amq::error::AmqError;
use amq::experiment::{
    cmd_gen_data, cmd_report, cmd_sweep, cmd_train, read_sweep_csv, summarize, METRICS_CSV, TRAIN_LOG_CSV,
};
use amq::train::Mode;
use common::tiny_experiment;

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    let a = cmd_gen_data(&cfg).unwrap();
    let b = cmd_gen_data(&cfg).unwrap();
    assert_eq!(a.sha256, b.sha256);
    assert_eq!(a.samples, 9);
    let mut other = cfg.clone();
    other.data.seed += 1;
    other.output.dataset = dir.path().join("other.jsonl");
    assert_ne!(cmd_gen_data(&other).unwrap().sha256, a.sha256);
}

#[test]
fn train_writes_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let r1 = cmd_train(&cfg, false, &mut quiet()).unwrap();
    let m1 = fs::read(r1.dir.join(METRICS_CSV)).unwrap();
    let l1 = fs::read(r1.dir.join(TRAIN_LOG_CSV)).unwrap();
    cfg.output.dir = dir.path().join("again");
    let r2 = cmd_train(&cfg, false, &mut quiet()).unwrap();
    assert_eq!(m1, fs::read(r2.dir.join(METRICS_CSV)).unwrap());
    assert_eq!(l1, fs::read(r2.dir.join(TRAIN_LOG_CSV)).unwrap());
    assert_eq!(r1.steps, 6);
    // one evaluation per epoch
    assert_eq!(String::from_utf8(m1).unwrap().lines().count(), 1 + 3);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let full = cmd_train(&cfg, false, &mut quiet()).unwrap();
    let expected = fs::read(full.dir.join(METRICS_CSV)).unwrap();

    // abort at the second evaluation, leaving the epoch-1 checkpoint behind
    let mut partial = cfg.clone();
    partial.output.dir = dir.path().join("resumed");
    let mut calls = 0;
    let mut abort = |_: &str| {
        calls += 1;
        if calls == 2 {
            panic!("interrupted");
        }
    };
    let crashed = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| cmd_train(&partial, false, &mut abort)));
    assert!(crashed.is_err());
    let ck_path = partial.output.dir.join(amq::experiment::CHECKPOINT_FILE);
    assert_eq!(amq::checkpoint::Checkpoint::load(&ck_path).unwrap().state.step, 2);

    let resumed = cmd_train(&partial, true, &mut quiet()).unwrap();
    assert_eq!(resumed.steps, 6);
    assert_eq!(resumed.final_eval, full.final_eval);
    assert_eq!(fs::read(resumed.dir.join(METRICS_CSV)).unwrap(), expected);
    assert_eq!(
        fs::read(resumed.dir.join(TRAIN_LOG_CSV)).unwrap(),
        fs::read(full.dir.join(TRAIN_LOG_CSV)).unwrap()
    );
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg, false, &mut quiet()).unwrap();
    let mut changed = cfg.clone();
    changed.train.lr_main *= 2.0;
    assert!(matches!(cmd_train(&changed, true, &mut quiet()), Err(AmqError::Config(_))));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    assert!(matches!(cmd_train(&cfg, false, &mut quiet()), Err(AmqError::Config(_))));
}

#[test]
fn random_and_targeted_logs_share_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let hashes = |cfg: &amq::config::ExperimentConfig| {
        let r = cmd_train(cfg, false, &mut quiet()).unwrap();
        let mut rd = csv::Reader::from_path(r.dir.join(TRAIN_LOG_CSV)).unwrap();
        rd.records().map(|x| x.unwrap()[1].to_string()).collect::<Vec<_>>()
    };
    cfg.train.mode = Mode::Targeted;
    let t = hashes(&cfg);
    cfg.train.mode = Mode::Random;
    cfg.output.dir = dir.path().join("random");
    assert_eq!(t, hashes(&cfg));
}

#[test]
fn sweep_runs_resumes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.train.epochs = 2;
    cfg.sweep.points = vec![
        SweepPoint::uniform(8),
        SweepPoint::uniform(4),
        SweepPoint::new(Mode::Targeted, vec![4, 8], vec![0.5, 0.5]),
    ];
    cfg.sweep.seeds = vec![1, 2];
    cmd_gen_data(&cfg).unwrap();
    let first = cmd_sweep(&cfg, false, &mut quiet()).unwrap();
    assert_eq!(first.rows.len(), 6);
    assert_eq!(first.failures(), 0);
    assert_eq!(first.skipped, 0);

    let again = cmd_sweep(&cfg, true, &mut quiet()).unwrap();
    assert_eq!(again.skipped, 6);
    assert_eq!(again.rows, first.rows);

    let rows = read_sweep_csv(&first.csv).unwrap();
    assert_eq!(rows, first.rows);
    let summary = summarize(&rows);
    let int8 = summary.iter().find(|s| s.point == "uniform-8-1").unwrap();
    let int4 = summary.iter().find(|s| s.point == "uniform-4-1").unwrap();
    assert_eq!(int8.normalized_increase, Some(0.0));
    assert_eq!(int4.normalized_increase, Some(1.0));
    assert_eq!(int4.macs_int8eq * 2.0, int8.macs_int8eq);

    let svg = dir.path().join("pareto.svg");
    let text = cmd_report(&first.csv, Some(&svg)).unwrap();
    assert!(text.contains("targeted-4_8-0.5_0.5"));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn sweep_records_failing_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.train.epochs = 1;
    cfg.train.warmup_epochs = 0;
    cfg.sweep.points = vec![SweepPoint::uniform(8)];
    cmd_gen_data(&cfg).unwrap();
    // a file where the point directory should go makes that run fail
    let points = cfg.output.dir.join("points");
    fs::create_dir_all(&points).unwrap();
    fs::write(points.join("uniform-8-1-s0"), b"x").unwrap();
    let r = cmd_sweep(&cfg, false, &mut quiet()).unwrap();
    assert_eq!(r.failures(), 1);
    assert!(!r.rows[0].error.is_empty());
}

#[test]
fn empty_sweep_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.sweep.points.clear();
    assert!(matches!(cmd_sweep(&cfg, false, &mut quiet()), Err(AmqError::Config(_))));
}
