mod common;

use std::path::Path;

use candle_core::Device;
use common::*;
use equimod::evalsuite::ProbeConfig;
use equimod::expcli::*;
use equimod::seeding;
use equimod::trainer::{Checkpoint, MetricsRow};

fn labeled(n: usize, seed: u64) -> LabeledImages {
    let mut rng = seeding::rng(seed, &[]);
    LabeledImages {
        images: (0..n).map(|i| synthetic_image(i % 4, 4, 32, &mut rng)).collect(),
        labels: (0..n).map(|i| i % 4).collect(),
        class_names: (0..4).map(|c| format!("c{c}")).collect(),
    }
}

fn desk_config(name: &str, out: &Path) -> ExperimentConfig {
    let mut c = small_experiment("simclr-equimod-cifar10");
    c.name = name.into();
    c.schedule.epochs = 3;
    c.runtime.output_dir = out.to_path_buf();
    c.runtime.normalizer_samples = 500;
    c
}

fn metrics(dir: &Path) -> Vec<MetricsRow> {
    equimod::trainer::MetricsLog::read(&dir.join(METRICS_FILE)).unwrap()
}

#[test]
fn interrupted_run_resumes_to_the_same_weights() {
    let out = tempfile::tempdir().unwrap();
    let data = labeled(16, 1);

    let straight = desk_config("straight", out.path());
    let done = run_experiment(&straight, &data).unwrap();
    assert_eq!(done.status, RunStatus::Completed);
    assert_eq!(done.epochs_completed, 3);

    let mut parted = desk_config("parted", out.path());
    parted.runtime.stop_after_epochs = Some(1);
    let first = run_experiment(&parted, &data).unwrap();
    assert_eq!(first.status, RunStatus::Stopped);
    assert_eq!(first.epochs_completed, 1);
    let second = run_experiment(&parted, &data).unwrap();
    assert_eq!(second.epochs_completed, 2);
    parted.runtime.stop_after_epochs = None;
    let last = run_experiment(&parted, &data).unwrap();
    assert_eq!(last.status, RunStatus::Completed);
    assert_eq!(last.sessions.len(), 3);
    assert!(last.epochs_contiguous());
    assert_eq!(last.steps_completed, done.steps_completed);

    let rows = metrics(&parted.run_dir());
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..done.steps_completed).collect::<Vec<_>>());
    // throughput is wall-clock; everything else must match
    let strip = |rows: Vec<MetricsRow>| -> Vec<MetricsRow> { rows.into_iter().map(|r| MetricsRow { throughput: 0.0, ..r }).collect() };
    assert_eq!(strip(rows), strip(metrics(&straight.run_dir())));

    let a = Checkpoint::load(&straight.run_dir().join(CHECKPOINT_FILE), &Device::Cpu).unwrap();
    let b = Checkpoint::load(&parted.run_dir().join(CHECKPOINT_FILE), &Device::Cpu).unwrap();
    let (sa, sb) = (a.section("online."), b.section("online."));
    assert_eq!(sa.len(), sb.len());
    for (name, t) in &sa {
        let diff = (t - &sb[name]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0, "{name}");
    }
}

#[test]
fn completed_run_is_not_retrained() {
    let out = tempfile::tempdir().unwrap();
    let data = labeled(16, 2);
    let mut c = desk_config("again", out.path());
    c.schedule.epochs = 1;
    c.schedule.warmup_epochs = 0;
    let first = run_experiment(&c, &data).unwrap();
    let second = run_experiment(&c, &data).unwrap();
    assert_eq!(first, second);
    assert_eq!(metrics(&c.run_dir()).len() as u64, first.steps_completed);
}

#[test]
fn different_experiment_in_same_directory_is_refused() {
    let out = tempfile::tempdir().unwrap();
    let data = labeled(16, 3);
    let mut c = desk_config("clash", out.path());
    c.schedule.epochs = 1;
    c.schedule.warmup_epochs = 0;
    run_experiment(&c, &data).unwrap();
    c.loss.tau_prime = 0.5;
    let err = run_experiment(&c, &data).unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn lambda_zero_run_is_flagged_baseline_equivalent() {
    let out = tempfile::tempdir().unwrap();
    let data = labeled(16, 4);
    let mut c = desk_config("lambda0", out.path());
    c.schedule.epochs = 1;
    c.schedule.warmup_epochs = 0;
    c.set("loss.lambda", "0").unwrap();
    let m = run_experiment(&c, &data).unwrap();
    assert!(m.baseline_equivalent);
    let saved = RunManifest::load(&c.run_dir()).unwrap();
    assert!(saved.baseline_equivalent);
    assert_eq!(saved.config.loss.lambda, 0.0);
    c.set("loss.lambda", "1").unwrap();
    assert!(!c.is_baseline_equivalent());
}

#[test]
fn run_directory_is_self_contained_for_evaluation() {
    let out = tempfile::tempdir().unwrap();
    let data = labeled(24, 5);
    let mut c = desk_config("evaluable", out.path());
    c.schedule.epochs = 1;
    c.schedule.warmup_epochs = 0;
    run_experiment(&c, &data).unwrap();

    let loaded = load_run(&c.run_dir(), &Device::Cpu).unwrap();
    assert_eq!(loaded.config, ExperimentConfig::load(&c.run_dir().join(CONFIG_FILE)).unwrap());

    let splits = DatasetSplits {
        train: labeled(40, 6),
        test: labeled(20, 7),
    };
    let probe = ProbeConfig {
        epochs: 5,
        batch_size: 16,
        ..ProbeConfig::default()
    };
    let record = evaluate_linear(&c.run_dir(), &splits, &probe).unwrap();
    assert!((0.0..=100.0).contains(&record.result.top1));
    assert!(c.run_dir().join(LINEAR_EVAL_FILE).exists());

    let report = evaluate_equivariance(&c.run_dir(), &splits.test, 8, 1).unwrap();
    assert_eq!(report.entries.len(), 4);
    for suffix in [".csv", "_absolute.svg", "_relative.svg", "_absolute.png", "_relative.png"] {
        assert!(c.run_dir().join(format!("{EQUIVARIANCE_STEM}{suffix}")).exists(), "{suffix}");
    }
}

#[test]
fn simclr_preset_dump_matches_the_published_protocol() {
    let c = preset("simclr-cifar10").unwrap();
    assert_eq!(c.loss.tau, 0.5);
    assert_eq!(c.batch_size, 512);
    assert_eq!(c.schedule.epochs, 800);
    assert_eq!(c.optimizer.base_lr, 4.0);
    assert!(c.equimod.is_none());
    let e = preset("simclr-equimod-cifar10").unwrap();
    assert_eq!(e.loss.tau_prime, 0.2);
    assert_eq!(e.loss.lambda, 1.0);
    let text = e.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), e);
    for name in preset_names() {
        preset(name).unwrap().validate().unwrap();
    }
}
