//! Evaluation of saved runs, driven only by the run directory's contents.

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::data::{DatasetSplits, LabeledImages};
use super::run::{load_run, LoadedRun};
use crate::error::{Error, Result};
use crate::evalsuite::{equivariance_report, linear_probe, EquivarianceReport, NetworkProbe, ProbeConfig, ProbeResult};

pub const LINEAR_EVAL_FILE: &str = "linear_eval.json";
pub const EQUIVARIANCE_STEM: &str = "equivariance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEvalRecord {
    pub run: String,
    pub probe: ProbeConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub result: ProbeResult,
}

fn check_classes(run: &LoadedRun, data: &LabeledImages) -> Result<()> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(format!("no images to evaluate {}", run.config.name)));
    }
    Ok(())
}

/// Linear evaluation of the run's frozen encoder on `splits`; the record
/// is also written to the run directory.
pub fn evaluate_linear(run_dir: &Path, splits: &DatasetSplits, probe: &ProbeConfig) -> Result<LinearEvalRecord> {
    let run = load_run(run_dir, &Device::Cpu)?;
    check_classes(&run, &splits.train)?;
    check_classes(&run, &splits.test)?;
    let policy = run.config.policies().first;
    let result = linear_probe(
        &run.model,
        &splits.train.images,
        &splits.train.labels,
        &splits.test.images,
        &splits.test.labels,
        splits.train.num_classes(),
        &policy,
        probe,
    )?;
    let record = LinearEvalRecord {
        run: run.config.name.clone(),
        probe: *probe,
        train_images: splits.train.len(),
        test_images: splits.test.len(),
        result,
    };
    let path = run_dir.join(LINEAR_EVAL_FILE);
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

/// Per-augmentation equivariance of the run on `images`, written as CSV and
/// bar charts into the run directory.
pub fn evaluate_equivariance(run_dir: &Path, images: &LabeledImages, samples: usize, seed: u64) -> Result<EquivarianceReport> {
    let run = load_run(run_dir, &Device::Cpu)?;
    check_classes(&run, images)?;
    if !run.model.has_equimod() {
        return Err(Error::Config(format!("{} has no equivariance module to evaluate", run.config.name)));
    }
    let policy = run.config.policies().first;
    let probe = NetworkProbe {
        model: &run.model,
        channel_stats: run.config.dataset.channel_stats(),
    };
    let report = equivariance_report(&probe, &images.images, &policy, &run.layout, samples, seed)?;
    report.write_all(run_dir, EQUIVARIANCE_STEM)?;
    Ok(report)
}
