//! Run lifecycle: a run directory holds `config.toml`, `layout.toml`,
//! `manifest.json`, `metrics.csv` and `checkpoint.safetensors`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::LabeledImages;
use crate::augcodec::{fit_profile_normalizer, ImageSize, LayoutDescriptor};
use crate::error::{Error, Result};
use crate::networks::EquiModModel;
use crate::seeding;
use crate::trainer::{Checkpoint, LossValues, MetricsLog, MetricsRow, Trainer, METRICS_COLUMNS, METRICS_SCHEMA_VERSION};

pub const CONFIG_FILE: &str = "config.toml";
pub const LAYOUT_FILE: &str = "layout.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

const SHUFFLE_STREAM: u64 = 0x5b0f_f1e5;
const NORMALIZER_STREAM: u64 = 0x4e4f_524d;
const MAX_SIZE_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    /// Ended early on request; resumable.
    Stopped,
    Completed,
    Failed,
}

/// One process lifetime of a run, covering epochs `[start_epoch, end_epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub started_at: String,
    pub finished_at: Option<String>,
    pub start_epoch: u64,
    pub end_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub l_inv: f64,
    pub l_equi: Option<f64>,
    pub l_total: f64,
}

impl From<LossValues> for FinalMetrics {
    fn from(v: LossValues) -> Self {
        Self {
            l_inv: v.invariance,
            l_equi: v.equivariance,
            l_total: v.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub status: RunStatus,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub layout: LayoutDescriptor,
    pub metrics_schema_version: u32,
    pub metrics_columns: Vec<String>,
    /// λ = 0 or no equivariance module: the objective is the plain baseline.
    pub baseline_equivalent: bool,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub sessions: Vec<Session>,
    pub steps_per_epoch: u64,
    pub epochs_completed: u64,
    pub steps_completed: u64,
    pub final_metrics: Option<FinalMetrics>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Writes through a temporary file so readers never see a partial manifest.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.partial"));
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(&tmp, s).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// True when the sessions tile `[0, epochs_completed)` without gaps or overlap.
    pub fn epochs_contiguous(&self) -> bool {
        let mut next = 0;
        for s in &self.sessions {
            if s.start_epoch != next || s.end_epoch < s.start_epoch {
                return false;
            }
            next = s.end_epoch;
        }
        next == self.epochs_completed
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Fields that must agree for a run to resume from an existing directory.
fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let strip = |c: &ExperimentConfig| ExperimentConfig {
        runtime: Default::default(),
        ..c.clone()
    };
    strip(a) == strip(b) && a.runtime.accumulation_steps == b.runtime.accumulation_steps && a.runtime.precision == b.runtime.precision
}

fn fit_layout(config: &ExperimentConfig, data: &LabeledImages) -> Result<LayoutDescriptor> {
    let step = (data.len() / MAX_SIZE_SAMPLES).max(1);
    let sizes: Vec<ImageSize> = data
        .images
        .iter()
        .step_by(step)
        .map(|i| ImageSize::new(i.width(), i.height()))
        .collect();
    let normalizer = fit_profile_normalizer(
        &config.policies(),
        &sizes,
        config.runtime.normalizer_samples,
        seeding::derive_seed(config.seed, &[NORMALIZER_STREAM]),
    )?;
    LayoutDescriptor::new(config.profile(), normalizer)
}

fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeding::rng(seed, &[SHUFFLE_STREAM, epoch]));
    order
}

/// Drops metric rows logged after the checkpoint a resumed run restarts from.
fn truncate_metrics(path: &Path, keep_before_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = MetricsLog::read(path)?;
    if rows.iter().all(|r| r.step < keep_before_step) {
        return Ok(());
    }
    std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    let mut log = MetricsLog::open(path)?;
    for r in rows.iter().filter(|r| r.step < keep_before_step) {
        log.append(r)?;
    }
    Ok(())
}

fn save_checkpoint(trainer: &Trainer, config: &ExperimentConfig, epoch: u64, run_dir: &Path) -> Result<()> {
    let meta = BTreeMap::from([
        ("experiment".to_string(), config.to_toml()?),
        ("epoch".to_string(), epoch.to_string()),
    ]);
    trainer.checkpoint(meta)?.save(&run_dir.join(CHECKPOINT_FILE))
}

/// Trains `config` on `train`, resuming from the run directory when it
/// holds an unfinished run of the same experiment.
pub fn run_experiment(config: &ExperimentConfig, train: &LabeledImages) -> Result<RunManifest> {
    config.validate()?;
    train.validate()?;
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let data = match config.runtime.train_subset {
        Some(n) => train.clone().take(n),
        None => train.clone(),
    };
    let steps_per_epoch = (data.len() / config.batch_size) as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training images cannot fill one batch of {}",
            data.len(),
            config.batch_size
        )));
    }

    let checkpoint_path = run_dir.join(CHECKPOINT_FILE);
    let previous = RunManifest::load(&run_dir).ok();
    let resume = match &previous {
        Some(m) if m.status == RunStatus::Completed && same_experiment(&m.config, config) => {
            info!("{} already completed", config.name);
            return Ok(m.clone());
        }
        Some(m) if same_experiment(&m.config, config) && checkpoint_path.exists() => true,
        Some(_) if checkpoint_path.exists() => {
            return Err(Error::Config(format!(
                "{} holds a different experiment; choose another name or output directory",
                run_dir.display()
            )))
        }
        _ => false,
    };

    let device = Device::Cpu;
    let (mut manifest, layout) = if resume {
        let m = previous.expect("resume implies a manifest");
        let layout = LayoutDescriptor::load(&run_dir.join(LAYOUT_FILE))?;
        (m, layout)
    } else {
        let layout = fit_layout(config, &data)?;
        config.save(&run_dir.join(CONFIG_FILE))?;
        layout.save(&run_dir.join(LAYOUT_FILE))?;
        let metrics = run_dir.join(METRICS_FILE);
        if metrics.exists() {
            std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
        }
        let m = RunManifest {
            name: config.name.clone(),
            status: RunStatus::Running,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            layout: layout.clone(),
            metrics_schema_version: METRICS_SCHEMA_VERSION,
            metrics_columns: METRICS_COLUMNS.iter().map(|s| s.to_string()).collect(),
            baseline_equivalent: config.is_baseline_equivalent(),
            started_at: now(),
            finished_at: None,
            sessions: Vec::new(),
            steps_per_epoch,
            epochs_completed: 0,
            steps_completed: 0,
            final_metrics: None,
            error: None,
        };
        (m, layout)
    };

    let mut trainer = Trainer::new(
        config.model_config(),
        config.trainer_config(),
        config.policies(),
        layout,
        steps_per_epoch,
        config.seed,
        config.runtime.precision.dtype(),
        &device,
    )?;
    if resume {
        trainer.restore(&Checkpoint::load(&checkpoint_path, &device)?)?;
        info!("resuming {} at step {}", config.name, trainer.step_index());
    }
    truncate_metrics(&run_dir.join(METRICS_FILE), trainer.step_index())?;

    let start_epoch = trainer.step_index() / steps_per_epoch;
    manifest.config = config.clone();
    manifest.status = RunStatus::Running;
    manifest.error = None;
    manifest.epochs_completed = start_epoch;
    manifest.steps_completed = trainer.step_index();
    manifest.sessions.retain(|s| s.start_epoch < start_epoch);
    if let Some(last) = manifest.sessions.last_mut() {
        last.end_epoch = last.end_epoch.min(start_epoch);
    }
    manifest.sessions.push(Session {
        started_at: now(),
        finished_at: None,
        start_epoch,
        end_epoch: start_epoch,
    });
    manifest.save(&run_dir)?;

    let mut metrics = MetricsLog::open(&run_dir.join(METRICS_FILE))?;
    let batch = config.batch_size;
    let epochs = config.schedule.epochs;
    let mut session_epochs = 0;
    let mut session_steps = 0;
    for epoch in start_epoch..epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        let first = trainer.step_index() % steps_per_epoch;
        let mut interrupted = false;
        for s in first..steps_per_epoch {
            let idx = &order[s as usize * batch..(s as usize + 1) * batch];
            let images = data.gather(idx);
            let outcome = match trainer.step(&images) {
                Ok(o) => o,
                Err(e) => {
                    manifest.status = RunStatus::Failed;
                    manifest.error = Some(e.to_string());
                    manifest.finished_at = Some(now());
                    manifest.save(&run_dir)?;
                    return Err(e);
                }
            };
            metrics.append(&MetricsRow {
                step: outcome.step,
                epoch,
                lr: outcome.lr,
                l_inv: outcome.losses.invariance,
                l_equi: outcome.losses.equivariance,
                l_total: outcome.losses.total,
                throughput: outcome.images_per_second,
            })?;
            manifest.final_metrics = Some(outcome.losses.into());
            manifest.steps_completed = trainer.step_index();
            session_steps += 1;
            if config.runtime.max_steps.is_some_and(|m| session_steps >= m) && s + 1 < steps_per_epoch {
                interrupted = true;
                break;
            }
        }
        if interrupted {
            save_checkpoint(&trainer, config, epoch, &run_dir)?;
            manifest.status = RunStatus::Stopped;
            manifest.save(&run_dir)?;
            return Ok(manifest);
        }
        manifest.epochs_completed = epoch + 1;
        if let Some(session) = manifest.sessions.last_mut() {
            session.end_epoch = epoch + 1;
        }
        session_epochs += 1;
        let stop = config.runtime.stop_after_epochs.is_some_and(|k| session_epochs >= k)
            || config.runtime.max_steps.is_some_and(|m| session_steps >= m);
        let last = epoch + 1 == epochs;
        if last || stop || (epoch + 1) % config.runtime.checkpoint_every_epochs == 0 {
            save_checkpoint(&trainer, config, epoch + 1, &run_dir)?;
        }
        if stop && !last {
            if let Some(session) = manifest.sessions.last_mut() {
                session.finished_at = Some(now());
            }
            manifest.status = RunStatus::Stopped;
            manifest.save(&run_dir)?;
            info!("{} stopped after epoch {}", config.name, epoch + 1);
            return Ok(manifest);
        }
        manifest.save(&run_dir)?;
    }
    let finished = now();
    if let Some(s) = manifest.sessions.last_mut() {
        s.finished_at = Some(finished.clone());
    }
    manifest.status = RunStatus::Completed;
    manifest.finished_at = Some(finished);
    manifest.save(&run_dir)?;
    if manifest.final_metrics.is_none() {
        warn!("{} completed without training steps", config.name);
    }
    Ok(manifest)
}

/// Everything needed to evaluate a finished (or stopped) run.
pub struct LoadedRun {
    pub run_dir: PathBuf,
    pub config: ExperimentConfig,
    pub layout: LayoutDescriptor,
    pub model: EquiModModel,
}

pub fn load_run(run_dir: &Path, device: &Device) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let layout = LayoutDescriptor::load(&run_dir.join(LAYOUT_FILE))?;
    let checkpoint = Checkpoint::load(&run_dir.join(CHECKPOINT_FILE), device)?;
    let model = EquiModModel::new(config.model_config(), config.seed, config.runtime.precision.dtype(), device)?;
    let online: std::collections::HashMap<_, _> = checkpoint.section("online.").into_iter().collect();
    model.store().load(&online, "")?;
    Ok(LoadedRun {
        run_dir: run_dir.to_path_buf(),
        config,
        layout,
        model,
    })
}
