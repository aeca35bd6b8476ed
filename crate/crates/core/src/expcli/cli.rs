//! Command-line front end. Exit codes: 0 on success, 1 for configuration
//! errors (including bad arguments), 2 for runtime failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use super::ablation::{run_ablation_grid, AblationAxis};
use super::config::ExperimentConfig;
use super::data::{load_dataset, write_mini_imagenet, write_synthetic_cifar10, DatasetSplits};
use super::evaluate::{evaluate_equivariance, evaluate_linear};
use super::presets::{preset, preset_names};
use super::run::{run_experiment, RunStatus};
use crate::augcodec::Dataset;
use crate::error::{Error, Result};
use crate::evalsuite::{ProbeConfig, DEFAULT_REPORT_SAMPLES};

pub const DATA_ROOT_ENV: &str = "EQUIMOD_DATA_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "equimod", version, about = "Self-supervised training with an equivariance module")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) one experiment.
    Train {
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Linear evaluation of a run's frozen encoder.
    EvalLinear {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Per-augmentation absolute and relative equivariance of a run.
    EvalEquivariance {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_REPORT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and linearly evaluate every cell of an ablation axis.
    Ablate {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// head-depth, predictor-shape, aug-projector, lambda, tau-prime or batch.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Print the resolved experiment configuration (or the preset names).
    DumpConfig {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        list: bool,
    },
    /// Write a synthetic dataset in the CIFAR-10 or ImageNet layout.
    Synthesize {
        #[arg(long)]
        dataset: Dataset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Named preset, e.g. simclr-equimod-cifar10.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Experiment TOML file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set equimod.predictor.hidden=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_prime: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub stop_after_epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: u64,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    pub probe_batch_size: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    pub probe_lr: f64,
    /// Use only the first `n` test images.
    #[arg(long)]
    pub test_subset: Option<usize>,
}

impl ProbeArgs {
    fn config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            lr: self.probe_lr,
            ..ProbeConfig::default()
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_literal(p: &Path) -> String {
    toml_string(&p.to_string_lossy())
}

impl ExperimentArgs {
    /// Base config with `--set` overrides first, then the named flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), None) => preset(name)?,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            _ => return Err(Error::Config("pass exactly one of --preset or --config".into())),
        };
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
            config.set(key.trim(), value.trim())?;
        }
        let named: [(&str, Option<String>); 15] = [
            ("name", self.name.as_deref().map(toml_string)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("schedule.epochs", self.epochs.map(|v| v.to_string())),
            ("optimizer.base_lr", self.lr.map(|v| format!("{v:?}"))),
            ("loss.lambda", self.lambda.map(|v| format!("{v:?}"))),
            ("loss.tau", self.tau.map(|v| format!("{v:?}"))),
            ("loss.tau_prime", self.tau_prime.map(|v| format!("{v:?}"))),
            ("runtime.output_dir", self.output_dir.as_deref().map(path_literal)),
            ("runtime.data_root", self.data_root.as_deref().map(path_literal)),
            ("runtime.accumulation_steps", self.accumulation_steps.map(|v| v.to_string())),
            ("runtime.threads", self.threads.map(|v| v.to_string())),
            ("runtime.train_subset", self.train_subset.map(|v| v.to_string())),
            ("runtime.stop_after_epochs", self.stop_after_epochs.map(|v| v.to_string())),
            ("runtime.max_steps", self.max_steps.map(|v| v.to_string())),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        Ok(config)
    }
}

fn data_root(explicit: Option<&Path>, config: Option<&ExperimentConfig>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.and_then(|c| c.runtime.data_root.clone()))
        .ok_or_else(|| Error::Config(format!("no dataset location: pass --data-root or set {DATA_ROOT_ENV}")))
}

fn load_splits(config: &ExperimentConfig, root: &Path) -> Result<DatasetSplits> {
    info!("loading {} from {}", config.dataset, root.display());
    load_dataset(config.dataset, root)
}

fn init_threads(config: &ExperimentConfig) {
    if let Some(n) = config.runtime.threads {
        // Fails only when a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn train_and_probe(config: &ExperimentConfig, splits: &DatasetSplits, probe: &ProbeArgs) -> Result<f64> {
    let manifest = run_experiment(config, &splits.train)?;
    if manifest.status != RunStatus::Completed {
        return Err(Error::Precondition(format!("{} stopped before completion", config.name)));
    }
    let mut eval = splits.clone();
    if let Some(n) = probe.test_subset {
        eval.test = eval.test.take(n);
    }
    if let Some(n) = config.runtime.train_subset {
        eval.train = eval.train.take(n);
    }
    Ok(evaluate_linear(&config.run_dir(), &eval, &probe.config())?.result.top1)
}

/// Runs a parsed command, returning text for standard output.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { experiment } => {
            let config = experiment.resolve()?;
            init_threads(&config);
            let root = data_root(experiment.data_root.as_deref(), Some(&config))?;
            let splits = load_splits(&config, &root)?;
            let m = run_experiment(&config, &splits.train)?;
            Ok(format!(
                "{}: {:?} after {} epochs ({} steps) in {}",
                m.name,
                m.status,
                m.epochs_completed,
                m.steps_completed,
                config.run_dir().display()
            ))
        }
        Command::EvalLinear { run, data_root: root, probe } => {
            let config = ExperimentConfig::load(&run.join(super::run::CONFIG_FILE))?;
            let root = data_root(root.as_deref(), Some(&config))?;
            let mut splits = load_splits(&config, &root)?;
            if let Some(n) = probe.test_subset {
                splits.test = splits.test.take(n);
            }
            if let Some(n) = config.runtime.train_subset {
                splits.train = splits.train.take(n);
            }
            let r = evaluate_linear(&run, &splits, &probe.config())?;
            Ok(format!("{}: top-1 {:.2}%, top-5 {:.2}%", r.run, r.result.top1, r.result.top5))
        }
        Command::EvalEquivariance {
            run,
            data_root: root,
            samples,
            seed,
        } => {
            let config = ExperimentConfig::load(&run.join(super::run::CONFIG_FILE))?;
            let root = data_root(root.as_deref(), Some(&config))?;
            let splits = load_splits(&config, &root)?;
            let report = evaluate_equivariance(&run, &splits.test, samples, seed)?;
            let mut out = format!("{:<14}{:>12}{:>12}\n", "augmentation", "absolute", "relative");
            for e in &report.entries {
                out += &format!("{:<14}{:>12.4}{:>12.4}\n", e.augmentation, e.absolute, e.relative);
            }
            Ok(out)
        }
        Command::Ablate { experiment, axis, probe } => {
            let axis: AblationAxis = axis.parse()?;
            let base = experiment.resolve()?;
            init_threads(&base);
            let root = data_root(experiment.data_root.as_deref(), Some(&base))?;
            let splits = load_splits(&base, &root)?;
            let table = run_ablation_grid(&base, axis, |c| train_and_probe(c, &splits, &probe));
            let dir = &base.runtime.output_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            table.write_csv(&dir.join(format!("{}-{}.csv", base.name, axis.key())))?;
            let md = table.to_markdown();
            let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                return Err(Error::Precondition(format!("{failed} ablation cells failed\n{md}")));
            }
            Ok(md)
        }
        Command::DumpConfig { experiment, list } => {
            if list {
                return Ok(preset_names().collect::<Vec<_>>().join("\n"));
            }
            experiment.resolve()?.to_toml()
        }
        Command::Synthesize { dataset, out, seed } => {
            match dataset {
                Dataset::Cifar10 => write_synthetic_cifar10(&out, seed)?,
                Dataset::Imagenet => write_mini_imagenet(&out, 10, 40, 10, 96, seed)?,
            }
            Ok(format!("wrote synthetic {dataset} to {}", out.display()))
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args`, runs the command and reports on stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("equimod").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn named_flags_and_overrides_resolve() {
        let Command::DumpConfig { experiment, .. } = parse(&[
            "dump-config",
            "--preset",
            "simclr-equimod-cifar10",
            "--set",
            "equimod.aug_projector.out=16",
            "--lambda",
            "0",
            "--batch-size",
            "256",
            "--name",
            "123",
        ])
        .command
        else {
            unreachable!()
        };
        let c = experiment.resolve().unwrap();
        assert_eq!(c.loss.lambda, 0.0);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.name, "123");
        assert_eq!(c.equimod.unwrap().aug_projector.out, 16);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["equimod", "dump-config", "--preset", "simclr-cifar10"]), EXIT_OK);
        assert_eq!(main_with_args(["equimod", "dump-config", "--preset", "nope"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["equimod", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(
            main_with_args(["equimod", "dump-config", "--preset", "simclr-cifar10", "--set", "loss.bogus=1"]),
            EXIT_CONFIG
        );
        let missing = tempfile::tempdir().unwrap();
        let run = missing.path().join("absent");
        assert_eq!(
            main_with_args([
                "equimod",
                "eval-linear",
                "--run",
                run.to_str().unwrap(),
                "--data-root",
                "/nonexistent"
            ]),
            EXIT_RUNTIME
        );
    }
}
