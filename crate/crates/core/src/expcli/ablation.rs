//! Ablation grids over the equivariance module's architecture and
//! hyperparameters. Each cell is a full config; the grid runner keeps going
//! when a cell fails.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::networks::{AugProjectorConfig, EquiModConfig, HeadConfig, PredictorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    HeadDepth,
    PredictorShape,
    AugProjector,
    Lambda,
    TauPrime,
    Batch,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::HeadDepth,
        AblationAxis::PredictorShape,
        AblationAxis::AugProjector,
        AblationAxis::Lambda,
        AblationAxis::TauPrime,
        AblationAxis::Batch,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::HeadDepth => "head-depth",
            AblationAxis::PredictorShape => "predictor-shape",
            AblationAxis::AugProjector => "aug-projector",
            AblationAxis::Lambda => "lambda",
            AblationAxis::TauPrime => "tau-prime",
            AblationAxis::Batch => "batch",
        }
    }

    /// First column header of the matching results table.
    pub fn header(self) -> &'static str {
        match self {
            AblationAxis::HeadDepth => "Layers in g′_φ′",
            AblationAxis::PredictorShape => "Layers in u_ψ",
            AblationAxis::AugProjector => "Layers in the projection of t",
            AblationAxis::Lambda => "λ Factor",
            AblationAxis::TauPrime => "Temperature τ′",
            AblationAxis::Batch => "Batch size",
        }
    }

    /// True for axes that change the network rather than the training setup.
    pub fn is_architectural(self) -> bool {
        matches!(
            self,
            AblationAxis::HeadDepth | AblationAxis::PredictorShape | AblationAxis::AugProjector
        )
    }

    pub fn cells(self) -> Vec<AblationCell> {
        let head = |layers| CellChange::EquiHead(HeadConfig { layers, ..HeadConfig::equivariance() });
        let aug = |layers, hidden, out| CellChange::AugProjector(AugProjectorConfig { layers, hidden, out });
        let cells: Vec<(&str, CellChange)> = match self {
            AblationAxis::HeadDepth => vec![
                ("None", head(0)),
                ("1", head(1)),
                ("2", head(2)),
                ("3 †", head(3)),
            ],
            AblationAxis::PredictorShape => vec![
                ("1 †", CellChange::Predictor(PredictorConfig { layers: 1, hidden: 0 })),
                ("2 (H: 16-d)", CellChange::Predictor(PredictorConfig { layers: 2, hidden: 16 })),
                ("2 (H: 128-d)", CellChange::Predictor(PredictorConfig { layers: 2, hidden: 128 })),
                ("2 (H: 2048-d)", CellChange::Predictor(PredictorConfig { layers: 2, hidden: 2048 })),
            ],
            AblationAxis::AugProjector => vec![
                ("None", aug(0, 0, 0)),
                ("1 (O: 16-d)", aug(1, 0, 16)),
                ("1 (O: 128-d) †", aug(1, 0, 128)),
                ("1 (O: 2048-d)", aug(1, 0, 2048)),
                ("2 (H: 16-d; O: 128-d)", aug(2, 16, 128)),
                ("2 (H: 128-d; O: 128-d)", aug(2, 128, 128)),
                ("2 (H: 2048-d; O: 128-d)", aug(2, 2048, 128)),
            ],
            AblationAxis::Lambda => [("0", 0.0), ("0.1", 0.1), ("0.2", 0.2), ("0.5", 0.5), ("1 †", 1.0), ("2", 2.0), ("5", 5.0), ("10", 10.0)]
                .into_iter()
                .map(|(l, v)| (l, CellChange::Lambda(v)))
                .collect(),
            AblationAxis::TauPrime => [("0.05", 0.05), ("0.1", 0.1), ("0.2 †", 0.2), ("0.5", 0.5), ("1", 1.0)]
                .into_iter()
                .map(|(l, v)| (l, CellChange::TauPrime(v)))
                .collect(),
            AblationAxis::Batch => [("64", 64), ("128", 128), ("256", 256), ("512 †", 512), ("1024", 1024)]
                .into_iter()
                .map(|(l, v)| (l, CellChange::BatchSize(v)))
                .collect(),
        };
        cells
            .into_iter()
            .map(|(label, change)| AblationCell {
                label: label.to_string(),
                change,
            })
            .collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "λ" => "lambda",
            "τ′" | "tau'" => "tau-prime",
            "batch-size" => "batch",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|a| a.key() == alias)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellChange {
    EquiHead(HeadConfig),
    Predictor(PredictorConfig),
    AugProjector(AugProjectorConfig),
    Lambda(f64),
    TauPrime(f64),
    BatchSize(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    /// Row label as printed in the results table.
    pub label: String,
    pub change: CellChange,
}

impl AblationCell {
    /// Run-directory-safe name suffix.
    pub fn slug(&self) -> String {
        let mut out = String::new();
        for c in self.label.trim_end_matches(" †").chars() {
            if c.is_ascii_alphanumeric() || c == '.' {
                out.push(c.to_ascii_lowercase());
            } else if !out.ends_with('-') {
                out.push('-');
            }
        }
        out.trim_matches('-').to_string()
    }

    /// `base` with this cell's change applied. The equivariance module is
    /// added with default settings when `base` lacks one.
    pub fn apply(&self, base: &ExperimentConfig, axis: AblationAxis) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        c.name = format!("{}-{}-{}", base.name, axis.key(), self.slug());
        let equimod = c.equimod.get_or_insert_with(EquiModConfig::default);
        match self.change {
            CellChange::EquiHead(h) => equimod.equi_head = h,
            CellChange::Predictor(p) => equimod.predictor = p,
            CellChange::AugProjector(a) => equimod.aug_projector = a,
            CellChange::Lambda(v) => c.loss.lambda = v,
            CellChange::TauPrime(v) => c.loss.tau_prime = v,
            CellChange::BatchSize(b) => c.batch_size = b,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub run: String,
    /// Linear-evaluation top-1 in percent.
    pub top1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub header: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn labels(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | Top-1 |\n|---|---|\n", self.header);
        for r in &self.rows {
            let cell = match (&r.top1, &r.error) {
                (Some(v), _) => format!("{v:.2}"),
                (None, Some(e)) => format!("failed: {}", e.replace('|', "/")),
                (None, None) => "-".to_string(),
            };
            s += &format!("| {} | {cell} |\n", r.label);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record([self.header.as_str(), "Top-1", "run", "error"]).map_err(io)?;
        for r in &self.rows {
            let top1 = r.top1.map(|v| format!("{v:.4}")).unwrap_or_default();
            w.write_record([r.label.as_str(), &top1, &r.run, r.error.as_deref().unwrap_or("")])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `run_cell` on every cell of `axis`, in table order. A cell that
/// fails to build or run is recorded with its error and the grid moves on.
pub fn run_ablation_grid<F>(base: &ExperimentConfig, axis: AblationAxis, mut run_cell: F) -> AblationTable
where
    F: FnMut(&ExperimentConfig) -> Result<f64>,
{
    let rows = axis
        .cells()
        .into_iter()
        .map(|cell| {
            let outcome = cell.apply(base, axis).and_then(|c| {
                let name = c.name.clone();
                run_cell(&c).map(|v| (name, v))
            });
            match outcome {
                Ok((run, top1)) => AblationRow {
                    label: cell.label,
                    run,
                    top1: Some(top1),
                    error: None,
                },
                Err(e) => {
                    warn!("ablation cell '{}' failed: {e}", cell.label);
                    AblationRow {
                        run: format!("{}-{}-{}", base.name, axis.key(), cell.slug()),
                        label: cell.label,
                        top1: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationTable {
        axis,
        header: axis.header().to_string(),
        rows,
    }
}
