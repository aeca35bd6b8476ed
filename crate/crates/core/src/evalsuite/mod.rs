//! Linear evaluation and equivariance measurements for trained encoders.

mod equivariance;
mod metrics;
mod probe;

pub use equivariance::{
    equivariance_report, isolated_trace, per_augmentation_report, AugmentationKind, EquivarianceEntry,
    EquivarianceModel, EquivarianceReport, Metric, NetworkProbe, DEFAULT_REPORT_SAMPLES,
};
pub use metrics::{absolute_equivariance, cosine, relative_equivariance, RELATIVE_EPS};
pub use probe::{
    extract_features, fit_linear_classifier, linear_probe, probe_features, LinearClassifier, ProbeConfig, ProbeResult,
};
