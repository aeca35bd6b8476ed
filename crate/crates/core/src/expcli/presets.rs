//! Every published training configuration ships as a named preset file.

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../presets/", $name, ".toml")))),*
        ];
    };
}

presets!(
    "simclr-cifar10",
    "simclr-equimod-cifar10",
    "simclr-imagenet",
    "simclr-equimod-imagenet",
    "byol-cifar10",
    "byol-equimod-cifar10",
    "byol-imagenet",
    "byol-equimod-imagenet",
    "barlow-cifar10",
    "barlow-equimod-cifar10",
);

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            let known: Vec<&str> = preset_names().collect();
            Error::Config(format!("unknown preset '{name}'; known presets: {}", known.join(", ")))
        })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(preset_source(name)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_is_named_after_its_file() {
        for name in preset_names() {
            let c = preset(name).unwrap();
            assert_eq!(c.name, name);
            assert_eq!(c.equimod.is_some(), name.contains("equimod"));
        }
        assert!(preset("simclr-mnist").is_err());
    }
}
