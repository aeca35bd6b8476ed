use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Cifar10,
    Imagenet,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Cifar10 => "cifar10",
            Dataset::Imagenet => "imagenet",
        }
    }

    /// Network input resolution in pixels.
    pub fn resolution(self) -> u32 {
        match self {
            Dataset::Cifar10 => 32,
            Dataset::Imagenet => 224,
        }
    }

    /// Per-channel (mean, std) used to standardize network inputs.
    pub fn channel_stats(self) -> ([f32; 3], [f32; 3]) {
        match self {
            Dataset::Cifar10 => ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
            Dataset::Imagenet => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Dataset::Cifar10),
            "imagenet" => Ok(Dataset::Imagenet),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Simclr,
    Byol,
    Barlow,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Simclr => "simclr",
            Baseline::Byol => "byol",
            Baseline::Barlow => "barlow",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Baseline::Simclr),
            "byol" => Ok(Baseline::Byol),
            "barlow" => Ok(Baseline::Barlow),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// A (dataset, baseline) pair. Fixes which augmentations exist and
/// therefore the layout of the encoded trace vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecProfile {
    pub dataset: Dataset,
    pub baseline: Baseline,
}

impl CodecProfile {
    pub fn new(dataset: Dataset, baseline: Baseline) -> Self {
        Self { dataset, baseline }
    }

    /// Blur is dropped on CIFAR10 unless the baseline is BYOL.
    pub fn has_blur(&self) -> bool {
        self.dataset == Dataset::Imagenet || self.baseline == Baseline::Byol
    }

    pub fn has_solarize(&self) -> bool {
        self.baseline == Baseline::Byol
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.dataset, self.baseline)
    }

    pub fn parse_id(id: &str) -> Result<Self> {
        let (d, b) = id
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("malformed profile id '{id}'")))?;
        Ok(Self::new(d.parse()?, b.parse()?))
    }

    /// Ordered slot names of the raw encoding vector.
    pub fn layout(&self) -> Vec<&'static str> {
        let mut fields = vec!["hflip", "color_jitter", "grayscale"];
        if self.has_blur() {
            fields.push("blur");
        }
        if self.has_solarize() {
            fields.push("solarize");
        }
        fields.extend([
            "crop_x",
            "crop_y",
            "crop_width",
            "crop_height",
            "brightness",
            "contrast",
            "saturation",
            "hue",
            "order_0",
            "order_1",
            "order_2",
            "order_3",
        ]);
        if self.has_blur() {
            fields.push("sigma");
        }
        fields
    }

    pub fn encoding_len(&self) -> usize {
        15 + 2 * usize::from(self.has_blur()) + usize::from(self.has_solarize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

/// Jitter strengths; brightness, contrast and saturation factors are drawn
/// from `[max(0, 1 - s), 1 + s]`, hue from `[-hue, hue]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub probability: f64,
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub profile: CodecProfile,
    pub resolution: u32,
    pub crop: CropParams,
    pub hflip_probability: f64,
    pub jitter: JitterParams,
    pub grayscale_probability: f64,
    pub blur: Option<BlurParams>,
    pub solarize_probability: Option<f64>,
}

/// Which of the two views a policy generates. BYOL uses asymmetric blur and
/// solarize probabilities across the two views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    First,
    Second,
}

impl AugmentationPolicy {
    pub fn preset(profile: CodecProfile, view: View) -> Self {
        let crop = CropParams {
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        };
        let jitter = match profile.baseline {
            Baseline::Simclr => {
                // color distortion strength 1.0 on ImageNet, 0.5 on CIFAR10
                let s = match profile.dataset {
                    Dataset::Imagenet => 1.0,
                    Dataset::Cifar10 => 0.5,
                };
                JitterParams {
                    probability: 0.8,
                    brightness: 0.8 * s,
                    contrast: 0.8 * s,
                    saturation: 0.8 * s,
                    hue: 0.2 * s,
                }
            }
            Baseline::Byol | Baseline::Barlow => JitterParams {
                probability: 0.8,
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.2,
                hue: 0.1,
            },
        };
        let blur = profile.has_blur().then(|| {
            let probability = match (profile.baseline, view) {
                (Baseline::Simclr, _) => 0.5,
                (_, View::First) => 1.0,
                (_, View::Second) => 0.1,
            };
            BlurParams {
                probability,
                sigma: (0.1, 2.0),
            }
        });
        let solarize_probability = profile.has_solarize().then_some(match view {
            View::First => 0.0,
            View::Second => 0.2,
        });
        Self {
            profile,
            resolution: profile.dataset.resolution(),
            crop,
            hflip_probability: 0.5,
            jitter,
            grayscale_probability: 0.2,
            blur,
            solarize_probability,
        }
    }

    /// Same policy with every optional augmentation disabled.
    pub fn never_applied(mut self) -> Self {
        self.hflip_probability = 0.0;
        self.jitter.probability = 0.0;
        self.grayscale_probability = 0.0;
        if let Some(b) = self.blur.as_mut() {
            b.probability = 0.0;
        }
        if let Some(p) = self.solarize_probability.as_mut() {
            *p = 0.0;
        }
        self
    }

    /// Gaussian kernel size: about 10% of the output resolution, odd, at least 3.
    pub fn blur_kernel_size(&self) -> usize {
        let k = (self.resolution as usize / 10).max(3);
        if k % 2 == 0 {
            k + 1
        } else {
            k
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Policy(format!("{name} probability {p} outside [0, 1]")))
            }
        };
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Policy(format!("{name} range ({lo}, {hi}) is empty")))
            }
        };
        if self.resolution == 0 {
            return Err(Error::Policy("resolution must be positive".into()));
        }
        range("crop scale", self.crop.scale)?;
        range("crop ratio", self.crop.ratio)?;
        if self.crop.scale.0 <= 0.0 || self.crop.scale.1 > 1.0 || self.crop.ratio.0 <= 0.0 {
            return Err(Error::Policy("crop scale must lie in (0, 1] and ratio be positive".into()));
        }
        prob("h-flip", self.hflip_probability)?;
        prob("color jitter", self.jitter.probability)?;
        prob("grayscale", self.grayscale_probability)?;
        let j = &self.jitter;
        if [j.brightness, j.contrast, j.saturation, j.hue]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
            || j.hue > 0.5
        {
            return Err(Error::Policy(
                "jitter strengths must be non-negative and hue at most 0.5".into(),
            ));
        }
        match (&self.blur, self.profile.has_blur()) {
            (Some(b), true) => {
                prob("blur", b.probability)?;
                range("blur sigma", b.sigma)?;
                if b.sigma.0 <= 0.0 {
                    return Err(Error::Policy("blur sigma must be positive".into()));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Policy(format!(
                    "blur is not part of the {} profile",
                    self.profile.id()
                )))
            }
            (None, true) => {
                return Err(Error::Policy(format!(
                    "the {} profile requires blur parameters",
                    self.profile.id()
                )))
            }
        }
        match (self.solarize_probability, self.profile.has_solarize()) {
            (Some(p), true) => prob("solarize", p)?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Policy(format!(
                    "solarize is only used with BYOL, not {}",
                    self.profile.id()
                )))
            }
            (None, true) => {
                return Err(Error::Policy("the BYOL profile requires solarize".into()))
            }
        }
        Ok(())
    }
}

/// Policies for the two views of every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub first: AugmentationPolicy,
    pub second: AugmentationPolicy,
}

impl PolicyPair {
    pub fn preset(profile: CodecProfile) -> Self {
        Self {
            first: AugmentationPolicy::preset(profile, View::First),
            second: AugmentationPolicy::preset(profile, View::Second),
        }
    }

    pub fn with_resolution(mut self, resolution: u32) -> Self {
        self.first.resolution = resolution;
        self.second.resolution = resolution;
        self
    }

    pub fn get(&self, view: View) -> &AugmentationPolicy {
        match view {
            View::First => &self.first,
            View::Second => &self.second,
        }
    }

    pub fn profile(&self) -> CodecProfile {
        self.first.profile
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.first.profile != self.second.profile || self.first.resolution != self.second.resolution {
            return Err(Error::Policy("both views must share profile and resolution".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [CodecProfile; 6] = [
        CodecProfile { dataset: Dataset::Cifar10, baseline: Baseline::Simclr },
        CodecProfile { dataset: Dataset::Cifar10, baseline: Baseline::Byol },
        CodecProfile { dataset: Dataset::Cifar10, baseline: Baseline::Barlow },
        CodecProfile { dataset: Dataset::Imagenet, baseline: Baseline::Simclr },
        CodecProfile { dataset: Dataset::Imagenet, baseline: Baseline::Byol },
        CodecProfile { dataset: Dataset::Imagenet, baseline: Baseline::Barlow },
    ];

    #[test]
    fn layout_lengths() {
        let imagenet_byol = CodecProfile::new(Dataset::Imagenet, Baseline::Byol);
        let cifar_simclr = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        assert_eq!(imagenet_byol.encoding_len(), 18);
        assert_eq!(cifar_simclr.encoding_len(), 15);
        for p in ALL {
            assert_eq!(p.layout().len(), p.encoding_len(), "{}", p.id());
        }
    }

    #[test]
    fn blur_and_solarize_presence() {
        let cifar_barlow = CodecProfile::new(Dataset::Cifar10, Baseline::Barlow);
        assert!(!cifar_barlow.has_blur());
        assert!(!cifar_barlow.has_solarize());
        let cifar_byol = CodecProfile::new(Dataset::Cifar10, Baseline::Byol);
        assert!(cifar_byol.has_blur() && cifar_byol.has_solarize());
        let in_simclr = CodecProfile::new(Dataset::Imagenet, Baseline::Simclr);
        assert!(in_simclr.has_blur() && !in_simclr.has_solarize());
    }

    #[test]
    fn presets_are_valid() {
        for p in ALL {
            PolicyPair::preset(p).validate().unwrap();
            assert_eq!(CodecProfile::parse_id(&p.id()).unwrap(), p);
        }
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let profile = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        let mut p = AugmentationPolicy::preset(profile, View::First);
        p.hflip_probability = 1.5;
        assert!(p.validate().is_err());

        let mut p = AugmentationPolicy::preset(profile, View::First);
        p.crop.scale = (0.9, 0.2);
        assert!(p.validate().is_err());

        let mut p = AugmentationPolicy::preset(profile, View::First);
        p.solarize_probability = Some(0.2);
        assert!(p.validate().is_err());
    }

    #[test]
    fn blur_kernel_is_odd() {
        let p = AugmentationPolicy::preset(CodecProfile::new(Dataset::Imagenet, Baseline::Simclr), View::First);
        assert_eq!(p.blur_kernel_size(), 23);
        let p = AugmentationPolicy::preset(CodecProfile::new(Dataset::Cifar10, Baseline::Byol), View::First);
        assert_eq!(p.blur_kernel_size(), 3);
    }
}
