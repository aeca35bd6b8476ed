use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{AugmentationPolicy, CodecProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// Crop rectangle in the source image's pixel frame (before resizing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRect {
    pub fn full(size: ImageSize) -> Self {
        Self {
            x: 0,
            y: 0,
            width: size.width,
            height: size.height,
        }
    }

    /// Largest centered square.
    pub fn center_square(size: ImageSize) -> Self {
        let side = size.width.min(size.height);
        Self {
            x: (size.width - side) / 2,
            y: (size.height - side) / 2,
            width: side,
            height: side,
        }
    }

    pub fn fits(&self, size: ImageSize) -> bool {
        self.width > 0
            && self.height > 0
            && u64::from(self.x) + u64::from(self.width) <= u64::from(size.width)
            && u64::from(self.y) + u64::from(self.height) <= u64::from(size.height)
    }
}

/// Color-jitter operations, indexed as in the encoding's order slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterOp {
    Brightness = 0,
    Contrast = 1,
    Saturation = 2,
    Hue = 3,
}

impl JitterOp {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(JitterOp::Brightness),
            1 => Some(JitterOp::Contrast),
            2 => Some(JitterOp::Saturation),
            3 => Some(JitterOp::Hue),
            _ => None,
        }
    }
}

pub const DEFAULT_JITTER_ORDER: [u8; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub applied: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Operation indices in application order.
    pub order: [u8; 4],
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            applied: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: DEFAULT_JITTER_ORDER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlur {
    pub applied: bool,
    pub sigma: f64,
}

impl GaussianBlur {
    pub const OFF: GaussianBlur = GaussianBlur {
        applied: false,
        sigma: 0.0,
    };
}

/// Everything needed to re-apply one sampled transformation.
///
/// `blur` and `solarize` are `None` when the profile does not contain that
/// augmentation at all, which is distinct from "present but not triggered".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationTrace {
    pub crop: CropRect,
    pub hflip: bool,
    pub jitter: ColorJitter,
    pub grayscale: bool,
    pub blur: Option<GaussianBlur>,
    pub solarize: Option<bool>,
}

impl AugmentationTrace {
    /// Crop only, every optional augmentation off.
    pub fn identity(profile: CodecProfile, crop: CropRect) -> Self {
        Self {
            crop,
            hflip: false,
            jitter: ColorJitter::default(),
            grayscale: false,
            blur: profile.has_blur().then_some(GaussianBlur::OFF),
            solarize: profile.has_solarize().then_some(false),
        }
    }

    pub fn matches_profile(&self, profile: CodecProfile) -> bool {
        self.blur.is_some() == profile.has_blur() && self.solarize.is_some() == profile.has_solarize()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for &o in &self.jitter.order {
            match seen.get_mut(usize::from(o)) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(Error::Encoding(format!(
                        "jitter order {:?} is not a permutation of 0..4",
                        self.jitter.order
                    )))
                }
            }
        }
        if !self.jitter.applied && self.jitter != ColorJitter::default() {
            return Err(Error::Encoding(
                "jitter not applied but factors or order differ from defaults".into(),
            ));
        }
        if let Some(b) = self.blur {
            if !b.applied && b.sigma != 0.0 {
                return Err(Error::Encoding("blur not applied but sigma is non-zero".into()));
            }
        }
        if self.crop.width == 0 || self.crop.height == 0 {
            return Err(Error::Encoding("empty crop rectangle".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Random resized crop parameters: ten rejection attempts at the sampled
/// area and aspect ratio, then a center crop with the ratio clamped.
pub fn sample_crop<R: Rng + ?Sized>(policy: &AugmentationPolicy, size: ImageSize, rng: &mut R) -> CropRect {
    let (w_img, h_img) = (f64::from(size.width), f64::from(size.height));
    let area = w_img * h_img;
    let log_ratio = (policy.crop.ratio.0.ln(), policy.crop.ratio.1.ln());
    for _ in 0..10 {
        let target_area = area * uniform(rng, policy.crop.scale);
        let aspect = uniform(rng, log_ratio).exp();
        let w = (target_area * aspect).sqrt().round();
        let h = (target_area / aspect).sqrt().round();
        if w > 0.0 && h > 0.0 && w <= w_img && h <= h_img {
            let (w, h) = (w as u32, h as u32);
            let x = rng.random_range(0..=size.width - w);
            let y = rng.random_range(0..=size.height - h);
            return CropRect { x, y, width: w, height: h };
        }
    }
    let in_ratio = w_img / h_img;
    let (w, h) = if in_ratio < policy.crop.ratio.0 {
        (size.width, ((w_img / policy.crop.ratio.0).round() as u32).clamp(1, size.height))
    } else if in_ratio > policy.crop.ratio.1 {
        (((h_img * policy.crop.ratio.1).round() as u32).clamp(1, size.width), size.height)
    } else {
        (size.width, size.height)
    };
    CropRect {
        x: (size.width - w) / 2,
        y: (size.height - h) / 2,
        width: w,
        height: h,
    }
}

pub fn sample_jitter<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> ColorJitter {
    let j = &policy.jitter;
    let factor = |rng: &mut R, s: f64| {
        if s > 0.0 {
            uniform(rng, ((1.0 - s).max(0.0), 1.0 + s))
        } else {
            1.0
        }
    };
    let brightness = factor(rng, j.brightness);
    let contrast = factor(rng, j.contrast);
    let saturation = factor(rng, j.saturation);
    let hue = if j.hue > 0.0 { uniform(rng, (-j.hue, j.hue)) } else { 0.0 };
    let mut order = DEFAULT_JITTER_ORDER;
    order.shuffle(rng);
    ColorJitter {
        applied: true,
        brightness,
        contrast,
        saturation,
        hue,
        order,
    }
}

pub fn sample_blur<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> Option<GaussianBlur> {
    policy.blur.map(|b| GaussianBlur {
        applied: true,
        sigma: uniform(rng, b.sigma),
    })
}

/// Draws a full transformation from the policy for a source image of `size`.
pub fn sample_trace<R: Rng + ?Sized>(policy: &AugmentationPolicy, size: ImageSize, rng: &mut R) -> AugmentationTrace {
    let crop = sample_crop(policy, size, rng);
    let hflip = bernoulli(rng, policy.hflip_probability);
    let jitter = if bernoulli(rng, policy.jitter.probability) {
        sample_jitter(policy, rng)
    } else {
        ColorJitter::default()
    };
    let grayscale = bernoulli(rng, policy.grayscale_probability);
    let blur = policy.blur.map(|b| {
        if bernoulli(rng, b.probability) {
            GaussianBlur {
                applied: true,
                sigma: uniform(rng, b.sigma),
            }
        } else {
            GaussianBlur::OFF
        }
    });
    let solarize = policy.solarize_probability.map(|p| bernoulli(rng, p));
    AugmentationTrace {
        crop,
        hflip,
        jitter,
        grayscale,
        blur,
        solarize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augcodec::policy::{Baseline, Dataset, View};
    use crate::seeding;

    fn imagenet_byol() -> AugmentationPolicy {
        AugmentationPolicy::preset(CodecProfile::new(Dataset::Imagenet, Baseline::Byol), View::Second)
    }

    #[test]
    fn same_seed_same_trace() {
        let policy = imagenet_byol();
        let size = ImageSize::new(500, 375);
        let a = sample_trace(&policy, size, &mut seeding::rng(42, &[0]));
        let b = sample_trace(&policy, size, &mut seeding::rng(42, &[0]));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_probability_policy_gives_defaults() {
        let profile = CodecProfile::new(Dataset::Imagenet, Baseline::Byol);
        let policy = AugmentationPolicy::preset(profile, View::First).never_applied();
        let size = ImageSize::new(320, 240);
        for s in 0..50 {
            let t = sample_trace(&policy, size, &mut seeding::rng(s, &[]));
            assert!(!t.hflip && !t.grayscale);
            assert_eq!(t.jitter, ColorJitter::default());
            assert_eq!(t.blur, Some(GaussianBlur::OFF));
            assert_eq!(t.solarize, Some(false));
            assert!(t.crop.fits(size));
            t.validate().unwrap();
        }
    }

    #[test]
    fn sampled_traces_are_consistent() {
        let policy = imagenet_byol();
        for s in 0..500 {
            let size = ImageSize::new(64 + (s as u32 % 300), 48 + (s as u32 * 7 % 200));
            let t = sample_trace(&policy, size, &mut seeding::rng(s, &[1]));
            t.validate().unwrap();
            assert!(t.crop.fits(size), "{:?} in {:?}", t.crop, size);
            assert!(t.matches_profile(policy.profile));
            if t.jitter.applied {
                assert!((0.6..=1.4).contains(&t.jitter.brightness));
                assert!((0.8..=1.2).contains(&t.jitter.saturation));
                assert!(t.jitter.hue.abs() <= 0.1);
            }
            if let Some(b) = t.blur.filter(|b| b.applied) {
                assert!((0.1..=2.0).contains(&b.sigma));
            }
        }
    }

    #[test]
    fn crop_area_respects_scale_range() {
        let policy = AugmentationPolicy::preset(CodecProfile::new(Dataset::Cifar10, Baseline::Simclr), View::First);
        let size = ImageSize::new(256, 256);
        let mut rng = seeding::rng(9, &[]);
        for _ in 0..1000 {
            let c = sample_crop(&policy, size, &mut rng);
            let frac = f64::from(c.width * c.height) / 65536.0;
            assert!(frac <= 1.0 + 1e-9);
            // rounding of width/height can push slightly below the nominal minimum
            assert!(frac >= 0.07, "{frac}");
        }
    }

    #[test]
    fn degenerate_aspect_falls_back_to_center_crop() {
        let mut policy = AugmentationPolicy::preset(CodecProfile::new(Dataset::Cifar10, Baseline::Simclr), View::First);
        policy.crop.scale = (1.0, 1.0);
        let size = ImageSize::new(200, 20);
        let c = sample_crop(&policy, size, &mut seeding::rng(3, &[]));
        assert!(c.fits(size));
        assert_eq!(c.height, 20);
        assert_eq!(c.width, 27);
        assert_eq!(c.x, (200 - 27) / 2);
    }

    #[test]
    fn invalid_order_is_rejected() {
        let profile = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        let mut t = AugmentationTrace::identity(profile, CropRect::full(ImageSize::new(32, 32)));
        t.jitter.applied = true;
        t.jitter.order = [0, 0, 2, 3];
        assert!(t.validate().is_err());
    }
}
