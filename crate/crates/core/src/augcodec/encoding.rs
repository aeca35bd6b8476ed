use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::{CodecProfile, PolicyPair, View};
use super::trace::{sample_trace, AugmentationTrace, ColorJitter, CropRect, GaussianBlur, ImageSize};
use crate::error::{Error, Result};
use crate::seeding;

/// Number of traces sampled to fit the normalization statistics.
pub const DEFAULT_NORMALIZER_SAMPLES: usize = 100_000;

/// Components whose sample std falls below this are passed through centered.
pub const STD_FLOOR: f64 = 1e-6;

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Raw vector layout: optional-augmentation flags, crop (x, y, w, h),
/// jitter factors, jitter order, and sigma when the profile has blur.
pub fn encode_trace(trace: &AugmentationTrace, profile: CodecProfile) -> Result<Vec<f64>> {
    if !trace.matches_profile(profile) {
        return Err(Error::Encoding(format!(
            "trace (blur: {}, solarize: {}) does not match profile {}",
            trace.blur.is_some(),
            trace.solarize.is_some(),
            profile.id()
        )));
    }
    trace.validate()?;
    let mut v = Vec::with_capacity(profile.encoding_len());
    v.push(flag(trace.hflip));
    v.push(flag(trace.jitter.applied));
    v.push(flag(trace.grayscale));
    if let Some(b) = trace.blur {
        v.push(flag(b.applied));
    }
    if let Some(s) = trace.solarize {
        v.push(flag(s));
    }
    let c = trace.crop;
    v.extend([c.x, c.y, c.width, c.height].map(f64::from));
    let j = &trace.jitter;
    v.extend([j.brightness, j.contrast, j.saturation, j.hue]);
    v.extend(j.order.map(f64::from));
    if let Some(b) = trace.blur {
        v.push(b.sigma);
    }
    debug_assert_eq!(v.len(), profile.encoding_len());
    Ok(v)
}

fn read_flag(v: f64, name: &str) -> Result<bool> {
    match v {
        x if x == 0.0 => Ok(false),
        x if x == 1.0 => Ok(true),
        x => Err(Error::Encoding(format!("{name} flag must be 0 or 1, got {x}"))),
    }
}

fn read_u32(v: f64, name: &str) -> Result<u32> {
    if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
        Ok(v as u32)
    } else {
        Err(Error::Encoding(format!("{name} must be a non-negative integer, got {v}")))
    }
}

/// Inverse of [`encode_trace`].
pub fn decode_trace(v: &[f64], profile: CodecProfile) -> Result<AugmentationTrace> {
    if v.len() != profile.encoding_len() {
        return Err(Error::Encoding(format!(
            "vector of length {} does not match the {}-slot {} layout",
            v.len(),
            profile.encoding_len(),
            profile.id()
        )));
    }
    let mut it = v.iter().copied();
    let mut next = || it.next().expect("length checked");
    let hflip = read_flag(next(), "hflip")?;
    let jitter_applied = read_flag(next(), "color_jitter")?;
    let grayscale = read_flag(next(), "grayscale")?;
    let blur_applied = if profile.has_blur() { Some(read_flag(next(), "blur")?) } else { None };
    let solarize = if profile.has_solarize() { Some(read_flag(next(), "solarize")?) } else { None };
    let crop = CropRect {
        x: read_u32(next(), "crop_x")?,
        y: read_u32(next(), "crop_y")?,
        width: read_u32(next(), "crop_width")?,
        height: read_u32(next(), "crop_height")?,
    };
    let (brightness, contrast, saturation, hue) = (next(), next(), next(), next());
    let mut order = [0u8; 4];
    for o in order.iter_mut() {
        let x = read_u32(next(), "order")?;
        *o = u8::try_from(x).map_err(|_| Error::Encoding(format!("order index {x} out of range")))?;
    }
    let blur = match blur_applied {
        Some(applied) => Some(GaussianBlur { applied, sigma: next() }),
        None => None,
    };
    let trace = AugmentationTrace {
        crop,
        hflip,
        jitter: ColorJitter {
            applied: jitter_applied,
            brightness,
            contrast,
            saturation,
            hue,
            order,
        },
        grayscale,
        blur,
        solarize,
    };
    trace.validate()?;
    Ok(trace)
}

/// Component-wise standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(Error::shape(format!("vector of length {}", self.len()), v.len()));
        }
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

/// Population mean and std per component; stds below [`STD_FLOOR`] are set to 1.
pub fn fit_normalizer(vectors: &[Vec<f64>]) -> Result<Normalizer> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Encoding("cannot fit normalizer on an empty sample".into()))?;
    if vectors.len() < 2 {
        return Err(Error::Encoding("normalizer needs at least two vectors".into()));
    }
    let dim = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::shape(format!("vectors of length {dim}"), bad.len()));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(Normalizer { mean, std })
}

/// Samples `count` traces (alternating the two view policies) over the given
/// source sizes and fits normalization statistics on their encodings.
pub fn fit_profile_normalizer(
    policies: &PolicyPair,
    sizes: &[ImageSize],
    count: usize,
    seed: u64,
) -> Result<Normalizer> {
    if sizes.is_empty() {
        return Err(Error::Encoding("no source image sizes to sample crops from".into()));
    }
    let profile = policies.profile();
    let mut rng = seeding::rng(seed, &[0x6e6f_726d]);
    let vectors = (0..count)
        .map(|i| {
            let view = if i % 2 == 0 { View::First } else { View::Second };
            let size = sizes[i % sizes.len()];
            let trace = sample_trace(policies.get(view), size, &mut rng);
            encode_trace(&trace, profile)
        })
        .collect::<Result<Vec<_>>>()?;
    fit_normalizer(&vectors)
}

/// Self-describing record of the encoding layout, stored beside checkpoints
/// so evaluation decodes vectors the way training produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDescriptor {
    pub profile_id: String,
    pub length: usize,
    pub fields: Vec<String>,
    pub normalizer: Normalizer,
}

impl LayoutDescriptor {
    pub fn new(profile: CodecProfile, normalizer: Normalizer) -> Result<Self> {
        let d = Self {
            profile_id: profile.id(),
            length: profile.encoding_len(),
            fields: profile.layout().into_iter().map(String::from).collect(),
            normalizer,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn profile(&self) -> Result<CodecProfile> {
        CodecProfile::parse_id(&self.profile_id)
    }

    pub fn validate(&self) -> Result<()> {
        let profile = self.profile()?;
        let expected: Vec<&str> = profile.layout();
        if self.length != expected.len()
            || self.fields.len() != expected.len()
            || self.fields.iter().zip(&expected).any(|(a, b)| a != b)
        {
            return Err(Error::Encoding(format!(
                "layout descriptor does not match the {} layout",
                self.profile_id
            )));
        }
        if self.normalizer.len() != self.length || self.normalizer.std.len() != self.length {
            return Err(Error::Encoding("normalizer length differs from layout length".into()));
        }
        if self.normalizer.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Encoding("normalizer std components must be positive".into()));
        }
        Ok(())
    }

    /// Encodes and normalizes a trace in one go.
    pub fn encode_normalized(&self, trace: &AugmentationTrace) -> Result<Vec<f64>> {
        let raw = encode_trace(trace, self.profile()?)?;
        self.normalizer.normalize(&raw)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Encoding(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let d: Self = toml::from_str(s).map_err(|e| Error::Encoding(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augcodec::policy::{AugmentationPolicy, Baseline, Dataset};
    use proptest::prelude::*;

    fn example_one() -> AugmentationTrace {
        AugmentationTrace {
            crop: CropRect { x: 12, y: 9, width: 120, height: 96 },
            hflip: false,
            jitter: ColorJitter {
                applied: true,
                brightness: 1.13,
                contrast: 1.0,
                saturation: 0.84,
                hue: -0.09,
                order: [3, 1, 2, 0],
            },
            grayscale: true,
            blur: Some(GaussianBlur::OFF),
            solarize: Some(false),
        }
    }

    #[test]
    fn default_cifar_trace_encoding() {
        let profile = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        let t = AugmentationTrace::identity(profile, CropRect::full(ImageSize::new(32, 32)));
        assert_eq!(
            encode_trace(&t, profile).unwrap(),
            vec![0., 0., 0., 0., 0., 32., 32., 1., 1., 1., 0., 0., 1., 2., 3.]
        );
    }

    #[test]
    fn profile_mismatch_is_an_error() {
        let cifar = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        assert!(matches!(encode_trace(&example_one(), cifar), Err(Error::Encoding(_))));
        assert!(decode_trace(&[0.0; 18], cifar).is_err());
    }

    #[test]
    fn two_point_statistics() {
        let n = fit_normalizer(&[vec![0.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(n.mean, vec![1.0, 2.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.normalize(&[2.0, 2.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn repeated_vector_clamps_every_std() {
        let v = vec![3.0, -1.0, 0.5];
        let n = fit_normalizer(&vec![v.clone(); 10]).unwrap();
        assert_eq!(n.std, vec![1.0; 3]);
        assert_eq!(n.normalize(&v).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn empty_or_ragged_samples_fail() {
        assert!(fit_normalizer(&[]).is_err());
        assert!(fit_normalizer(&[vec![1.0]]).is_err());
        assert!(fit_normalizer(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normalized_sample_is_standardized() {
        let pair = PolicyPair::preset(CodecProfile::new(Dataset::Imagenet, Baseline::Byol));
        let sizes = [ImageSize::new(500, 375), ImageSize::new(333, 500)];
        let profile = pair.profile();
        let mut rng = seeding::rng(11, &[]);
        let vectors: Vec<Vec<f64>> = (0..4000)
            .map(|i| {
                let view = if i % 2 == 0 { View::First } else { View::Second };
                encode_trace(&sample_trace(pair.get(view), sizes[i % 2], &mut rng), profile).unwrap()
            })
            .collect();
        let n = fit_normalizer(&vectors).unwrap();
        let normed: Vec<Vec<f64>> = vectors.iter().map(|v| n.normalize(v).unwrap()).collect();
        let count = normed.len() as f64;
        for c in 0..profile.encoding_len() {
            let mean = normed.iter().map(|v| v[c]).sum::<f64>() / count;
            let var = normed.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-6, "component {c} mean {mean}");
            if n.std[c] != 1.0 {
                assert!((var.sqrt() - 1.0).abs() < 1e-6, "component {c} std {}", var.sqrt());
            }
        }
    }

    #[test]
    fn descriptor_round_trip_and_validation() {
        let profile = CodecProfile::new(Dataset::Cifar10, Baseline::Simclr);
        let norm = Normalizer { mean: vec![0.5; 15], std: vec![2.0; 15] };
        let d = LayoutDescriptor::new(profile, norm).unwrap();
        let text = d.to_toml().unwrap();
        assert!(text.contains("profile_id = \"cifar10-simclr\""));
        assert_eq!(LayoutDescriptor::from_toml(&text).unwrap(), d);

        let mut bad = d.clone();
        bad.fields.swap(0, 1);
        assert!(bad.validate().is_err());
        let wrong_len = Normalizer { mean: vec![0.0; 18], std: vec![1.0; 18] };
        assert!(LayoutDescriptor::new(profile, wrong_len).is_err());
    }

    fn profiles() -> impl Strategy<Value = CodecProfile> {
        (prop_oneof![Just(Dataset::Cifar10), Just(Dataset::Imagenet)],
         prop_oneof![Just(Baseline::Simclr), Just(Baseline::Byol), Just(Baseline::Barlow)])
            .prop_map(|(d, b)| CodecProfile::new(d, b))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(profile in profiles(), seed in any::<u64>(),
                                    w in 8u32..600, h in 8u32..600, second in any::<bool>()) {
            let pair = PolicyPair::preset(profile);
            let policy: &AugmentationPolicy = if second { &pair.second } else { &pair.first };
            let trace = sample_trace(policy, ImageSize::new(w, h), &mut seeding::rng(seed, &[]));
            let v = encode_trace(&trace, profile).unwrap();
            prop_assert_eq!(v.len(), profile.encoding_len());
            prop_assert_eq!(decode_trace(&v, profile).unwrap(), trace);
        }
    }
}
