use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{absolute_equivariance, relative_equivariance};
use crate::augcodec::{
    apply_trace, image_size, prepare_original, sample_blur, sample_crop, sample_jitter, AugmentationPolicy,
    AugmentationTrace, CodecProfile, CropRect, Image, LayoutDescriptor, to_float,
};
use crate::error::{Error, Result};
use crate::networks::{images_to_tensor, EquiModModel};
use crate::seeding;

pub const DEFAULT_REPORT_SAMPLES: usize = 10_000;
const PROBE_STREAM: u64 = 0xe9_0a11;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationKind {
    Crop,
    HFlip,
    ColorJitter,
    Grayscale,
    Blur,
    Solarize,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 6] = [
        AugmentationKind::Crop,
        AugmentationKind::HFlip,
        AugmentationKind::ColorJitter,
        AugmentationKind::Grayscale,
        AugmentationKind::Blur,
        AugmentationKind::Solarize,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AugmentationKind::Crop => "Crop",
            AugmentationKind::HFlip => "H-flip",
            AugmentationKind::ColorJitter => "Color jitter",
            AugmentationKind::Grayscale => "Grayscale",
            AugmentationKind::Blur => "Blur",
            AugmentationKind::Solarize => "Solarize",
        }
    }

    pub fn in_profile(self, profile: CodecProfile) -> bool {
        match self {
            AugmentationKind::Blur => profile.has_blur(),
            AugmentationKind::Solarize => profile.has_solarize(),
            _ => true,
        }
    }

    pub fn available(profile: CodecProfile) -> Vec<AugmentationKind> {
        Self::ALL.into_iter().filter(|k| k.in_profile(profile)).collect()
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        Self::ALL
            .into_iter()
            .find(|k| k.label().to_ascii_lowercase().replace(['-', ' '], "") == key)
            .ok_or_else(|| Error::Config(format!("unknown augmentation '{s}'")))
    }
}

/// Access to the equivariance space of a model: `z′` embeddings of images
/// and predictor outputs `ẑ′` from original embeddings and trace codes.
pub trait EquivarianceModel: Sync {
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
    fn predict(&self, z_orig: &[Vec<f64>], codes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

fn rows_to_tensor(rows: &[Vec<f64>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(format!("rows of width {width}"), "ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), device)?.to_dtype(dtype)?)
}

fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// A trained network in inference mode (batch norm uses running statistics).
pub struct NetworkProbe<'a> {
    pub model: &'a EquiModModel,
    pub channel_stats: ([f32; 3], [f32; 3]),
}

impl EquivarianceModel for NetworkProbe<'_> {
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let store = self.model.store();
        let x = images_to_tensor(images, self.channel_stats, store.dtype(), store.device())?;
        let h = self.model.encode(&x, false)?;
        tensor_to_rows(&self.model.project_equi(&h, false)?)
    }

    fn predict(&self, z_orig: &[Vec<f64>], codes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let store = self.model.store();
        let zo = rows_to_tensor(z_orig, store.dtype(), store.device())?;
        let c = rows_to_tensor(codes, store.dtype(), store.device())?;
        let t_code = self.model.project_aug(&c, false)?;
        tensor_to_rows(&self.model.predict_equi(&zo, &t_code, false)?)
    }
}

/// A trace applying only `kind`, with its parameters drawn from `policy`;
/// every other augmentation is off and the crop is the centered square
/// that also produces the original input.
pub fn isolated_trace(
    kind: AugmentationKind,
    policy: &AugmentationPolicy,
    img: &Image,
    rng: &mut impl rand::Rng,
) -> Result<AugmentationTrace> {
    let profile = policy.profile;
    if !kind.in_profile(profile) {
        return Err(Error::Config(format!("{kind} is not part of the {} augmentations", profile.id())));
    }
    let size = image_size(img);
    let mut trace = AugmentationTrace::identity(profile, CropRect::center_square(size));
    match kind {
        AugmentationKind::Crop => trace.crop = sample_crop(policy, size, rng),
        AugmentationKind::HFlip => trace.hflip = true,
        AugmentationKind::ColorJitter => trace.jitter = sample_jitter(policy, rng),
        AugmentationKind::Grayscale => trace.grayscale = true,
        AugmentationKind::Blur => trace.blur = sample_blur(policy, rng),
        AugmentationKind::Solarize => trace.solarize = Some(true),
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceEntry {
    pub augmentation: String,
    pub absolute: f64,
    pub relative: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub dataset: String,
    pub entries: Vec<EquivarianceEntry>,
}

/// Mean absolute and relative equivariance over `samples` images (cycling
/// through `images`) with only `kind` applied.
pub fn per_augmentation_report(
    model: &dyn EquivarianceModel,
    images: &[RgbImage],
    policy: &AugmentationPolicy,
    layout: &LayoutDescriptor,
    kind: AugmentationKind,
    samples: usize,
    seed: u64,
) -> Result<EquivarianceEntry> {
    if images.is_empty() || samples == 0 {
        return Err(Error::Precondition("equivariance report needs images and a positive sample count".into()));
    }
    if layout.profile()? != policy.profile {
        return Err(Error::Config("layout and policy profiles differ".into()));
    }
    let (mut abs_sum, mut rel_sum) = (0.0, 0.0);
    let indices: Vec<usize> = (0..samples).collect();
    for chunk in indices.chunks(CHUNK) {
        let prepared = chunk
            .par_iter()
            .map(|&s| {
                let img = to_float(&images[s % images.len()]);
                let mut rng = seeding::rng(seed, &[PROBE_STREAM, kind as u64, s as u64]);
                let trace = isolated_trace(kind, policy, &img, &mut rng)?;
                let view = apply_trace(&img, &trace, policy)?;
                let original = prepare_original(&img, policy)?;
                Ok((view, original, layout.encode_normalized(&trace)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<Image> = prepared.iter().map(|p| p.0.clone()).collect();
        let originals: Vec<Image> = prepared.iter().map(|p| p.1.clone()).collect();
        let codes: Vec<Vec<f64>> = prepared.into_iter().map(|p| p.2).collect();
        let z_view = model.embed(&views)?;
        let z_orig = model.embed(&originals)?;
        let z_pred = model.predict(&z_orig, &codes)?;
        for ((zi, zp), zo) in z_view.iter().zip(&z_pred).zip(&z_orig) {
            abs_sum += absolute_equivariance(zi, zp, zo)?;
            rel_sum += relative_equivariance(zi, zp, zo)?;
        }
    }
    Ok(EquivarianceEntry {
        augmentation: kind.label().to_string(),
        absolute: abs_sum / samples as f64,
        relative: rel_sum / samples as f64,
        samples,
    })
}

/// One entry per augmentation of the policy's profile.
pub fn equivariance_report(
    model: &dyn EquivarianceModel,
    images: &[RgbImage],
    policy: &AugmentationPolicy,
    layout: &LayoutDescriptor,
    samples: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    let entries = AugmentationKind::available(policy.profile)
        .into_iter()
        .map(|k| per_augmentation_report(model, images, policy, layout, k, samples, seed))
        .collect::<Result<_>>()?;
    Ok(EquivarianceReport {
        dataset: policy.profile.dataset.to_string(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Absolute,
    Relative,
}

impl EquivarianceReport {
    pub fn entry(&self, kind: AugmentationKind) -> Option<&EquivarianceEntry> {
        self.entries.iter().find(|e| e.augmentation == kind.label())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["augmentation", "absolute", "relative", "n"]).map_err(io)?;
        for e in &self.entries {
            w.write_record([
                e.augmentation.clone(),
                e.absolute.to_string(),
                e.relative.to_string(),
                e.samples.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Labeled bar chart as SVG.
    pub fn to_svg(&self, metric: Metric) -> String {
        let values: Vec<f64> = self
            .entries
            .iter()
            .map(|e| match metric {
                Metric::Absolute => e.absolute,
                Metric::Relative => e.relative,
            })
            .collect();
        let (title, reference) = match metric {
            Metric::Absolute => ("Absolute equivariance", 0.0f64),
            Metric::Relative => ("Relative equivariance", 1.0),
        };
        let lo = values.iter().copied().fold(reference.min(0.0), f64::min);
        let hi = values.iter().copied().fold(reference.max(0.0), f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h, top, plot_h, bar_w) = (80 + 90 * values.len(), 320.0, 40.0f64, 220.0f64, 60.0f64);
        let y = |v: f64| top + plot_h * (hi - v) / span;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title} ({})</text>\n",
            w / 2,
            self.dataset
        );
        for (i, (e, v)) in self.entries.iter().zip(&values).enumerate() {
            let x = 60.0 + 90.0 * i as f64;
            let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
            s += &format!(
                "<rect x=\"{x}\" y=\"{y0:.2}\" width=\"{bar_w}\" height=\"{:.2}\" fill=\"#4c72b0\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.4}</text>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                (y1 - y0).max(0.5),
                x + bar_w / 2.0,
                y0 - 4.0,
                x + bar_w / 2.0,
                top + plot_h + 20.0,
                e.augmentation
            );
        }
        s += &format!(
            "<line x1=\"50\" x2=\"{}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-dasharray=\"4\"/>\n</svg>\n",
            w - 10,
            y(reference),
            y(reference)
        );
        s
    }

    /// Bar chart raster in entry order (labels are in the CSV and SVG).
    pub fn to_png(&self, metric: Metric, path: &Path) -> Result<()> {
        let values: Vec<f64> = self
            .entries
            .iter()
            .map(|e| match metric {
                Metric::Absolute => e.absolute,
                Metric::Relative => e.relative,
            })
            .collect();
        let reference: f64 = if metric == Metric::Relative { 1.0 } else { 0.0 };
        let lo = values.iter().copied().fold(reference.min(0.0), f64::min);
        let hi = values.iter().copied().fold(reference.max(0.0), f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (40 + 60 * values.len() as u32, 240u32);
        let y = |v: f64| (10.0f64 + 220.0 * (hi - v) / span).round() as u32;
        let mut img = RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
        for (i, v) in values.iter().enumerate() {
            let x0 = 30 + 60 * i as u32;
            let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
            for x in x0..x0 + 40 {
                for yy in y0..=y1.max(y0) {
                    img.put_pixel(x, yy.min(h - 1), image::Rgb([76, 114, 176]));
                }
            }
        }
        let yr = y(reference).min(h - 1);
        for x in (20..w - 5).step_by(2) {
            img.put_pixel(x, yr, image::Rgb([0, 0, 0]));
        }
        img.save(path)?;
        Ok(())
    }

    /// CSV plus SVG and PNG charts for both metrics, named `<stem>.*`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        for (metric, name) in [(Metric::Absolute, "absolute"), (Metric::Relative, "relative")] {
            let svg = dir.join(format!("{stem}_{name}.svg"));
            std::fs::write(&svg, self.to_svg(metric)).map_err(|e| Error::io(&svg, e))?;
            self.to_png(metric, &dir.join(format!("{stem}_{name}.png")))?;
        }
        Ok(())
    }
}
