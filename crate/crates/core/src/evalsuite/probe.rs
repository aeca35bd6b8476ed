//! Linear evaluation: a softmax classifier trained with Nesterov SGD on the
//! frozen encoder's representations.

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augcodec::{prepare_original, to_float, AugmentationPolicy, Image};
use crate::error::{Error, Result};
use crate::networks::{images_to_tensor, EquiModModel};
use crate::seeding;
use crate::trainer::{cosine_lr, StepSchedule};

const FEATURE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 256,
            lr: 0.2,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Percentages in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    pub train_top1: f64,
}

fn check_labels(features: &Tensor, labels: &[usize], classes: usize) -> Result<()> {
    let n = features.dim(0)?;
    if labels.len() != n {
        return Err(Error::Precondition(format!("{n} feature rows but {} labels", labels.len())));
    }
    if classes < 2 {
        return Err(Error::Precondition("a classifier needs at least two classes".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Precondition(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

/// Frozen-encoder representations `[n, width]` in inference mode, from the
/// same center crop the trainer uses for unaugmented inputs.
pub fn extract_features(model: &EquiModModel, images: &[RgbImage], policy: &AugmentationPolicy) -> Result<Tensor> {
    let store = model.store();
    let channel_stats = policy.profile.dataset.channel_stats();
    let mut parts = Vec::new();
    for chunk in images.chunks(FEATURE_BATCH) {
        let floats: Vec<Image> = chunk
            .par_iter()
            .map(|img| prepare_original(&to_float(img), policy))
            .collect::<Result<_>>()?;
        let x = images_to_tensor(&floats, channel_stats, store.dtype(), store.device())?;
        parts.push(model.encode(&x, false)?.detach().to_dtype(DType::F32)?);
    }
    if parts.is_empty() {
        return Err(Error::Precondition("no images to featurize".into()));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    /// Percentage of rows whose label is among the `k` highest logits.
    pub fn top_k(&self, features: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(features)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let hits = logits
            .iter()
            .zip(labels)
            .filter(|(row, &l)| row.iter().filter(|&&v| v > row[l]).count() < k)
            .count();
        Ok(100.0 * hits as f64 / labels.len() as f64)
    }
}

fn one_hot(labels: &[usize], classes: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), device)?)
}

/// Softmax regression on fixed features with a cosine learning rate.
pub fn fit_linear_classifier(features: &Tensor, labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<LinearClassifier> {
    check_labels(features, labels, classes)?;
    let features = features.to_dtype(DType::F32)?;
    let (n, d) = features.dims2()?;
    let device = features.device().clone();
    let mut w = Tensor::zeros((d, classes), DType::F32, &device)?;
    let mut b = Tensor::zeros(classes, DType::F32, &device)?;
    let (mut vw, mut vb) = (w.zeros_like()?, b.zeros_like()?);
    let batch = config.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let schedule = StepSchedule {
        warmup: 0,
        total: config.epochs * steps_per_epoch,
    };
    let mut step = 0;
    let m = config.momentum;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::rng(config.seed, &[0x9b0e, epoch]));
        for idx in order.chunks(batch) {
            let lr = cosine_lr(step, config.lr, schedule)?;
            let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &device)?;
            let x = features.index_select(&ids, 0)?;
            let y = one_hot(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes, &device)?;
            let logits = x.matmul(&w)?.broadcast_add(&b)?;
            let shifted = logits.broadcast_sub(&logits.max_keepdim(D::Minus1)?)?;
            let exp = shifted.exp()?;
            let p = exp.broadcast_div(&exp.sum_keepdim(D::Minus1)?)?;
            let g = ((p - y)? / idx.len() as f64)?;
            let mut gw = x.t()?.matmul(&g)?;
            if config.weight_decay > 0.0 {
                gw = (gw + (&w * config.weight_decay)?)?;
            }
            let gb = g.sum(0)?;
            vw = ((&vw * m)? + &gw)?;
            vb = ((&vb * m)? + &gb)?;
            let (dw, db) = if config.nesterov {
                ((gw + (&vw * m)?)?, (gb + (&vb * m)?)?)
            } else {
                (vw.clone(), vb.clone())
            };
            w = (w - (dw * lr)?)?;
            b = (b - (db * lr)?)?;
            step += 1;
        }
    }
    Ok(LinearClassifier { weight: w, bias: b })
}

/// Trains on `(train_features, train_labels)` and scores the test split.
pub fn probe_features(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    check_labels(test_features, test_labels, classes)?;
    let clf = fit_linear_classifier(train_features, train_labels, classes, config)?;
    let test = test_features.to_dtype(DType::F32)?;
    Ok(ProbeResult {
        top1: clf.top_k(&test, test_labels, 1)?,
        top5: clf.top_k(&test, test_labels, 5)?,
        train_top1: clf.top_k(&train_features.to_dtype(DType::F32)?, train_labels, 1)?,
    })
}

/// Full linear evaluation of a frozen encoder. Fails if any encoder
/// parameter or buffer changes while probing.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    model: &EquiModModel,
    train: &[RgbImage],
    train_labels: &[usize],
    test: &[RgbImage],
    test_labels: &[usize],
    classes: usize,
    policy: &AugmentationPolicy,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let before = model.store().checksum()?;
    let train_features = extract_features(model, train, policy)?;
    let test_features = extract_features(model, test, policy)?;
    let result = probe_features(&train_features, train_labels, &test_features, test_labels, classes, config)?;
    if model.store().checksum()? != before {
        return Err(Error::Precondition("encoder parameters changed during linear evaluation".into()));
    }
    Ok(result)
}
