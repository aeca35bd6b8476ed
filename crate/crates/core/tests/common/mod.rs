//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use equimod::augcodec::{fit_profile_normalizer, Image, ImageSize, LayoutDescriptor};
use equimod::expcli::{preset, synthetic_image, ExperimentConfig};
use equimod::seeding;
use equimod::trainer::Trainer;
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Equivariance loss of view `a`, one term at a time: the positive pairs
/// the view's embedding with its prediction; negatives are every other view
/// except the other view of the same image.
pub fn oracle_equimod_view(z_equi: &[Vec<f64>], z_pred: &[Vec<f64>], a: usize, tau: f64, include_positive: bool) -> f64 {
    let views = z_equi.len();
    let partner = (a + views / 2) % views;
    let pos = cos(&z_equi[a], &z_pred[a]) / tau;
    let mut denom = 0.0;
    for k in 0..views {
        if k != a && k != partner {
            denom += (cos(&z_equi[a], &z_equi[k]) / tau).exp();
        }
    }
    if include_positive {
        denom += pos.exp();
    }
    -pos + denom.ln()
}

pub fn oracle_equimod(z_equi: &[Vec<f64>], z_pred: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let views = z_equi.len();
    (0..views)
        .map(|a| oracle_equimod_view(z_equi, z_pred, a, tau, include_positive))
        .sum::<f64>()
        / views as f64
}

/// NT-Xent with the other view as positive and all `k != a` in the denominator.
pub fn oracle_nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let views = z.len();
    let mut total = 0.0;
    for a in 0..views {
        let p = (a + views / 2) % views;
        let mut denom = 0.0;
        for k in 0..views {
            if k != a {
                denom += (cos(&z[a], &z[k]) / tau).exp();
            }
        }
        total += -cos(&z[a], &z[p]) / tau + denom.ln();
    }
    total / views as f64
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, width: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let w = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), w), &Device::Cpu).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A preset shrunk for CPU tests: narrow encoder at 16×16 input and small
/// heads. Loss settings and augmentation policies are untouched.
pub fn small_experiment(name: &str) -> ExperimentConfig {
    let mut c = preset(name).unwrap();
    c.encoder.base_width = 4;
    c.encoder.resolution = 16;
    c.inv_head.hidden = 64;
    c.inv_head.out = 32;
    if let Some(p) = c.byol_predictor.as_mut() {
        p.hidden = 64;
        p.out = 32;
    }
    if let Some(e) = c.equimod.as_mut() {
        e.equi_head.hidden = 64;
        e.equi_head.out = 32;
        e.aug_projector.out = 32;
    }
    c.batch_size = 8;
    c.schedule.epochs = 2;
    c.schedule.warmup_epochs = 1;
    c.optimizer.base_lr = 0.5;
    c.validate().unwrap();
    c
}

pub fn layout_for(config: &ExperimentConfig, seed: u64) -> LayoutDescriptor {
    let normalizer = fit_profile_normalizer(&config.policies(), &[ImageSize::new(32, 32)], 2000, seed).unwrap();
    LayoutDescriptor::new(config.profile(), normalizer).unwrap()
}

pub fn trainer_for(config: &ExperimentConfig, steps_per_epoch: u64) -> Trainer {
    Trainer::new(
        config.model_config(),
        config.trainer_config(),
        config.policies(),
        layout_for(config, 99),
        steps_per_epoch,
        config.seed,
        config.runtime.precision.dtype(),
        &Device::Cpu,
    )
    .unwrap()
}

/// `n` labelled-noise 32×32 images as `[0, 1]` floats.
pub fn synthetic_batch(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = seeding::rng(seed, &[0xba7c]);
    (0..n)
        .map(|i| equimod::augcodec::to_float(&synthetic_image(i % 10, 10, 32, &mut rng)))
        .collect()
}
