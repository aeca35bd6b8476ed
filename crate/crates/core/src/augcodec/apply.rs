//! Pixel-space application of a recorded trace.
//!
//! Images are `Rgb32FImage` with channel values in `[0, 1]`. The pipeline is
//! crop, resize, flip, color jitter (in the recorded order), grayscale,
//! blur, solarize.

use image::imageops::{self, FilterType};
use image::Rgb32FImage;

use super::policy::AugmentationPolicy;
use super::trace::{AugmentationTrace, CropRect, ImageSize, JitterOp};
use crate::error::{Error, Result};

pub type Image = Rgb32FImage;

pub fn image_size(img: &Image) -> ImageSize {
    ImageSize::new(img.width(), img.height())
}

/// 8-bit RGB to `[0, 1]` floats.
pub fn to_float(img: &image::RgbImage) -> Image {
    let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::from_raw(img.width(), img.height(), data).expect("buffer length matches dimensions")
}

const GRAY_WEIGHTS: [f32; 3] = [0.2989, 0.587, 0.114];

fn luma(p: &[f32]) -> f32 {
    GRAY_WEIGHTS[0] * p[0] + GRAY_WEIGHTS[1] * p[1] + GRAY_WEIGHTS[2] * p[2]
}

pub fn crop_resize(img: &Image, crop: CropRect, resolution: u32) -> Result<Image> {
    if !crop.fits(image_size(img)) {
        return Err(Error::Precondition(format!(
            "crop {:?} lies outside the {}x{} image",
            crop,
            img.width(),
            img.height()
        )));
    }
    let cropped = imageops::crop_imm(img, crop.x, crop.y, crop.width, crop.height).to_image();
    if cropped.width() == resolution && cropped.height() == resolution {
        return Ok(cropped);
    }
    Ok(imageops::resize(&cropped, resolution, resolution, FilterType::Triangle))
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    let f = factor as f32;
    for v in img.iter_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn blend_towards(img: &mut Image, factor: f64, target: impl Fn(&[f32]) -> f32) {
    let f = factor as f32;
    for px in img.pixels_mut() {
        let t = target(&px.0);
        for c in px.0.iter_mut() {
            *c = (f * *c + (1.0 - f) * t).clamp(0.0, 1.0);
        }
    }
}

/// Blend with the mean grayscale intensity of the whole image.
pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = (img.width() * img.height()) as f64;
    let mean = (img.pixels().map(|p| f64::from(luma(&p.0))).sum::<f64>() / n) as f32;
    blend_towards(img, factor, |_| mean);
}

/// Blend each pixel with its own grayscale value.
pub fn adjust_saturation(img: &mut Image, factor: f64) {
    blend_towards(img, factor, luma);
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let delta = maxc - minc;
    let s = if maxc > 0.0 { delta / maxc } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if maxc == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if maxc == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, maxc]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = (v * (1.0 - s)).clamp(0.0, 1.0);
    let q = (v * (1.0 - s * f)).clamp(0.0, 1.0);
    let t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0);
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotate hue by `shift` turns (in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Image, shift: f64) {
    let shift = shift as f32;
    for px in img.pixels_mut() {
        let [h, s, v] = rgb_to_hsv(px.0);
        px.0 = hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v]);
    }
}

pub fn to_grayscale(img: &mut Image) {
    for px in img.pixels_mut() {
        let l = luma(&px.0);
        px.0 = [l; 3];
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let half = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = (i as f64 - half) / sigma;
            (-0.5 * x * x).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m >= n { period - m } else { m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Image {
    let kernel = gaussian_kernel(kernel_size, sigma);
    let half = (kernel_size / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut tmp = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (k, kv) in kernel.iter().enumerate() {
                let sx = reflect(x + k as isize - half, w);
                let p = img.get_pixel(sx as u32, y as u32).0;
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.put_pixel(x as u32, y as u32, image::Rgb(acc));
        }
    }
    let mut out = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y + k as isize - half, h);
                let p = tmp.get_pixel(x as u32, sy as u32).0;
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(acc));
        }
    }
    out
}

pub fn solarize(img: &mut Image, threshold: f32) {
    for v in img.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Applies `trace` to `img`, producing a `policy.resolution`-square view.
/// Pure function: the same inputs always give the same pixels.
pub fn apply_trace(img: &Image, trace: &AugmentationTrace, policy: &AugmentationPolicy) -> Result<Image> {
    let mut out = crop_resize(img, trace.crop, policy.resolution)?;
    if trace.hflip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    let j = &trace.jitter;
    if j.applied {
        for &op in &j.order {
            match JitterOp::from_index(op) {
                Some(JitterOp::Brightness) => adjust_brightness(&mut out, j.brightness),
                Some(JitterOp::Contrast) => adjust_contrast(&mut out, j.contrast),
                Some(JitterOp::Saturation) => adjust_saturation(&mut out, j.saturation),
                Some(JitterOp::Hue) => adjust_hue(&mut out, j.hue),
                None => return Err(Error::Encoding(format!("invalid jitter op index {op}"))),
            }
        }
    }
    if trace.grayscale {
        to_grayscale(&mut out);
    }
    if let Some(b) = trace.blur.filter(|b| b.applied) {
        out = gaussian_blur(&out, policy.blur_kernel_size(), b.sigma);
    }
    if trace.solarize == Some(true) {
        solarize(&mut out, 0.5);
    }
    Ok(out)
}

/// The non-augmented network input for an image: the largest centered
/// square resized to the policy resolution (a no-op for CIFAR10).
pub fn prepare_original(img: &Image, policy: &AugmentationPolicy) -> Result<Image> {
    crop_resize(img, CropRect::center_square(image_size(img)), policy.resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augcodec::policy::{Baseline, CodecProfile, Dataset, View};
    use crate::augcodec::trace::{sample_trace, AugmentationTrace, ColorJitter};
    use crate::seeding;
    use image::Rgb;
    use rand::Rng;

    fn cifar_policy(resolution: u32) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::preset(CodecProfile::new(Dataset::Cifar10, Baseline::Simclr), View::First);
        p.resolution = resolution;
        p
    }

    fn random_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = seeding::rng(seed, &[]);
        Image::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn full_crop_without_flags_is_identity_at_same_size() {
        let policy = cifar_policy(32);
        let img = random_image(32, 32, 1);
        let trace = AugmentationTrace::identity(policy.profile, CropRect::full(image_size(&img)));
        let out = apply_trace(&img, &trace, &policy).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_crop_resizes_to_policy_resolution() {
        let policy = cifar_policy(16);
        let img = random_image(40, 30, 2);
        let trace = AugmentationTrace::identity(policy.profile, CropRect::full(image_size(&img)));
        let out = apply_trace(&img, &trace, &policy).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hflip_swaps_columns() {
        let policy = cifar_policy(2);
        let img = Image::from_vec(
            2,
            2,
            vec![
                0.1, 0.2, 0.3, 0.9, 0.8, 0.7, //
                0.4, 0.5, 0.6, 0.0, 1.0, 0.5,
            ],
        )
        .unwrap();
        let mut trace = AugmentationTrace::identity(policy.profile, CropRect::full(image_size(&img)));
        trace.hflip = true;
        let out = apply_trace(&img, &trace, &policy).unwrap();
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(1, 0));
        assert_eq!(out.get_pixel(1, 0), img.get_pixel(0, 0));
        assert_eq!(out.get_pixel(0, 1), img.get_pixel(1, 1));
        assert_eq!(out.get_pixel(1, 1), img.get_pixel(0, 1));
    }

    #[test]
    fn crop_outside_bounds_is_rejected() {
        let policy = cifar_policy(32);
        let img = random_image(32, 32, 3);
        let trace = AugmentationTrace::identity(
            policy.profile,
            CropRect { x: 10, y: 0, width: 30, height: 10 },
        );
        assert!(matches!(apply_trace(&img, &trace, &policy), Err(Error::Precondition(_))));
    }

    #[test]
    fn application_is_bitwise_deterministic() {
        let profile = CodecProfile::new(Dataset::Imagenet, Baseline::Byol);
        let mut policy = AugmentationPolicy::preset(profile, View::Second);
        policy.resolution = 48;
        let img = random_image(90, 70, 4);
        for s in 0..20 {
            let trace = sample_trace(&policy, image_size(&img), &mut seeding::rng(s, &[]));
            let a = apply_trace(&img, &trace, &policy).unwrap();
            let b = apply_trace(&img, &trace, &policy).unwrap();
            let bytes = |i: &Image| i.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
            assert_eq!(bytes(&a), bytes(&b));
        }
    }

    #[test]
    fn jitter_order_matters() {
        let policy = cifar_policy(8);
        let img = random_image(8, 8, 5);
        let mut trace = AugmentationTrace::identity(policy.profile, CropRect::full(image_size(&img)));
        trace.jitter = ColorJitter {
            applied: true,
            brightness: 1.3,
            contrast: 0.7,
            saturation: 1.4,
            hue: 0.08,
            order: [0, 1, 2, 3],
        };
        let a = apply_trace(&img, &trace, &policy).unwrap();
        trace.jitter.order = [3, 2, 1, 0];
        let b = apply_trace(&img, &trace, &policy).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = seeding::rng(6, &[]);
        for _ in 0..1000 {
            let rgb = [rng.random::<f32>(), rng.random(), rng.random()];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-5, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn grayscale_and_solarize() {
        let mut img = Image::from_vec(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        to_grayscale(&mut img);
        assert_eq!(img.get_pixel(0, 0).0, [0.2989; 3]);
        let mut img = Image::from_vec(1, 1, vec![0.2, 0.5, 0.9]).unwrap();
        solarize(&mut img, 0.5);
        let p = img.get_pixel(0, 0).0;
        assert_eq!(p[0], 0.2);
        assert_eq!(p[1], 0.5);
        assert!((p[2] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_constant_images_and_mass() {
        let img = Image::from_pixel(9, 7, Rgb([0.25, 0.5, 0.75]));
        let out = gaussian_blur(&img, 5, 1.3);
        for p in out.pixels() {
            for (a, b) in p.0.iter().zip([0.25f32, 0.5, 0.75]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let k = gaussian_kernel(7, 0.8);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[6]);
    }

    #[test]
    fn prepare_original_center_crops() {
        let policy = cifar_policy(32);
        let img = random_image(32, 32, 7);
        assert_eq!(prepare_original(&img, &policy).unwrap(), img);
        let wide = random_image(64, 32, 8);
        let out = prepare_original(&wide, &policy).unwrap();
        assert_eq!(out, imageops::crop_imm(&wide, 16, 0, 32, 32).to_image());
    }
}
