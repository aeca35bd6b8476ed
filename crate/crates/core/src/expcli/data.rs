//! Dataset ingestion: CIFAR-10 binary batches, class-directory image
//! folders, and synthetic stand-ins for pipeline tests.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;

use crate::augcodec::{to_float, Dataset, Image};
use crate::error::{Error, Result};
use crate::seeding;

pub const CIFAR_SIDE: u32 = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: u64 = (CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE) as u64;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "JPEG"];

#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Precondition(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::Precondition(format!("label {l} outside {} classes", self.num_classes())));
        }
        Ok(())
    }

    /// `[0, 1]` float copy of image `i`.
    pub fn image(&self, i: usize) -> Image {
        to_float(&self.images[i])
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Image> {
        indices.par_iter().map(|&i| self.image(i)).collect()
    }

    pub fn take(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// `(count, height, width, channels)` when every image has the same size.
    pub fn shape(&self) -> Option<(usize, u32, u32, usize)> {
        let first = self.images.first()?;
        let uniform = self.images.iter().all(|i| i.dimensions() == first.dimensions());
        uniform.then(|| (self.images.len(), first.height(), first.width(), 3))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

/// One CIFAR record: a label byte then the red, green and blue planes, row-major.
pub fn decode_cifar_record(record: &[u8]) -> Result<(usize, RgbImage)> {
    if record.len() != CIFAR_RECORD_BYTES {
        return Err(Error::Precondition(format!(
            "CIFAR record has {} bytes, expected {CIFAR_RECORD_BYTES}",
            record.len()
        )));
    }
    let plane = (CIFAR_SIDE * CIFAR_SIDE) as usize;
    let img = RgbImage::from_fn(CIFAR_SIDE, CIFAR_SIDE, |x, y| {
        let p = 1 + (y * CIFAR_SIDE + x) as usize;
        Rgb([record[p], record[p + plane], record[p + 2 * plane]])
    });
    Ok((usize::from(record[0]), img))
}

pub fn encode_cifar_record(label: u8, img: &RgbImage) -> Result<Vec<u8>> {
    if img.dimensions() != (CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::shape("32x32 image", format!("{:?}", img.dimensions())));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
    out.push(label);
    for c in 0..3 {
        out.extend(img.pixels().map(|p| p.0[c]));
    }
    Ok(out)
}

fn read_cifar_file(path: &Path) -> Result<(Vec<RgbImage>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingest {
        file: path.to_path_buf(),
        message: format!("cannot read: {e}"),
    })?;
    if bytes.len() as u64 != CIFAR_FILE_BYTES {
        return Err(Error::Ingest {
            file: path.to_path_buf(),
            message: format!("file has {} bytes, expected {CIFAR_FILE_BYTES}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let (label, img) = decode_cifar_record(rec)?;
        if label >= CIFAR_CLASSES.len() {
            return Err(Error::Ingest {
                file: path.to_path_buf(),
                message: format!("record {i} has label {label}"),
            });
        }
        images.push(img);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Accepts either the batch directory itself or its parent.
pub fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn ingest_cifar10(root: &Path) -> Result<DatasetSplits> {
    let dir = cifar_dir(root);
    let classes: Vec<String> = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut train = LabeledImages {
        class_names: classes.clone(),
        ..Default::default()
    };
    let files: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let loaded: Vec<_> = files.par_iter().map(|f| read_cifar_file(f)).collect::<Result<_>>()?;
    for (images, labels) in loaded {
        train.images.extend(images);
        train.labels.extend(labels);
    }
    let (images, labels) = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok(DatasetSplits {
        train,
        test: LabeledImages {
            images,
            labels,
            class_names: classes,
        },
    })
}

/// Class-structured noise images: each class has its own mean colour and
/// stripe orientation, so a linear probe on a random encoder can beat chance.
pub fn synthetic_image(label: usize, classes: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let hue = label as f32 / classes as f32;
    let base = [
        0.5 + 0.4 * (std::f32::consts::TAU * hue).cos(),
        0.5 + 0.4 * (std::f32::consts::TAU * (hue + 1.0 / 3.0)).cos(),
        0.5 + 0.4 * (std::f32::consts::TAU * (hue + 2.0 / 3.0)).cos(),
    ];
    let angle = std::f32::consts::PI * hue;
    let (s, c) = angle.sin_cos();
    let freq = 0.5 + 0.1 * label as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let stripe = 0.15 * ((x as f32 * c + y as f32 * s) * freq).sin();
        let px = |b: f32, rng: &mut dyn rand::RngCore| {
            let noise: f32 = rng.random_range(-0.15..0.15);
            ((b + stripe + noise).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(base[0], rng), px(base[1], rng), px(base[2], rng)])
    })
}

/// Writes the six CIFAR-10 binary batch files filled with synthetic images.
pub fn write_synthetic_cifar10(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: Vec<&str> = CIFAR_TRAIN_FILES.iter().copied().chain([CIFAR_TEST_FILE]).collect();
    files.par_iter().enumerate().try_for_each(|(f, name)| {
        let mut rng = seeding::rng(seed, &[0xc1fa, f as u64]);
        let mut bytes = Vec::with_capacity(CIFAR_FILE_BYTES as usize);
        for i in 0..CIFAR_RECORDS_PER_FILE {
            let label = i % CIFAR_CLASSES.len();
            let img = synthetic_image(label, CIFAR_CLASSES.len(), CIFAR_SIDE, &mut rng);
            bytes.extend(encode_cifar_record(label as u8, &img)?);
        }
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    })
}

/// `dir/<class>/<image>` with classes in sorted directory-name order.
pub fn load_image_folder(dir: &Path) -> Result<LabeledImages> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Ingest {
            file: dir.to_path_buf(),
            message: "no class directories".into(),
        });
    }
    let mut files = Vec::new();
    for (label, cd) in class_dirs.iter().enumerate() {
        let mut imgs: Vec<PathBuf> = std::fs::read_dir(cd)
            .map_err(|e| Error::io(cd, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
            })
            .collect();
        imgs.sort();
        files.extend(imgs.into_iter().map(|p| (label, p)));
    }
    let images = files
        .par_iter()
        .map(|(_, p)| {
            image::open(p).map(|i| i.to_rgb8()).map_err(|e| Error::Ingest {
                file: p.clone(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledImages {
        images,
        labels: files.iter().map(|(l, _)| *l).collect(),
        class_names: class_dirs
            .iter()
            .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    })
}

/// ImageNet layout: `root/train/<class>/...` and `root/val/<class>/...`.
pub fn ingest_imagenet(root: &Path) -> Result<DatasetSplits> {
    let train = load_image_folder(&root.join("train"))?;
    let test = load_image_folder(&root.join("val"))?;
    if train.class_names != test.class_names {
        return Err(Error::Ingest {
            file: root.join("val"),
            message: "validation classes differ from training classes".into(),
        });
    }
    Ok(DatasetSplits { train, test })
}

/// Random images in the ImageNet directory layout, with sizes varying
/// around `size` so crops see heterogeneous sources.
pub fn write_mini_imagenet(root: &Path, classes: usize, train_per_class: usize, val_per_class: usize, size: u32, seed: u64) -> Result<()> {
    for (split, count) in [("train", train_per_class), ("val", val_per_class)] {
        for c in 0..classes {
            let dir = root.join(split).join(format!("n{c:08}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let mut rng = seeding::rng(seed, &[0x1a6e, (split == "val") as u64, c as u64, i as u64]);
                let side = size + rng.random_range(0..=size / 4);
                let mut img = synthetic_image(c, classes, side, &mut rng);
                if i % 2 == 1 {
                    img = image::imageops::resize(&img, side, size, image::imageops::FilterType::Triangle);
                }
                let path = dir.join(format!("img_{i:05}.png"));
                img.save(&path)?;
            }
        }
    }
    Ok(())
}

pub fn load_dataset(dataset: Dataset, root: &Path) -> Result<DatasetSplits> {
    match dataset {
        Dataset::Cifar10 => ingest_cifar10(root),
        Dataset::Imagenet => ingest_imagenet(root),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let mut rng = seeding::rng(1, &[]);
        let img = synthetic_image(3, 10, 32, &mut rng);
        let rec = encode_cifar_record(3, &img).unwrap();
        assert_eq!(rec.len(), CIFAR_RECORD_BYTES);
        let (label, back) = decode_cifar_record(&rec).unwrap();
        assert_eq!(label, 3);
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_file_names_file_and_size() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = ingest_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_"), "{err}");
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_mini_imagenet(dir.path(), 3, 2, 1, 40, 5).unwrap();
        let splits = ingest_imagenet(dir.path()).unwrap();
        assert_eq!(splits.train.len(), 6);
        assert_eq!(splits.test.len(), 3);
        assert_eq!(splits.train.labels, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(splits.train.class_names[0], "n00000000");
        assert!(splits.train.images.iter().all(|i| i.height() == 40 || i.width() == i.height()));
    }
}
