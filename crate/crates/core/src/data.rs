//! Datasets: a seeded synthetic pattern set and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images `[n, channels, h, w]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).unwrap(), labels)
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            samples_per_class: 50,
            image_size: 16,
            noise: 0.15,
        }
    }
}

/// Ten single-channel pattern classes: oriented bars, crosses, blobs, a ring.
pub const SYNTHETIC_CLASSES: usize = 10;

fn pattern(class: usize, size: usize, rng: &mut rng::Rng) -> Vec<f32> {
    let c = (size as f32 - 1.0) / 2.0;
    let jx = rng.random_range(-1.5f32..1.5);
    let jy = rng.random_range(-1.5f32..1.5);
    let amp = rng.random_range(0.7f32..1.0);
    let half = 1.0 + rng.random_range(0.0f32..0.5);
    let quarter = size as f32 / 4.0;
    let bar = |d: f32| if d.abs() <= half { 1.0 } else { 0.0 };
    let blob = |dx: f32, dy: f32, s: f32| (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - c - jx;
            let dy = y as f32 - c - jy;
            let v: f32 = match class {
                0 => bar(dy),
                1 => bar(dx),
                2 => bar((dx - dy) / std::f32::consts::SQRT_2),
                3 => bar((dx + dy) / std::f32::consts::SQRT_2),
                4 => bar(dx).max(bar(dy)),
                5 => bar((dx - dy) / std::f32::consts::SQRT_2)
                    .max(bar((dx + dy) / std::f32::consts::SQRT_2)),
                6 => blob(dx, dy, 2.0),
                7 => bar((dx * dx + dy * dy).sqrt() - quarter * 1.6),
                8 => blob(dx + quarter, dy + quarter, 1.8),
                _ => blob(dx - quarter, dy - quarter, 1.8),
            };
            img[y * size + x] = amp * v;
        }
    }
    img
}

/// Class-balanced, seeded synthetic dataset. Samples are interleaved by class.
pub fn synthetic(cfg: &SyntheticConfig, seed: u64, split: &str) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.num_classes > SYNTHETIC_CLASSES {
        return Err(Error::config(
            "data.num_classes",
            format!("synthetic data has 1..={SYNTHETIC_CLASSES} classes"),
        ));
    }
    if cfg.samples_per_class == 0 || cfg.image_size < 8 {
        return Err(Error::config(
            "data.samples_per_class",
            "need at least one sample per class and images of side >= 8",
        ));
    }
    let mut r = rng::stream(seed, &format!("synthetic-{split}"));
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0))
        .map_err(|e| Error::config("data.noise", e.to_string()))?;
    let n = cfg.num_classes * cfg.samples_per_class;
    let px = cfg.image_size * cfg.image_size;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.num_classes;
        let img = pattern(class, cfg.image_size, &mut r);
        data.extend(
            img.into_iter()
                .map(|v| (v + noise.sample(&mut r)).clamp(0.0, 1.0)),
        );
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, cfg.image_size, cfg.image_size], data)?,
        labels,
        num_classes: cfg.num_classes,
    })
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses one CIFAR-10 binary batch (records of 1 label byte + 3072 pixels).
pub fn parse_cifar_batch(bytes: &[u8], path: &Path, image_size: usize) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let records = bytes.len() / CIFAR_RECORD + 1;
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records (expected e.g. {} bytes)",
                bytes.len(),
                records * CIFAR_RECORD
            ),
        });
    }
    if image_size == 0 || 32 % image_size != 0 {
        return Err(Error::config("data.image_size", "must divide 32"));
    }
    let f = 32 / image_size;
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("label byte {label} outside 0..10"),
            });
        }
        labels.push(label);
        let px = &rec[1..];
        for ch in 0..3 {
            for y in 0..image_size {
                for x in 0..image_size {
                    let mut s = 0.0f32;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += px[ch * 1024 + (y * f + dy) * 32 + x * f + dx] as f32 / 255.0;
                        }
                    }
                    data.push(s / (f * f) as f32);
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, image_size, image_size], data)?,
        labels,
        num_classes: 10,
    })
}

pub fn load_cifar_file(path: &Path, image_size: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, path, image_size)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path, image_size: usize) -> Result<(Dataset, Dataset)> {
    let mut parts = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        parts.push(load_cifar_file(&dir.join(f), image_size)?);
    }
    let test = load_cifar_file(&dir.join(CIFAR_TEST_FILE), image_size)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend(p.labels);
    }
    let train = Dataset {
        images: Tensor::new(vec![labels.len(), 3, image_size, image_size], data)?,
        labels,
        num_classes: 10,
    };
    Ok((train, test))
}
