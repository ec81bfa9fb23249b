//! Image datasets: the synthetic grating generator and the `BIMD` file format.
//!
//! File layout (little-endian):
//! `"BIMD"`, u32 version = 1, u32 count, u32 H, u32 W, u32 C, u32 has_labels,
//! then `count * H * W * C` u8 pixels (each image row-major, channels last),
//! then `count` u32 labels when `has_labels` is 1.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{BimError, Result};
use crate::rng::{purpose, SplitMix64};
use crate::tensor::{Scalar, Tensor};
use crate::vit::ModelSpec;

pub const DATASET_MAGIC: &[u8; 4] = b"BIMD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `count * H * W * C` bytes, channels last.
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// Images at `indices` as `[B, C, H, W]` with values `k / 255`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.count {
                return Err(BimError::Contract(format!("image {i} out of {}", self.count)));
            }
            let img = &self.pixels[i * self.image_len()..(i + 1) * self.image_len()];
            for ch in 0..c {
                for p in 0..h * w {
                    data.push(T::from_f64(img[p * c + ch] as f64 / 255.0));
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<u32>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| BimError::Contract("dataset has no labels".into()))?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.height != spec.image_size || self.width != spec.image_size || self.channels != spec.channels {
            return Err(BimError::Config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                self.height, self.width, self.channels, spec.image_size, spec.image_size, spec.channels
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + 4 * self.count);
        out.extend_from_slice(DATASET_MAGIC);
        let has_labels = u32::from(self.labels.is_some());
        for v in [
            DATASET_VERSION,
            self.count as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            has_labels,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, detail: String| BimError::Format {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            return Err(fail(0, "missing BIMD magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("header truncated, need {HEADER_LEN} bytes")));
        }
        let field = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
        };
        let version = field(0);
        if version != DATASET_VERSION {
            return Err(BimError::Incompatible(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        let (count, h, w, c) = (
            field(1) as usize,
            field(2) as usize,
            field(3) as usize,
            field(4) as usize,
        );
        let has_labels = match field(5) {
            0 => false,
            1 => true,
            v => return Err(fail(24, format!("has_labels must be 0 or 1, got {v}"))),
        };
        if h == 0 || w == 0 || c == 0 {
            return Err(fail(12, format!("zero image extent {h}x{w}x{c}")));
        }
        let pix_len = count
            .checked_mul(h * w * c)
            .ok_or_else(|| fail(4, "declared size overflows".into()))?;
        let expected = HEADER_LEN + pix_len + if has_labels { 4 * count } else { 0 };
        if bytes.len() < expected {
            return Err(fail(
                bytes.len(),
                format!("payload truncated: header declares {count} images, file needs {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(fail(
                expected,
                format!(
                    "{} trailing bytes after {count} declared images",
                    bytes.len() - expected
                ),
            ));
        }
        let pixels = bytes[HEADER_LEN..HEADER_LEN + pix_len].to_vec();
        let labels = has_labels.then(|| {
            bytes[HEADER_LEN + pix_len..]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        });
        Ok(Self {
            count,
            height: h,
            width: w,
            channels: c,
            pixels,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Number of orientation classes drawn by the generator.
pub const SYNTHETIC_CLASSES: usize = 4;

/// Oriented gratings plus soft blobs. The class is the grating orientation
/// (`pi * class / classes`); its phase and frequency vary only slightly, so
/// class-mean images stay far apart. Every sample is a pure function of
/// `(seed, index)`.
pub fn gen_synthetic_dataset(spec: &ModelSpec, count: usize, seed: u64) -> Dataset {
    gen_synthetic_with_classes(spec, count, seed, SYNTHETIC_CLASSES)
}

pub fn gen_synthetic_with_classes(spec: &ModelSpec, count: usize, seed: u64, classes: usize) -> Dataset {
    let (s, c) = (spec.image_size, spec.channels);
    let mut pixels = Vec::with_capacity(count * s * s * c);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = SplitMix64::derive(seed, &[purpose::DATA_GEN, i as u64]);
        let class = rng.below(classes);
        let theta = PI * class as f64 / classes as f64;
        let freq = 3.0 * (1.0 + 0.1 * (rng.uniform() - 0.5)) / s as f64;
        let phase = 0.3 * (rng.uniform() - 0.5);
        let contrast = 0.3 + 0.1 * rng.uniform();
        let tint: Vec<f64> = (0..c).map(|_| 0.8 + 0.4 * rng.uniform()).collect();
        let blobs: Vec<[f64; 4]> = (0..2)
            .map(|_| {
                [
                    rng.uniform() * s as f64,
                    rng.uniform() * s as f64,
                    (0.08 + 0.12 * rng.uniform()) * s as f64,
                    0.25 * (rng.uniform() - 0.5),
                ]
            })
            .collect();
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let wave = (2.0 * PI * freq * (xf * ct + yf * st) + phase).sin();
                let mut v = 0.5 + contrast * wave;
                for [bx, by, r, amp] in &blobs {
                    let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                for t in &tint {
                    let p = (0.5 + (v - 0.5) * t).clamp(0.0, 1.0);
                    pixels.push((p * 255.0).round() as u8);
                }
            }
        }
        labels.push(class as u32);
    }
    Dataset {
        count,
        height: s,
        width: s,
        channels: c,
        pixels,
        labels: Some(labels),
    }
}

/// Deterministic shuffled order of `count` samples for one epoch.
pub fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    SplitMix64::derive(seed, &[purpose::DATA_ORDER, epoch]).shuffle(&mut order);
    order
}
