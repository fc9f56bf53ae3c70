//! Synthetic eye-state images, unbalanced client partitions, and the
//! binary dataset file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CountingReader;
use crate::rng::{tag, RngStream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSDS";
const FORMAT_VERSION: u32 = 1;

pub const LABEL_OPEN: usize = 0;
pub const LABEL_CLOSED: usize = 1;

/// Images with integer labels. Pixels are stored contiguously, one
/// `H×W×C` block per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    image_shape: (usize, usize, usize),
    pixels: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        image_shape: (usize, usize, usize),
        pixels: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (h, w, c) = image_shape;
        let per = h * w * c;
        if per == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixels for {} images of {h}x{w}x{c}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {})",
                class_names.len()
            )));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            class_names,
        })
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn image_len(&self) -> usize {
        let (h, w, c) = self.image_shape;
        h * w * c
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn pixels(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Tensor {
        let (h, w, c) = self.image_shape;
        Tensor::new(vec![h, w, c], self.pixels(index).to_vec()).expect("consistent shape")
    }

    /// Stacks the selected samples into a `(B, H, W, C)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (h, w, c) = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(vec![indices.len(), h, w, c], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.image_shape, pixels, labels, self.class_names.clone())
    }

    /// Applies `f` to every image, producing a dataset of the same shape.
    pub fn map_images(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            let out = f(&self.image(i))?;
            if out.len() != self.image_len() {
                return Err(Error::invalid("image transform changed the image size"));
            }
            pixels.extend_from_slice(out.data());
        }
        Self::new(self.image_shape, pixels, self.labels.clone(), self.class_names.clone())
    }

    /// Seeded shuffle split into `(train, held_out)`, with
    /// `round(len · holdout_fraction)` samples held out.
    pub fn split_holdout(&self, holdout_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::invalid(format!(
                "holdout fraction {holdout_fraction} outside [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut RngStream::new(seed, 0).derive(&[tag::SPLIT]));
        let held = (self.len() as f64 * holdout_fraction).round() as usize;
        let (test, train) = order.split_at(held);
        Ok((self.subset(train)?, self.subset(test)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlinkSpec {
    pub image_size: (usize, usize),
    pub num_samples: usize,
    pub noise_std: f32,
    pub jitter_px: usize,
    pub seed: u64,
}

impl Default for SyntheticBlinkSpec {
    fn default() -> Self {
        Self {
            image_size: (24, 24),
            num_samples: 2000,
            noise_std: 0.1,
            jitter_px: 2,
            seed: 0,
        }
    }
}

impl SyntheticBlinkSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 12 || w < 12 {
            return Err(Error::invalid(format!("image size {h}x{w} below the 12x12 minimum")));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be a finite value >= 0"));
        }
        if 2 * self.jitter_px >= h.min(w) / 2 {
            return Err(Error::invalid(format!(
                "jitter of {}px too large for a {h}x{w} image",
                self.jitter_px
            )));
        }
        Ok(())
    }
}

const BACKGROUND: f32 = 0.55;
const BRIGHT: f32 = 0.95;
const DARK: f32 = 0.08;

fn render_eye(h: usize, w: usize, open: bool, dy: f32, dx: f32) -> Vec<f32> {
    let cy = (h as f32 - 1.0) / 2.0 + dy;
    let cx = (w as f32 - 1.0) / 2.0 + dx;
    // semi-axes of the eye outline
    let ax = 0.36 * w as f32;
    let ay = 0.22 * h as f32;
    let pupil = 0.13 * h.min(w) as f32;
    let mut img = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 - cy, x as f32 - cx);
            let v = &mut img[y * w + x];
            if open {
                let r = ((fx / ax).powi(2) + (fy / ay).powi(2)).sqrt();
                // outline about one pixel thick
                if (r - 1.0).abs() * ay < 0.8 {
                    *v = BRIGHT;
                }
                if (fx * fx + fy * fy).sqrt() <= pupil {
                    *v = DARK;
                }
            } else {
                // lower lid: a flattened half-ellipse, drawn dark
                let by = 0.5 * ay;
                let r = ((fx / ax).powi(2) + (fy / by).powi(2)).sqrt();
                if fy >= -0.5 && (r - 1.0).abs() * by < 0.7 {
                    *v = DARK;
                }
            }
        }
    }
    img
}

/// Two-class open/closed eye images. Sample `i` has label `i % 2`, so the
/// classes differ in size by at most one.
pub fn generate_blink_dataset(spec: &SyntheticBlinkSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let root = RngStream::new(spec.seed, 0);
    let noise = Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE)).expect("std validated as finite");
    let mut pixels = Vec::with_capacity(spec.num_samples * h * w);
    let mut labels = Vec::with_capacity(spec.num_samples);
    let j = spec.jitter_px as i64;
    for i in 0..spec.num_samples {
        let mut rng = root.derive(&[i as u64]);
        let label = i % 2;
        let dy = rng.gen_range(-j..=j) as f32;
        let dx = rng.gen_range(-j..=j) as f32;
        let mut img = render_eye(h, w, label == LABEL_OPEN, dy, dx);
        if spec.noise_std > 0.0 {
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        pixels.extend_from_slice(&img);
        labels.push(label);
    }
    LabeledDataset::new((h, w, 1), pixels, labels, vec!["open".into(), "closed".into()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_parts: usize,
    pub mu: f64,
    pub sigma: f64,
    /// Treat `sigma` as a variance rather than a standard deviation.
    #[serde(default)]
    pub sigma_is_variance: bool,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_parts == 0 {
            return Err(Error::invalid("num_parts must be >= 1"));
        }
        if !self.mu.is_finite() || self.mu < 1.0 {
            return Err(Error::invalid("mu must be >= 1"));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::invalid("sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn std_dev(&self) -> f64 {
        if self.sigma_is_variance {
            self.sigma.sqrt()
        } else {
            self.sigma
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub parts: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }
}

/// Part sizes drawn from `Normal(mu, std²)`, rounded, clamped below at 1.
pub fn draw_part_sizes(spec: &PartitionSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, 0).derive(&[tag::PARTITION, 0]);
    let normal = Normal::new(spec.mu, spec.std_dev()).expect("validated parameters");
    Ok((0..spec.num_parts)
        .map(|_| normal.sample(&mut rng).round().max(1.0) as usize)
        .collect())
}

pub fn partition_unbalanced(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let available = dataset.len();
    if available < spec.num_parts {
        return Err(Error::invalid(format!(
            "{available} samples cannot fill {} non-empty parts",
            spec.num_parts
        )));
    }
    let mut sizes = draw_part_sizes(spec)?;
    let mut total: usize = sizes.iter().sum();
    while total > available {
        let factor = available as f64 / total as f64;
        for s in sizes.iter_mut() {
            *s = ((*s as f64 * factor).floor() as usize).max(1);
        }
        total = sizes.iter().sum();
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut RngStream::new(spec.seed, 0).derive(&[tag::PARTITION, 1]));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        parts.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(Partition { parts })
}

pub fn write_dataset<W: Write>(dataset: &LabeledDataset, mut w: W) -> Result<()> {
    let (h, wd, c) = dataset.image_shape;
    w.write_all(MAGIC)?;
    for v in [
        FORMAT_VERSION,
        dataset.len() as u32,
        h as u32,
        wd as u32,
        c as u32,
        dataset.class_names.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 + dataset.image_len() * 4);
    for i in 0..dataset.len() {
        buf.clear();
        buf.extend_from_slice(&(dataset.labels[i] as u32).to_le_bytes());
        for v in dataset.pixels(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Decodes a dataset file. Class names are not stored in the format; loaded
/// datasets name their classes `class0`, `class1`, ...
pub fn read_dataset<R: Read>(r: R) -> Result<LabeledDataset> {
    let mut r = CountingReader { inner: r, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected FSDS".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let classes_at = r.pos;
    let classes = r.u32()? as usize;
    let per = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .filter(|&v| v > 0 && v <= 1 << 26)
        .ok_or_else(|| Error::Format {
            offset: 12,
            message: format!("invalid image shape {h}x{w}x{c}"),
        })?;
    if classes == 0 && count > 0 {
        return Err(Error::Format {
            offset: classes_at,
            message: "zero classes for a non-empty dataset".into(),
        });
    }
    let mut pixels = Vec::with_capacity(count.min(1 << 16) * per);
    let mut labels = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let label = r.u32()? as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: at,
                message: format!("label {label} outside [0, {classes})"),
            });
        }
        labels.push(label);
        pixels.extend(r.f32s(per)?);
    }
    let names = (0..classes).map(|i| format!("class{i}")).collect();
    LabeledDataset::new((h, w, c), pixels, labels, names)
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
