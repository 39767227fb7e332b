//! Dataset ingestion (IDX, CIFAR-10 binary), synthetic desk-scale tasks and
//! deterministic split/batch plumbing.
//!
//! Synthetic point tasks are rasterized to 1×16×16 images so the search
//! space's convolutions and pools have something spatial to do: each 2-d
//! point becomes a Gaussian bump whose grid position *and* anisotropic widths
//! encode its coordinates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const SYN_SIDE: usize = 16;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SyntheticKind {
    Spiral,
    Moons,
    Blobs,
}

impl SyntheticKind {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "spiral" => Some(SyntheticKind::Spiral),
            "moons" => Some(SyntheticKind::Moons),
            "blobs" => Some(SyntheticKind::Blobs),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Spiral => "spiral",
            SyntheticKind::Moons => "moons",
            SyntheticKind::Blobs => "blobs",
        }
    }
}

pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    /// Indices of the original training set (split further into train/val).
    pub trainval: Vec<usize>,
    /// Held-out test indices, disjoint from `trainval`.
    pub test: Vec<usize>,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    pub fn image(&self, idx: usize) -> &[f32] {
        let sz = self.channels * self.height * self.width;
        &self.images[idx * sz..(idx + 1) * sz]
    }

    pub fn batch_images<E: Scalar>(&self, indices: &[usize]) -> Tensor<E> {
        let sz = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend(self.images[i * sz..(i + 1) * sz].iter().map(|&v| E::from_f64(v as f64)));
        }
        Tensor::from_parts(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Raw image bytes view for determinism checks.
    pub fn raw_images(&self) -> &[f32] {
        &self.images
    }

    fn normalize_in_place(&mut self) {
        let sz = self.height * self.width;
        let n = self.len();
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        for i in 0..n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * sz;
                for &v in &self.images[off..off + sz] {
                    mean[c] += v as f64;
                }
            }
        }
        let count = (n * sz) as f64;
        for m in mean.iter_mut() {
            *m /= count;
        }
        for i in 0..n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * sz;
                for &v in &self.images[off..off + sz] {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt().max(1e-6)).collect();
        for i in 0..n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * sz;
                for v in &mut self.images[off..off + sz] {
                    *v = ((*v as f64 - mean[c]) / std[c]) as f32;
                }
            }
        }
        self.norm_mean = mean.iter().map(|&m| m as f32).collect();
        self.norm_std = std.iter().map(|&s| s as f32).collect();
    }
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

fn rasterize(px: f64, py: f64) -> Vec<f32> {
    let side = SYN_SIDE as f64;
    // Map [-1,1]² into the central region, leaving a 2px margin for tails.
    let gx = 2.0 + (px.clamp(-1.0, 1.0) + 1.0) / 2.0 * (side - 5.0);
    let gy = 2.0 + (py.clamp(-1.0, 1.0) + 1.0) / 2.0 * (side - 5.0);
    // Bump widths also encode the coordinates, so class structure stays
    // visible to translation-invariant conv features.
    let sx = 0.7 + 0.9 * (px.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let sy = 0.7 + 0.9 * (py.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let mut img = Vec::with_capacity(SYN_SIDE * SYN_SIDE);
    for row in 0..SYN_SIDE {
        for col in 0..SYN_SIDE {
            let dx = (col as f64 - gx) / sx;
            let dy = (row as f64 - gy) / sy;
            img.push((-(dx * dx + dy * dy) / 2.0).exp() as f32);
        }
    }
    img
}

fn finish_synthetic(
    name: String,
    points: Vec<(f64, f64)>,
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
) -> Dataset {
    let n = labels.len();
    let mut images = Vec::with_capacity(n * SYN_SIDE * SYN_SIDE);
    for &(px, py) in &points {
        images.extend(rasterize(px, py));
    }
    let mut ds = Dataset {
        name,
        channels: 1,
        height: SYN_SIDE,
        width: SYN_SIDE,
        classes,
        images,
        labels,
        trainval: Vec::new(),
        test: Vec::new(),
        norm_mean: vec![],
        norm_std: vec![],
    };
    ds.normalize_in_place();
    // Hold out a quarter for test, deterministically.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51_17);
    order.shuffle(&mut rng);
    let test_n = n / 4;
    ds.test = order[..test_n].to_vec();
    ds.trainval = order[test_n..].to_vec();
    ds
}

pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("synthetic tasks need at least 2 classes"));
    }
    if n < classes {
        return Err(Error::config(format!("n={n} smaller than {classes} classes")));
    }
    if kind == SyntheticKind::Moons && classes != 2 {
        return Err(Error::config("moons is a 2-class task"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let t: f64 = rng.gen_range(0.0..1.0);
        let (mut px, mut py) = match kind {
            SyntheticKind::Spiral => {
                let theta = 2.0 * std::f64::consts::PI * (k as f64) / (classes as f64)
                    + t * 3.0 * std::f64::consts::PI;
                let r = 0.15 + 0.8 * t;
                (r * theta.cos(), r * theta.sin())
            }
            SyntheticKind::Moons => {
                let phi = t * std::f64::consts::PI;
                if k == 0 {
                    (0.8 * phi.cos() - 0.15, 0.65 * phi.sin() - 0.25)
                } else {
                    (0.8 * (std::f64::consts::PI - phi).cos() + 0.15, -0.65 * phi.sin() + 0.25)
                }
            }
            SyntheticKind::Blobs => {
                let angle = 2.0 * std::f64::consts::PI * (k as f64) / (classes as f64);
                (0.62 * angle.cos(), 0.62 * angle.sin())
            }
        };
        let base_noise = if kind == SyntheticKind::Blobs { 0.07 + noise } else { noise };
        if base_noise > 0.0 {
            px += gauss(&mut rng) * base_noise;
            py += gauss(&mut rng) * base_noise;
        }
        points.push((px, py));
        labels.push(k);
    }
    let name = format!("{}-{}c-n{}-s{}", kind.name(), classes, n, seed);
    Ok(finish_synthetic(name, points, labels, classes, seed))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// IDX (MNIST-style) loader
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        location: format!("byte offset {offset}"),
        detail: detail.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(idx_err(path, offset, "truncated while reading u32"));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Images file: magic 0x00000803, then count, rows, cols, then pixel bytes.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(Vec<f32>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(path, 0, format!("bad images magic {magic:#010x}, want 0x00000803")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(idx_err(path, bytes.len(), format!("truncated: need {expected} bytes")));
    }
    let pixels = bytes[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((pixels, n, rows, cols))
}

/// Labels file: magic 0x00000801, then count, then label bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(path, 0, format!("bad labels magic {magic:#010x}, want 0x00000801")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(idx_err(path, bytes.len(), format!("truncated: need {expected} bytes")));
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let (pixels, n, rows, cols) = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::config(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut ds = Dataset {
        name: format!("idx:{}", images_path.display()),
        channels: 1,
        height: rows,
        width: cols,
        classes,
        images: pixels,
        labels,
        trainval: (0..n).collect(),
        test: Vec::new(),
        norm_mean: vec![],
        norm_std: vec![],
    };
    ds.normalize_in_place();
    Ok(ds)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary loader
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3×32×32 pixels
const CIFAR_CLASSES: usize = 10;

/// Parse concatenated CIFAR-10 binary records (label byte then R,G,B planes).
pub fn parse_cifar_records(bytes: &[u8], path: &str, take: Option<usize>) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse {
            path: path.to_string(),
            location: format!("byte offset {}", bytes.len()),
            detail: format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let mut count = bytes.len() / CIFAR_RECORD;
    if let Some(t) = take {
        count = count.min(t);
    }
    let mut images = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let off = r * CIFAR_RECORD;
        let label = bytes[off] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Parse {
                path: path.to_string(),
                location: format!("byte offset {off}"),
                detail: format!("label byte {label} out of class range 0..{CIFAR_CLASSES}"),
            });
        }
        labels.push(label);
        images.extend(bytes[off + 1..off + CIFAR_RECORD].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

/// `--take n` keeps the first n records across the files, in order.
pub fn load_cifar_binary(paths: &[std::path::PathBuf], take: Option<usize>) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::config("no CIFAR batch files given"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let remaining = take.map(|t| t.saturating_sub(labels.len()));
        if remaining == Some(0) {
            break;
        }
        let bytes = std::fs::read(p)?;
        let (img, lbl) = parse_cifar_records(&bytes, &p.display().to_string(), remaining)?;
        images.extend(img);
        labels.extend(lbl);
    }
    let n = labels.len();
    let mut ds = Dataset {
        name: format!("cifar10:{}", paths[0].display()),
        channels: 3,
        height: 32,
        width: 32,
        classes: CIFAR_CLASSES,
        images,
        labels,
        trainval: (0..n).collect(),
        test: Vec::new(),
        norm_mean: vec![],
        norm_std: vec![],
    };
    ds.normalize_in_place();
    Ok(ds)
}

/// Attach a separately loaded test set (e.g. t10k / test_batch) to a
/// training dataset.
pub fn merge_train_test(train: Dataset, test: Dataset) -> Result<Dataset> {
    if train.channels != test.channels || train.height != test.height || train.width != test.width
    {
        return Err(Error::config("train/test image shapes differ"));
    }
    let n_train = train.len();
    let mut images = train.images;
    images.extend(test.images);
    let mut labels = train.labels;
    labels.extend(test.labels);
    let n_total = labels.len();
    Ok(Dataset {
        name: train.name,
        channels: train.channels,
        height: train.height,
        width: train.width,
        classes: train.classes.max(test.classes),
        images,
        labels,
        trainval: (0..n_train).collect(),
        test: (n_train..n_total).collect(),
        norm_mean: train.norm_mean,
        norm_std: train.norm_std,
    })
}

// ---------------------------------------------------------------------------
// Splitting and batching
// ---------------------------------------------------------------------------

/// Cycling batch iterator; reshuffles its index order every epoch.
pub struct BatchStream {
    indices: Vec<usize>,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(indices: Vec<usize>, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if batch > indices.len() {
            return Err(Error::config(format!(
                "batch size {batch} exceeds split size {}",
                indices.len()
            )));
        }
        let mut s = BatchStream {
            indices,
            batch,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch)
    }

    /// Next batch of example indices; an epoch visits every index once.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn all_indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Split the original training set into disjoint search-train/search-val
/// halves (by `val_fraction`) and wrap both in batch streams.
pub fn split_and_batch(
    ds: &Dataset,
    val_fraction: f64,
    batch: usize,
    seed: u64,
) -> Result<(BatchStream, BatchStream)> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut pool = ds.trainval.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let val_n = ((pool.len() as f64) * val_fraction).round() as usize;
    let val_n = val_n.min(pool.len());
    let (val, train) = pool.split_at(val_n);
    let train_stream = BatchStream::new(train.to_vec(), batch, seed ^ 0xA5A5)?;
    let val_stream = BatchStream::new(val.to_vec(), batch, seed ^ 0x5A5A)?;
    Ok((train_stream, val_stream))
}

/// Zero a random `length×length` square per image, in place (train-time
/// augmentation).
pub fn cutout_in_place<E: Scalar>(images: &Tensor<E>, length: usize, rng: &mut ChaCha8Rng) {
    let shape = images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = images.data_mut();
    for i in 0..n {
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let y0 = cy.saturating_sub(length / 2);
        let y1 = (cy + length.div_ceil(2)).min(h);
        let x0 = cx.saturating_sub(length / 2);
        let x1 = (cx + length.div_ceil(2)).min(w);
        for ch in 0..c {
            for y in y0..y1 {
                let off = ((i * c + ch) * h + y) * w;
                for v in &mut data[off + x0..off + x1] {
                    *v = E::zero();
                }
            }
        }
    }
}
