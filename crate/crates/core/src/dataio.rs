//! Dataset ingestion: CIFAR-10 binary batches, IDX files and a seeded
//! synthetic generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file size {size} is not a positive multiple of the {record}-byte record")]
    SizeMismatch { size: usize, record: usize },
    #[error("label {label} at record {index} outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("IDX header truncated or dimensions inconsistent with file size")]
    BadDimensions,
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Shape of one sample, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel normalization `(x - mean) / std` applied at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images normalized to reals, stored contiguously as `count x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        shape: ImageShape,
        images: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no samples".into()));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(DataError::Invalid(format!(
                "{} pixel values for {} samples of size {}",
                images.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        Ok(Self { shape, images, labels, classes, normalization })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.shape.len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Subset by indices, keeping order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * self.shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.shape, images, labels, self.classes, self.normalization.clone())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const IDX_MEAN: f64 = 0.1307;
pub const IDX_STD: f64 = 0.3081;

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&read(path.as_ref())?)
}

/// Parses `label u8 | 1024 R | 1024 G | 1024 B` records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(DataError::SizeMismatch { size: bytes.len(), record: CIFAR10_RECORD });
    }
    let shape = ImageShape::new(3, 32, 32);
    let count = bytes.len() / CIFAR10_RECORD;
    let mut images = Vec::with_capacity(count * shape.len());
    let mut labels = Vec::with_capacity(count);
    for (index, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(DataError::LabelOutOfRange { index, label, classes: 10 });
        }
        labels.push(label);
        for (c, plane) in record[1..].chunks_exact(1024).enumerate() {
            images.extend(
                plane.iter().map(|&px| (px as f64 / 255.0 - CIFAR10_MEAN[c]) / CIFAR10_STD[c]),
            );
        }
    }
    Dataset::new(
        shape,
        images,
        labels,
        10,
        Normalization { mean: CIFAR10_MEAN.to_vec(), std: CIFAR10_STD.to_vec() },
    )
}

/// Writes raw records in the CIFAR-10 binary layout.
pub fn write_cifar10_binary(path: impl AsRef<Path>, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(records.len() * CIFAR10_RECORD);
    for (label, pixels) in records {
        if pixels.len() != CIFAR10_RECORD - 1 {
            return Err(DataError::Invalid(format!("record with {} pixel bytes", pixels.len())));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    fs::write(path, out).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::BadDimensions)
}

fn parse_idx_images(bytes: &[u8]) -> Result<(ImageShape, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if count == 0 || rows == 0 || cols == 0 || body.len() != count * rows * cols {
        return Err(DataError::BadDimensions);
    }
    Ok((ImageShape::new(1, rows, cols), body.to_vec()))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::BadDimensions);
    }
    Ok(body.to_vec())
}

/// Loads an IDX image file (`0x00000803`) with its label file (`0x00000801`).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (shape, pixels) = parse_idx_images(image_bytes)?;
    let raw_labels = parse_idx_labels(label_bytes)?;
    let count = pixels.len() / shape.len();
    if count != raw_labels.len() {
        return Err(DataError::CountMismatch { images: count, labels: raw_labels.len() });
    }
    let classes = raw_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    let images = pixels.iter().map(|&px| (px as f64 / 255.0 - IDX_MEAN) / IDX_STD).collect();
    Dataset::new(
        shape,
        images,
        raw_labels.into_iter().map(usize::from).collect(),
        classes,
        Normalization { mean: vec![IDX_MEAN], std: vec![IDX_STD] },
    )
}

/// Default sample shape for [`synthetic_classification`].
pub const SYNTHETIC_SHAPE: ImageShape = ImageShape { channels: 3, height: 12, width: 12 };

pub fn synthetic_classification(
    seed: u64,
    n: usize,
    classes: usize,
    difficulty: f64,
) -> Result<Dataset> {
    synthetic_with_shape(seed, n, classes, difficulty, SYNTHETIC_SHAPE)
}

/// Gaussian blobs around one random template image per class.
///
/// Templates are unit-variance per pixel; samples add isotropic noise with
/// standard deviation `0.1 + difficulty`. Labels cycle through the classes so
/// every class is represented.
pub fn synthetic_with_shape(
    seed: u64,
    n: usize,
    classes: usize,
    difficulty: f64,
    shape: ImageShape,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(DataError::Invalid(format!("need n >= classes >= 2, got n={n}, classes={classes}")));
    }
    if !(difficulty >= 0.0 && difficulty.is_finite()) || shape.is_empty() {
        return Err(DataError::Invalid("difficulty must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = shape.len();
    let templates: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect()).collect();
    let sigma = 0.1 + difficulty;
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        images.extend(templates[label].iter().map(|&t| t + sigma * gaussian(&mut rng)));
    }
    // shuffle sample order so minibatches are not class-periodic
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut shuffled = Vec::with_capacity(n * dim);
    for &i in &order {
        shuffled.extend_from_slice(&images[i * dim..(i + 1) * dim]);
    }
    let labels = order.iter().map(|&i| labels[i]).collect();
    let plane = shape.height * shape.width;
    let (mut mean, mut std) = (vec![0.0; shape.channels], vec![1.0; shape.channels]);
    for c in 0..shape.channels {
        let values = || (0..n).flat_map(|s| shuffled[s * dim + c * plane..s * dim + (c + 1) * plane].iter());
        let count = (n * plane) as f64;
        let m = values().sum::<f64>() / count;
        let v = values().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
        mean[c] = m;
        std[c] = v.sqrt().max(1e-12);
    }
    for s in 0..n {
        for c in 0..shape.channels {
            for x in &mut shuffled[s * dim + c * plane..s * dim + (c + 1) * plane] {
                *x = (*x - mean[c]) / std[c];
            }
        }
    }
    Dataset::new(shape, shuffled, labels, classes, Normalization { mean, std })
}

/// Standard normal draw (Box-Muller).
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random horizontal flip and shifted crop with zero fill, in place.
pub fn augment(image: &mut [f64], shape: ImageShape, max_shift: usize, rng: &mut impl Rng) {
    let (h, w) = (shape.height, shape.width);
    let flip = rng.gen_bool(0.5);
    let span = 2 * max_shift as i64 + 1;
    let dy = rng.gen_range(0..span) - max_shift as i64;
    let dx = rng.gen_range(0..span) - max_shift as i64;
    let src = image.to_vec();
    for c in 0..shape.channels {
        for y in 0..h {
            for x in 0..w {
                let sy = y as i64 + dy;
                let sx0 = x as i64 + dx;
                let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    src[c * h * w + sy as usize * w + sx as usize]
                } else {
                    0.0
                };
                image[c * h * w + y * w + x] = v;
            }
        }
    }
}
