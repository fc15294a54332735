//! Image datasets: MNIST (IDX) and CIFAR-10 binary ingestion, the float
//! tensor dump format, and noise-matched scenario construction.
//!
//! Images are stored channel-planar (`c, y, x` order) with pixel values in
//! `[0, 1]`, which is also the layout the convolutional network consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tags};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated stream: expected {expected} bytes, found {found}")]
    TruncatedStream { expected: usize, found: usize },
    #[error("IDX dimensions overflow addressable size")]
    DimensionOverflow,
    #[error("CIFAR-10 stream length {0} is not a multiple of 3073")]
    BadRecordLength(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image and label counts differ ({images} vs {labels})")]
    CountMismatch { images: usize, labels: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("datasets are identical: no perturbation to measure")]
    NoPerturbation,
    #[error("invalid perturbation statistics: {0}")]
    InvalidStats(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// A single image, channel-planar, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(DatasetError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 || pixels.len() != channels * height * width {
            return Err(DatasetError::InvalidImage(format!(
                "{} pixels for shape {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DatasetError::InvalidImage(format!("pixel {p} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image, clamping every pixel into `[0, 1]`.
    pub fn clamped(channels: usize, height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(channels, height, width, pixels)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
            .expect("valid zero image")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.pixels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Replaces pixel `i` (flat index), clamping to `[0, 1]`.
    pub fn set_clamped(&mut self, i: usize, v: f64) {
        self.pixels[i] = v.clamp(0.0, 1.0);
    }

    /// Same shape, new pixels, clamped.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Self> {
        Self::clamped(self.channels, self.height, self.width, pixels)
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn count_differing(&self, other: &Image) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Images paired with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(DatasetError::ShapeMismatch("images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
    pub fn images(&self) -> &[Image] {
        &self.images
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Concatenation of two datasets with identical class count.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut images = self.images.clone();
        images.extend(other.images.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(images, labels, self.num_classes.max(other.num_classes))
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Deterministic split into `(first, second)` where `second` holds
    /// `round(fraction * len)` samples chosen with the given seed.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut rng = rng::rng_for(seed, &[tags::SPLIT]);
        let mut chosen = index::sample(&mut rng, n, k).into_vec();
        chosen.sort_unstable();
        let mut mark = vec![false; n];
        for &i in &chosen {
            mark[i] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !mark[i]).collect();
        (self.subset(&rest), self.subset(&chosen))
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_TYPE_U8: u8 = 0x08;
const IDX_TYPE_F32: u8 = 0x0D;

/// Upper bound on a single IDX payload (4 GiB) to reject absurd headers.
const MAX_IDX_PAYLOAD: usize = 1 << 32;

fn read_all(mut r: impl Read) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DatasetError::TruncatedStream {
            expected: at + 4,
            found: buf.len(),
        })
}

struct IdxHeader {
    type_code: u8,
    dims: Vec<usize>,
    header_len: usize,
}

fn parse_idx_header(buf: &[u8]) -> Result<IdxHeader> {
    let magic = be_u32(buf, 0)?;
    if magic >> 16 != 0 {
        return Err(DatasetError::BadMagic(magic));
    }
    let type_code = ((magic >> 8) & 0xff) as u8;
    let ndims = (magic & 0xff) as usize;
    if ndims == 0 || (type_code != IDX_TYPE_U8 && type_code != IDX_TYPE_F32) {
        return Err(DatasetError::BadMagic(magic));
    }
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(be_u32(buf, 4 + 4 * k)? as usize);
    }
    Ok(IdxHeader {
        type_code,
        dims,
        header_len: 4 + 4 * ndims,
    })
}

fn payload_len(dims: &[usize], elem: usize) -> Result<usize> {
    let n = dims
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or(DatasetError::DimensionOverflow)?;
    if n > MAX_IDX_PAYLOAD {
        return Err(DatasetError::DimensionOverflow);
    }
    Ok(n)
}

fn payload<'a>(buf: &'a [u8], header: &IdxHeader, elem: usize) -> Result<&'a [u8]> {
    let n = payload_len(&header.dims, elem)?;
    let end = header.header_len + n;
    if buf.len() < end {
        return Err(DatasetError::TruncatedStream {
            expected: end,
            found: buf.len(),
        });
    }
    Ok(&buf[header.header_len..end])
}

/// Reads an IDX u8 image file (`0x00000803`, dims `n, rows, cols`).
pub fn read_idx_images(r: impl Read) -> Result<Vec<Image>> {
    let buf = read_all(r)?;
    let header = parse_idx_header(&buf)?;
    let magic = be_u32(&buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let (n, rows, cols) = (header.dims[0], header.dims[1], header.dims[2]);
    if rows == 0 || cols == 0 {
        return Err(DatasetError::ShapeMismatch("zero-sized image dimension".into()));
    }
    let data = payload(&buf, &header, 1)?;
    let per = rows * cols;
    (0..n)
        .map(|i| {
            let px = data[i * per..(i + 1) * per]
                .iter()
                .map(|&b| f64::from(b) / 255.0)
                .collect();
            Image::new(1, rows, cols, px)
        })
        .collect()
}

/// Reads an IDX u8 label file (`0x00000801`).
pub fn read_idx_labels(r: impl Read) -> Result<Vec<usize>> {
    let buf = read_all(r)?;
    let magic = be_u32(&buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let header = parse_idx_header(&buf)?;
    Ok(payload(&buf, &header, 1)?.iter().map(|&b| b as usize).collect())
}

/// Loads paired IDX image and label streams.
pub fn load_idx(images: impl Read, labels: impl Read, num_classes: usize) -> Result<LabeledDataset> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    LabeledDataset::new(imgs, labs, num_classes)
}

/// Opens a file, transparently decompressing gzip.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic)?;
    let head = std::io::Cursor::new(magic[..n].to_vec());
    let chained = head.chain(f);
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(chained)))
    } else {
        Ok(Box::new(chained))
    }
}

/// [`load_idx`] from file paths (plain or gzipped).
pub fn load_idx_files(images: &Path, labels: &Path, num_classes: usize) -> Result<LabeledDataset> {
    load_idx(open_maybe_gz(images)?, open_maybe_gz(labels)?, num_classes)
}

fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes grayscale images as IDX u8 (pixels quantized to `round(255·p)`).
pub fn write_idx_images(mut w: impl Write, images: &[Image]) -> Result<()> {
    let (rows, cols) = match images.first() {
        Some(im) if im.channels() != 1 => {
            return Err(DatasetError::ShapeMismatch("IDX images must be grayscale".into()))
        }
        Some(im) => (im.height(), im.width()),
        None => (0, 0),
    };
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [images.len(), rows, cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    for im in images {
        if im.shape() != (1, rows, cols) {
            return Err(DatasetError::ShapeMismatch("images differ in shape".into()));
        }
        let bytes: Vec<u8> = im.pixels().iter().map(|&p| quantize(p)).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_idx_labels(mut w: impl Write, labels: &[usize]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| DatasetError::LabelOutOfRange { label: l, classes: 256 }))
        .collect::<Result<_>>()?;
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx(dataset: &LabeledDataset, images: impl Write, labels: impl Write) -> Result<()> {
    write_idx_images(images, dataset.images())?;
    write_idx_labels(labels, dataset.labels())
}

/// Writes `images`/`labels` IDX files under `dir`.
pub fn write_idx_files(dataset: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    let mut wi = BufWriter::new(File::create(images)?);
    let mut wl = BufWriter::new(File::create(labels)?);
    write_idx(dataset, &mut wi, &mut wl)?;
    wi.flush()?;
    wl.flush()?;
    Ok(())
}

/// A float tensor in IDX layout with type code `0x0D` (big-endian f32).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_idx_f32(mut w: impl Write, tensor: &FloatTensor) -> Result<()> {
    if tensor.dims.is_empty() || tensor.dims.len() > 255 {
        return Err(DatasetError::ShapeMismatch("tensor rank must be 1..=255".into()));
    }
    if payload_len(&tensor.dims, 1)? != tensor.data.len() {
        return Err(DatasetError::ShapeMismatch("dims do not match data length".into()));
    }
    let magic = (u32::from(IDX_TYPE_F32) << 8) | tensor.dims.len() as u32;
    w.write_all(&magic.to_be_bytes())?;
    for &d in &tensor.dims {
        let d = u32::try_from(d).map_err(|_| DatasetError::DimensionOverflow)?;
        w.write_all(&d.to_be_bytes())?;
    }
    let mut bytes = Vec::with_capacity(tensor.data.len() * 4);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_idx_f32(r: impl Read) -> Result<FloatTensor> {
    let buf = read_all(r)?;
    let header = parse_idx_header(&buf)?;
    if header.type_code != IDX_TYPE_F32 {
        return Err(DatasetError::BadMagic(be_u32(&buf, 0)?));
    }
    let data = payload(&buf, &header, 4)?
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FloatTensor {
        dims: header.dims,
        data,
    })
}

/// Packs same-shaped images into an `n, c, h, w` float tensor.
pub fn images_to_tensor(images: &[Image]) -> FloatTensor {
    let (c, h, w) = images.first().map_or((1, 1, 1), Image::shape);
    FloatTensor {
        dims: vec![images.len(), c, h, w],
        data: images
            .iter()
            .flat_map(|im| im.pixels().iter().map(|&p| p as f32))
            .collect(),
    }
}

pub fn tensor_to_images(t: &FloatTensor) -> Result<Vec<Image>> {
    if t.dims.len() != 4 {
        return Err(DatasetError::ShapeMismatch("expected an n,c,h,w tensor".into()));
    }
    let (n, c, h, w) = (t.dims[0], t.dims[1], t.dims[2], t.dims[3]);
    let per = c * h * w;
    (0..n)
        .map(|i| {
            Image::clamped(
                c,
                h,
                w,
                t.data[i * per..(i + 1) * per].iter().map(|&v| f64::from(v)).collect(),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CIFAR-10
// ---------------------------------------------------------------------------

pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Reads CIFAR-10 binary records: 1 label byte, then 1024 R, 1024 G, 1024 B.
pub fn load_cifar10(r: impl Read) -> Result<LabeledDataset> {
    let buf = read_all(r)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DatasetError::BadRecordLength(buf.len()));
    }
    let mut images = Vec::with_capacity(buf.len() / CIFAR_RECORD_LEN);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in buf.chunks_exact(CIFAR_RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DatasetError::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        let px = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(Image::new(3, CIFAR_SIDE, CIFAR_SIDE, px)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES)
}

/// Loads and concatenates several CIFAR-10 batch files.
pub fn load_cifar10_files(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut out: Option<LabeledDataset> = None;
    for p in paths {
        let ds = load_cifar10(open_maybe_gz(p.as_ref())?)?;
        out = Some(match out {
            None => ds,
            Some(acc) => acc.concat(&ds)?,
        });
    }
    out.ok_or(DatasetError::BadRecordLength(0))
}

pub fn write_cifar10(mut w: impl Write, dataset: &LabeledDataset) -> Result<()> {
    for (im, label) in dataset.iter() {
        if im.shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
            return Err(DatasetError::ShapeMismatch("CIFAR images are 3x32x32".into()));
        }
        if label >= CIFAR_CLASSES {
            return Err(DatasetError::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        let mut rec = Vec::with_capacity(CIFAR_RECORD_LEN);
        rec.push(label as u8);
        rec.extend(im.pixels().iter().map(|&p| quantize(p)));
        w.write_all(&rec)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Perturbation statistics and matched noise
// ---------------------------------------------------------------------------

/// Moments of the nonzero per-pixel attack perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub mean: f64,
    pub variance: f64,
    /// Mean number of altered pixels per image.
    pub modified_pixel_count: f64,
}

/// Mean and variance over all nonzero differences `attacked - original`.
pub fn estimate_perturbation_stats(
    originals: &LabeledDataset,
    attacked: &LabeledDataset,
) -> Result<PerturbationStats> {
    estimate_perturbation_stats_images(originals.images(), attacked.images())
}

pub fn estimate_perturbation_stats_images(
    originals: &[Image],
    attacked: &[Image],
) -> Result<PerturbationStats> {
    if originals.len() != attacked.len() || originals.is_empty() {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} originals vs {} attacked",
            originals.len(),
            attacked.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (o, a) in originals.iter().zip(attacked) {
        if o.shape() != a.shape() {
            return Err(DatasetError::ShapeMismatch("paired images differ in shape".into()));
        }
        for (x, y) in o.pixels().iter().zip(a.pixels()) {
            let d = y - x;
            if d != 0.0 {
                sum += d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(DatasetError::NoPerturbation);
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for (o, a) in originals.iter().zip(attacked) {
        for (x, y) in o.pixels().iter().zip(a.pixels()) {
            let d = y - x;
            if d != 0.0 {
                ss += (d - mean) * (d - mean);
            }
        }
    }
    Ok(PerturbationStats {
        mean,
        variance: ss / count as f64,
        modified_pixel_count: count as f64 / originals.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Noise on every pixel (FGSM/CW-matched).
    Global,
    /// Noise on a uniformly drawn subset of `round(modified_pixel_count)` pixels (JSMA-matched).
    Subset,
}

/// Half-up rounding of the subset size.
fn subset_size(count: f64) -> usize {
    (count + 0.5).floor().max(0.0) as usize
}

/// Adds Gaussian noise with the attack's perturbation moments; results are clamped to `[0, 1]`.
pub fn add_matched_noise(
    data: &LabeledDataset,
    stats: &PerturbationStats,
    mode: NoiseMode,
    seed: u64,
) -> Result<LabeledDataset> {
    let images = add_matched_noise_images(data.images(), stats, mode, seed)?;
    LabeledDataset::new(images, data.labels().to_vec(), data.num_classes())
}

pub fn add_matched_noise_images(
    images: &[Image],
    stats: &PerturbationStats,
    mode: NoiseMode,
    seed: u64,
) -> Result<Vec<Image>> {
    if !stats.mean.is_finite() || !stats.variance.is_finite() || stats.variance < 0.0 {
        return Err(DatasetError::InvalidStats(format!(
            "mean {} variance {}",
            stats.mean, stats.variance
        )));
    }
    if !stats.modified_pixel_count.is_finite() || stats.modified_pixel_count < 0.0 {
        return Err(DatasetError::InvalidStats(format!(
            "modified pixel count {}",
            stats.modified_pixel_count
        )));
    }
    let normal = Normal::new(stats.mean, stats.variance.sqrt())
        .map_err(|e| DatasetError::InvalidStats(e.to_string()))?;
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let mut rng = rng::rng_for(seed, &[tags::NOISE, i as u64]);
            let mut px = im.pixels().to_vec();
            match mode {
                NoiseMode::Global => {
                    for p in &mut px {
                        *p += normal.sample(&mut rng);
                    }
                }
                NoiseMode::Subset => {
                    let k = subset_size(stats.modified_pixel_count).min(px.len());
                    let mut chosen = index::sample(&mut rng, px.len(), k).into_vec();
                    chosen.sort_unstable();
                    for j in chosen {
                        px[j] += normal.sample(&mut rng);
                    }
                }
            }
            im.with_pixels(px)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        im.extend_from_slice(&0x0803u32.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(&2u32.to_be_bytes());
        im.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let mut lb = Vec::new();
        lb.extend_from_slice(&0x0801u32.to_be_bytes());
        lb.extend_from_slice(&2u32.to_be_bytes());
        lb.extend_from_slice(&[7, 3]);
        (im, lb)
    }

    fn random_gray_dataset(seed: u64, n: usize, h: usize, w: usize) -> LabeledDataset {
        let mut rng = rng_for(seed, &[]);
        let images = (0..n)
            .map(|_| {
                let px = (0..h * w).map(|_| f64::from(rng.random::<u8>()) / 255.0).collect();
                Image::new(1, h, w, px).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
        LabeledDataset::new(images, labels, 10).unwrap()
    }

    #[test]
    fn load_handcrafted_idx() {
        let (im, lb) = idx_fixture();
        let ds = load_idx(&im[..], &lb[..], 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.images()[0].pixels(), &[0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(ds.images()[1].pixels(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
    }

    #[test]
    fn idx_truncated_and_bad_magic() {
        let mut im = Vec::new();
        im.extend_from_slice(&0x0803u32.to_be_bytes());
        for d in [10u32, 2, 2] {
            im.extend_from_slice(&d.to_be_bytes());
        }
        im.extend_from_slice(&[0u8; 20]); // 5 images of payload
        assert!(matches!(
            read_idx_images(&im[..]),
            Err(DatasetError::TruncatedStream { expected: 56, found: 36 })
        ));
        let bad = [0x12u8, 0x34, 0x56, 0x78];
        assert!(matches!(read_idx_images(&bad[..]), Err(DatasetError::BadMagic(_))));
        let (_, lb) = idx_fixture();
        assert!(matches!(read_idx_images(&lb[..]), Err(DatasetError::BadMagic(0x801))));
    }

    #[test]
    fn idx_dimension_overflow() {
        let mut im = Vec::new();
        im.extend_from_slice(&0x0803u32.to_be_bytes());
        for d in [u32::MAX, u32::MAX, u32::MAX] {
            im.extend_from_slice(&d.to_be_bytes());
        }
        assert!(matches!(read_idx_images(&im[..]), Err(DatasetError::DimensionOverflow)));
    }

    #[test]
    fn idx_round_trip_random() {
        let ds = random_gray_dataset(3, 17, 5, 4);
        let (mut wi, mut wl) = (Vec::new(), Vec::new());
        write_idx(&ds, &mut wi, &mut wl).unwrap();
        let back = load_idx(&wi[..], &wl[..], 10).unwrap();
        assert_eq!(back, ds);
        let (mut wi2, mut wl2) = (Vec::new(), Vec::new());
        write_idx(&back, &mut wi2, &mut wl2).unwrap();
        assert_eq!(wi, wi2);
        assert_eq!(wl, wl2);
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![6u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let ds = load_cifar10(&rec[..]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[6]);
        let im = &ds.images()[0];
        assert_eq!(im.shape(), (3, 32, 32));
        // channel-planar: G plane starts at byte 1024
        assert_eq!(im.get(1, 0, 0), f64::from((1024 % 251) as u8) / 255.0);
        assert_eq!(im.get(2, 31, 31), f64::from((3071 % 251) as u8) / 255.0);
    }

    #[test]
    fn cifar_errors() {
        assert!(matches!(
            load_cifar10(&vec![0u8; 3072][..]),
            Err(DatasetError::BadRecordLength(3072))
        ));
        let mut rec = vec![10u8];
        rec.extend(vec![0u8; 3072]);
        assert!(matches!(
            load_cifar10(&rec[..]),
            Err(DatasetError::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn float_tensor_round_trip() {
        let t = FloatTensor {
            dims: vec![2, 3],
            data: vec![0.5, -1.25, 3.0e-7, 1e9, f32::MIN_POSITIVE, 0.0],
        };
        let mut buf = Vec::new();
        write_idx_f32(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0x0D, 2]);
        assert_eq!(read_idx_f32(&buf[..]).unwrap(), t);
    }

    #[test]
    fn stats_constant_shift() {
        let ds = LabeledDataset::new(vec![Image::zeros(1, 2, 2); 3], vec![0, 1, 0], 2).unwrap();
        let shifted = LabeledDataset::new(
            vec![Image::new(1, 2, 2, vec![0.1; 4]).unwrap(); 3],
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let s = estimate_perturbation_stats(&ds, &shifted).unwrap();
        assert!((s.mean - 0.1).abs() < 1e-15);
        assert!(s.variance.abs() < 1e-20);
        assert_eq!(s.modified_pixel_count, 4.0);
    }

    #[test]
    fn stats_single_pixel() {
        let orig = vec![Image::zeros(1, 2, 2); 2];
        let mut a = Image::zeros(1, 2, 2);
        a.set_clamped(1, 0.5);
        let mut b = Image::zeros(1, 2, 2);
        b.set_clamped(3, 0.5);
        let s = estimate_perturbation_stats_images(&orig, &[a, b]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.modified_pixel_count, 1.0);
    }

    #[test]
    fn stats_errors() {
        let ds = random_gray_dataset(1, 4, 3, 3);
        assert!(matches!(
            estimate_perturbation_stats(&ds, &ds),
            Err(DatasetError::NoPerturbation)
        ));
        let other = random_gray_dataset(1, 3, 3, 3);
        assert!(matches!(
            estimate_perturbation_stats(&ds, &other),
            Err(DatasetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let ds = random_gray_dataset(9, 20, 6, 6);
        let mut rng = rng_for(10, &[]);
        let attacked: Vec<Image> = ds
            .images()
            .iter()
            .map(|im| {
                let mut px = im.pixels().to_vec();
                for _ in 0..5 {
                    let j = rng.random_range(0..px.len());
                    px[j] = rng.random::<f64>();
                }
                im.with_pixels(px).unwrap()
            })
            .collect();
        let s = estimate_perturbation_stats_images(ds.images(), &attacked).unwrap();
        let deltas: Vec<f64> = ds
            .images()
            .iter()
            .zip(&attacked)
            .flat_map(|(o, a)| {
                o.pixels()
                    .iter()
                    .zip(a.pixels())
                    .map(|(x, y)| y - x)
                    .filter(|d| *d != 0.0)
                    .collect::<Vec<_>>()
            })
            .collect();
        let m = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let v = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / deltas.len() as f64;
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.variance - v).abs() < 1e-12);
        assert!((s.modified_pixel_count - deltas.len() as f64 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn noise_degenerate_gaussian_is_shift() {
        let ds = random_gray_dataset(2, 5, 4, 4);
        let stats = PerturbationStats {
            mean: 0.1,
            variance: 0.0,
            modified_pixel_count: 16.0,
        };
        let noisy = add_matched_noise(&ds, &stats, NoiseMode::Global, 1).unwrap();
        for (o, n) in ds.images().iter().zip(noisy.images()) {
            for (x, y) in o.pixels().iter().zip(n.pixels()) {
                assert!((y - (x + 0.1).min(1.0)).abs() < 1e-15);
            }
        }
        assert_eq!(noisy.labels(), ds.labels());
    }

    #[test]
    fn noise_empty_subset_is_identity() {
        let ds = random_gray_dataset(4, 5, 4, 4);
        let stats = PerturbationStats {
            mean: 0.3,
            variance: 0.01,
            modified_pixel_count: 0.2,
        };
        let noisy = add_matched_noise(&ds, &stats, NoiseMode::Subset, 1).unwrap();
        assert_eq!(noisy, ds);
    }

    #[test]
    fn noise_subset_size_rounds_half_up() {
        assert_eq!(subset_size(2.5), 3);
        assert_eq!(subset_size(2.49), 2);
        let ds = LabeledDataset::new(vec![Image::new(1, 4, 4, vec![0.5; 16]).unwrap()], vec![0], 1).unwrap();
        let stats = PerturbationStats {
            mean: 0.2,
            variance: 0.0,
            modified_pixel_count: 2.5,
        };
        let noisy = add_matched_noise(&ds, &stats, NoiseMode::Subset, 5).unwrap();
        assert_eq!(noisy.images()[0].count_differing(&ds.images()[0]), 3);
    }

    #[test]
    fn noise_global_sample_moments() {
        // Mid-gray images so the clamp never engages.
        let n = 40;
        let ds = LabeledDataset::new(
            vec![Image::new(1, 10, 10, vec![0.5; 100]).unwrap(); n],
            vec![0; n],
            1,
        )
        .unwrap();
        let stats = PerturbationStats {
            mean: 0.02,
            variance: 0.0025,
            modified_pixel_count: 100.0,
        };
        let noisy = add_matched_noise(&ds, &stats, NoiseMode::Global, 77).unwrap();
        let deltas: Vec<f64> = noisy
            .images()
            .iter()
            .flat_map(|im| im.pixels().iter().map(|p| p - 0.5).collect::<Vec<_>>())
            .collect();
        let m = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let v = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64;
        let count = deltas.len() as f64;
        let se_mean = (stats.variance / count).sqrt();
        let se_var = stats.variance * (2.0 / (count - 1.0)).sqrt();
        assert!((m - stats.mean).abs() <= 3.0 * se_mean, "mean {m}");
        assert!((v - stats.variance).abs() <= 3.0 * se_var, "var {v}");
    }

    #[test]
    fn noise_rejects_invalid_stats() {
        let ds = random_gray_dataset(2, 2, 2, 2);
        let stats = PerturbationStats {
            mean: 0.0,
            variance: -1.0,
            modified_pixel_count: 1.0,
        };
        assert!(matches!(
            add_matched_noise(&ds, &stats, NoiseMode::Global, 0),
            Err(DatasetError::InvalidStats(_))
        ));
    }

    proptest! {
        #[test]
        fn cifar_round_trip_is_byte_identical(bytes in prop::collection::vec(any::<u8>(), 3072), label in 0u8..10) {
            let mut rec = vec![label];
            rec.extend(bytes);
            let ds = load_cifar10(&rec[..]).unwrap();
            let mut out = Vec::new();
            write_cifar10(&mut out, &ds).unwrap();
            prop_assert_eq!(out, rec);
        }

        #[test]
        fn noise_preserves_shape_labels_and_range(seed in any::<u64>(), mean in -0.5f64..0.5, var in 0.0f64..0.2, count in 0.0f64..20.0, subset in any::<bool>()) {
            let ds = random_gray_dataset(seed, 3, 4, 5);
            let stats = PerturbationStats { mean, variance: var, modified_pixel_count: count };
            let mode = if subset { NoiseMode::Subset } else { NoiseMode::Global };
            let noisy = add_matched_noise(&ds, &stats, mode, seed).unwrap();
            prop_assert_eq!(noisy.labels(), ds.labels());
            for (o, n) in ds.images().iter().zip(noisy.images()) {
                prop_assert_eq!(o.shape(), n.shape());
                prop_assert!(n.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
