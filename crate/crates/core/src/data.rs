//! Datasets: IDX and CIFAR-10 binary readers, a synthetic pattern
//! generator, and pad-crop-flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Images `[N, C, H, W]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Length { expected: images.shape()[0], actual: labels.len() });
        }
        Ok(Self { images, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    /// Gathers `indices` into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.images.data()[i * len..(i + 1) * len].iter().map(|&v| T::of(v)));
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch::<f64>(&idx);
        Self { images, labels, name: self.name.clone() }
    }

    /// Splits off the trailing `fraction` of samples.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let cut = self.len() - ((self.len() as f64 * fraction).round() as usize).min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        let make = |idx: &[usize]| {
            let (images, labels) = self.batch::<f64>(idx);
            Self { images, labels, name: self.name.clone() }
        };
        (make(&head), make(&tail))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length { expected: at + 4, actual: bytes.len() })
}

fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let observed = be_u32(bytes, 0)?;
    if observed != magic {
        return Err(Error::Format(format!("{what}: bad IDX magic 0x{observed:08X}, expected 0x{magic:08X}")));
    }
    let ndim = (magic & 0xFF) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    Ok((dims, 4 + 4 * ndim))
}

/// Parses IDX image bytes (`0x00000803`) into `[N, 1, H, W]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (dims, off) = idx_header(bytes, IDX_IMAGES_MAGIC, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let need = off + n * h * w;
    if bytes.len() < need {
        return Err(Error::Length { expected: need, actual: bytes.len() });
    }
    Tensor::new(&[n, 1, h, w], bytes[off..need].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses IDX label bytes (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, off) = idx_header(bytes, IDX_LABELS_MAGIC, "labels")?;
    let need = off + dims[0];
    if bytes.len() < need {
        return Err(Error::Length { expected: need, actual: bytes.len() });
    }
    Ok(bytes[off..need].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let name = images_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(images, labels, name)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes single-channel images and labels as IDX byte streams.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (c, h, w) = ds.image_shape();
    if c != 1 {
        return Err(Error::Format(format!("IDX images are single-channel, got {c} channels")));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Format(format!("label {l} does not fit a byte")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| to_byte(v)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Parses concatenated CIFAR-10 records: one label byte then 3072
/// channel-planar pixels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10(batch_files: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in batch_files {
        let (p, l) = parse_cifar10(&read(f)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Format("no CIFAR-10 records".into()));
    }
    Dataset::new(Tensor::new(&[labels.len(), 3, 32, 32], pixels)?, labels, "cifar10")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Locates a named dataset below `root`: `mnist` and `fashion-mnist` use the
/// standard IDX file names, `cifar10` the binary batches (directly or inside
/// `cifar-10-batches-bin/`).
pub fn load_named(name: &str, root: &Path, split: Split) -> Result<Dataset> {
    match name {
        "mnist" | "fashion-mnist" | "fashion" => {
            let prefix = if split == Split::Train { "train" } else { "t10k" };
            let find = |kind: &str| -> PathBuf {
                let base = format!("{prefix}-{kind}");
                for cand in [format!("{base}-ubyte"), format!("{}-ubyte", base.replace("-idx", ".idx"))] {
                    let p = root.join(&cand);
                    if p.exists() {
                        return p;
                    }
                }
                root.join(format!("{base}-ubyte"))
            };
            let mut ds = load_idx(&find("images-idx3"), &find("labels-idx1"))?;
            ds.name = name.into();
            Ok(ds)
        }
        "cifar10" | "cifar-10" => {
            let dir = if root.join("cifar-10-batches-bin").is_dir() { root.join("cifar-10-batches-bin") } else { root.to_path_buf() };
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar10(&files)
        }
        _ => Err(Error::Config(format!("unknown dataset '{name}' (mnist|fashion-mnist|cifar10|synthetic)"))),
    }
}

/// Deterministic class-dependent patterns: class `k` draws a bar at angle
/// `k·π/classes`, odd classes add a blob on the bar's normal. Position,
/// width and intensity are jittered and uniform noise is added; pixels are
/// quantized to `k/255` so the IDX encoding is lossless.
pub fn synthetic(classes: usize, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Config(format!("synthetic images need size >= 8, got {size}")));
    }
    if classes == 0 || n_per_class == 0 {
        return Err(Error::Config("synthetic dataset needs classes and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let s = size as f64;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = std::f64::consts::PI * k as f64 / classes as f64 + rng.random_range(-0.12..0.12);
        let (dx, dy) = (angle.cos(), angle.sin());
        let cx = s / 2.0 + rng.random_range(-s / 6.0..s / 6.0);
        let cy = s / 2.0 + rng.random_range(-s / 6.0..s / 6.0);
        let width = rng.random_range(0.06..0.11) * s;
        let half_len = rng.random_range(0.28..0.4) * s;
        let amp = rng.random_range(0.6..1.0);
        let blob = (k % 2 == 1).then(|| {
            let off = rng.random_range(0.15..0.25) * s;
            (cx - dy * off, cy + dx * off, rng.random_range(0.07..0.1) * s)
        });
        let noise = rng.random_range(0.05..0.2);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                let fade = ((half_len - along.abs()) / width).clamp(0.0, 1.0);
                let mut v = amp * fade * (-(across * across) / (2.0 * width * width)).exp();
                if let Some((bx, by, r)) = blob {
                    let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                v += noise * rng.random::<f64>();
                data.push(to_byte(v) as f64 / 255.0);
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(&[n, 1, size, size], data)?, labels, "synthetic")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub random_crop: bool,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, random_crop: true, hflip: true, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { pad: 0, random_crop: false, hflip: false, seed: 0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && (self.pad == 0 || !self.random_crop)
    }
}

/// Crop offsets into the padded image and the flip coin of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

/// Zero-pads by `pad`, crops back to the original size at the drawn offsets
/// and optionally mirrors horizontally.
pub fn apply_draws<T: Scalar>(batch: &Tensor<T>, pad: usize, draws: &[AugmentDraw]) -> Tensor<T> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = vec![T::zero(); batch.len()];
    let src = batch.data();
    for (b, draw) in draws.iter().enumerate() {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = (y + draw.dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ox = if draw.flip { w - 1 - x } else { x };
                    let sx = (ox + draw.dx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

pub fn draw_augment<R: Rng + ?Sized>(batch_size: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<AugmentDraw> {
    (0..batch_size)
        .map(|_| {
            let (dy, dx) = if cfg.random_crop && cfg.pad > 0 {
                (rng.random_range(0..=2 * cfg.pad), rng.random_range(0..=2 * cfg.pad))
            } else {
                (cfg.pad, cfg.pad)
            };
            let flip = cfg.hflip && rng.random_bool(0.5);
            AugmentDraw { dy, dx, flip }
        })
        .collect()
}

/// Augments a batch with randomness drawn from `rng`.
pub fn augment_with<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<T> {
    if cfg.is_identity() {
        return batch.clone();
    }
    let draws = draw_augment(batch.shape()[0], cfg, rng);
    apply_draws(batch, cfg.pad, &draws)
}

/// Augments a batch deterministically from `cfg.seed`.
pub fn augment<T: Scalar>(batch: &Tensor<T>, cfg: &AugmentConfig) -> Tensor<T> {
    augment_with(batch, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}
