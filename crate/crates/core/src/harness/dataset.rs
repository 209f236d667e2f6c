//! Labeled image sets: IDX files and a procedural shape generator.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticSpec),
    Derived(String),
}

/// Images `[n, C, H, W]` with values in `[0, 1]` and labels in `[0, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!(
                "images must be [n, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if images
            .data()
            .iter()
            .any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
        {
            return Err(Error::invalid(
                "image values must be finite and within [0, 1]",
            ));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn per_sample(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> Tensor<T> {
        self.images.batch_item(i)
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset<T> {
        let per = self.per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: Provenance::Derived(format!("subset of {} samples", indices.len())),
        }
    }

    /// Up to `per_class` randomly chosen samples of each class, kept in
    /// their original order.
    pub fn take_per_class(&self, per_class: usize, seed: u64) -> Dataset<T> {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::new();
        for c in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            chosen.extend(idx);
        }
        chosen.sort_unstable();
        self.select(&chosen)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// Load an IDX image/label pair; pixels are scaled by 1/255.
    pub fn load_idx(
        images: impl AsRef<Path>,
        labels: impl AsRef<Path>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let (n, h, w, pixels) = read_idx_images(&fs::read(images.as_ref())?)?;
        let lab = read_idx_labels(&fs::read(labels.as_ref())?)?;
        if lab.len() != n {
            return Err(Error::format(format!(
                "{n} images but {} labels",
                lab.len()
            )));
        }
        let data = pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        let images_t = Tensor::new([n, 1, h, w], data)?;
        Dataset::new(
            images_t,
            lab.into_iter().map(usize::from).collect(),
            num_classes,
            split,
            Provenance::Idx {
                images: images.as_ref().to_path_buf(),
                labels: labels.as_ref().to_path_buf(),
            },
        )
    }
}

/// Parse an IDX3 image file into `(count, rows, cols, bytes)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = bytes;
    let head = |r: &mut &[u8]| {
        r.read_u32::<BigEndian>()
            .map_err(|_| Error::format("truncated IDX header"))
    };
    let magic = head(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "IDX image magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let n = head(&mut r)? as usize;
    let h = head(&mut r)? as usize;
    let w = head(&mut r)? as usize;
    if r.len() != n * h * w {
        return Err(Error::format(format!(
            "IDX image payload is {} bytes, header implies {}",
            r.len(),
            n * h * w
        )));
    }
    Ok((n, h, w, r.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = bytes;
    let head = |r: &mut &[u8]| {
        r.read_u32::<BigEndian>()
            .map_err(|_| Error::format("truncated IDX header"))
    };
    let magic = head(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "IDX label magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let n = head(&mut r)? as usize;
    if r.len() != n {
        return Err(Error::format(format!(
            "IDX label payload is {} bytes, header implies {n}",
            r.len()
        )));
    }
    Ok(r.to_vec())
}

pub fn write_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * h * w {
        return Err(Error::invalid("pixel count does not match dimensions"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.write_u32::<BigEndian>(v)?;
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    Ok(out)
}

/// Write a single-channel dataset as an IDX pair, quantizing to bytes.
pub fn save_idx<T: Scalar>(
    ds: &Dataset<T>,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::invalid("IDX export needs single-channel images"));
    }
    let px: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let lab = ds
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::invalid("label exceeds 255")))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(images, write_idx_images(s[0], s[2], s[3], &px)?)?;
    fs::write(labels, write_idx_labels(&lab)?)?;
    Ok(())
}

/// Parameters of the procedural shape generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// 0 renders every sample of a class identically; 1 is full jitter.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            classes: 10,
            per_class: 500,
            size: 32,
            jitter: 1.0,
        }
    }
}

pub const SHAPE_NAMES: [&str; 10] = [
    "disk",
    "ring",
    "square",
    "frame",
    "hbar",
    "vbar",
    "diagonal",
    "antidiagonal",
    "plus",
    "triangle",
];

/// Signed distance (in pixels, negative inside) of shape `class` at the
/// local point `(x, y)` for scale `r` and stroke half-width `t`.
fn shape_sdf(class: usize, x: f64, y: f64, r: f64, t: f64) -> f64 {
    let boxd = |x: f64, y: f64, hx: f64, hy: f64| {
        let dx = x.abs() - hx;
        let dy = y.abs() - hy;
        dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
    };
    let rot = |x: f64, y: f64, a: f64| (x * a.cos() + y * a.sin(), -x * a.sin() + y * a.cos());
    let q = std::f64::consts::FRAC_PI_4;
    match class {
        0 => x.hypot(y) - r,
        1 => (x.hypot(y) - r).abs() - t,
        2 => boxd(x, y, 0.8 * r, 0.8 * r),
        3 => boxd(x, y, 0.8 * r, 0.8 * r).abs() - t,
        4 => boxd(x, y, r, t),
        5 => boxd(x, y, t, r),
        6 => {
            let (u, v) = rot(x, y, q);
            boxd(u, v, 1.1 * r, t)
        }
        7 => {
            let (u, v) = rot(x, y, -q);
            boxd(u, v, 1.1 * r, t)
        }
        8 => boxd(x, y, r, t).min(boxd(x, y, t, r)),
        _ => {
            // upward triangle as the intersection of three half-planes
            let s3 = 3f64.sqrt() / 2.0;
            let d1 = y - 0.5 * r;
            let d2 = -s3 * x - 0.5 * y - 0.5 * r;
            let d3 = s3 * x - 0.5 * y - 0.5 * r;
            d1.max(d2).max(d3)
        }
    }
}

/// Render one shape image `size × size` with values in `[0, 1]`.
fn render_shape(class: usize, size: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut u = |span: f64| {
        if jitter > 0.0 {
            rng.gen_range(-span..=span) * jitter
        } else {
            0.0
        }
    };
    let s = size as f64;
    let cx = s / 2.0 + u(0.15 * s);
    let cy = s / 2.0 + u(0.15 * s);
    let r = 0.28 * s * (1.0 + u(0.25));
    let t = (0.06 * s * (1.0 + u(0.3))).max(1.0);
    let angle = u(0.4);
    // low, varying contrast over a gray background
    let background = 0.15 + u(0.1);
    let contrast = 0.6 + u(0.25);
    let (sa, ca) = angle.sin_cos();
    let mut out = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let (x, y) = (dx * ca + dy * sa, -dx * sa + dy * ca);
            let cover = (0.5 - shape_sdf(class, x, y, r, t)).clamp(0.0, 1.0);
            out[py * size + px] = (background + contrast * cover).clamp(0.0, 1.0);
        }
    }
    out
}

/// Procedural grayscale shape classes with intra-class jitter.
/// Sample `k` has class `k % classes`.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec, split: Split) -> Result<Dataset<T>> {
    if spec.classes < 2 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::invalid(format!(
            "the generator supports 2..={} classes, got {}",
            SHAPE_NAMES.len(),
            spec.classes
        )));
    }
    if spec.size < 8 {
        return Err(Error::invalid("synthetic images must be at least 8x8"));
    }
    if !(0.0..=1.0).contains(&spec.jitter) {
        return Err(Error::invalid("jitter must lie in [0, 1]"));
    }
    let n = spec.classes * spec.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(n * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % spec.classes;
        data.extend(
            render_shape(class, spec.size, spec.jitter, &mut rng)
                .into_iter()
                .map(T::of),
        );
        labels.push(class);
    }
    Dataset::new(
        Tensor::new([n, 1, spec.size, spec.size], data)?,
        labels,
        spec.classes,
        split,
        Provenance::Synthetic(spec.clone()),
    )
}
