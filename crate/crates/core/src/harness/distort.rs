//! Synthetic distortions with five severity levels each.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    GaussianBlur,
    SaltAndPepper,
    GaussianNoise,
    Overexposure,
    MotionBlur,
    Underexposure,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 6] = [
        DistortionKind::GaussianBlur,
        DistortionKind::SaltAndPepper,
        DistortionKind::GaussianNoise,
        DistortionKind::Overexposure,
        DistortionKind::MotionBlur,
        DistortionKind::Underexposure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian-blur",
            DistortionKind::SaltAndPepper => "salt-and-pepper",
            DistortionKind::GaussianNoise => "gaussian-noise",
            DistortionKind::Overexposure => "overexposure",
            DistortionKind::MotionBlur => "motion-blur",
            DistortionKind::Underexposure => "underexposure",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown distortion `{s}`")))
    }
}

/// Parameter per level (levels 1..=5) for every kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionTable {
    /// Noise standard deviation.
    pub gaussian_noise: [f64; 5],
    /// Per-pixel flip probability.
    pub salt_and_pepper: [f64; 5],
    /// Kernel standard deviation in pixels.
    pub gaussian_blur: [f64; 5],
    /// Horizontal kernel length in pixels.
    pub motion_blur: [usize; 5],
    /// Additive brightness shift magnitude.
    pub exposure: [f64; 5],
}

impl Default for DistortionTable {
    fn default() -> Self {
        DistortionTable {
            gaussian_noise: [0.02, 0.04, 0.08, 0.12, 0.18],
            salt_and_pepper: [0.01, 0.02, 0.05, 0.10, 0.15],
            gaussian_blur: [0.5, 1.0, 1.5, 2.0, 2.5],
            motion_blur: [3, 5, 7, 9, 11],
            exposure: [0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl DistortionTable {
    /// Parameter of `kind` at `level`; level 0 is the identity.
    pub fn parameter(&self, kind: DistortionKind, level: u8) -> Result<f64> {
        if level > 5 {
            return Err(Error::OutOfRange {
                index: level as usize,
                limit: 6,
            });
        }
        if level == 0 {
            return Ok(0.0);
        }
        let i = level as usize - 1;
        Ok(match kind {
            DistortionKind::GaussianNoise => self.gaussian_noise[i],
            DistortionKind::SaltAndPepper => self.salt_and_pepper[i],
            DistortionKind::GaussianBlur => self.gaussian_blur[i],
            DistortionKind::MotionBlur => self.motion_blur[i] as f64,
            DistortionKind::Overexposure => self.exposure[i],
            DistortionKind::Underexposure => -self.exposure[i],
        })
    }

    /// Every kind's parameters strictly increase in severity with level.
    pub fn validate(&self) -> Result<()> {
        let inc = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v[0] >= 0.0;
        let mb: Vec<f64> = self.motion_blur.iter().map(|&v| v as f64).collect();
        for (name, ok) in [
            ("gaussian_noise", inc(&self.gaussian_noise)),
            (
                "salt_and_pepper",
                inc(&self.salt_and_pepper) && self.salt_and_pepper[4] <= 1.0,
            ),
            ("gaussian_blur", inc(&self.gaussian_blur)),
            ("motion_blur", inc(&mb)),
            ("exposure", inc(&self.exposure)),
        ] {
            if !ok {
                return Err(Error::invalid(format!(
                    "{name} levels must be nonnegative and strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// 1..=5; 0 leaves the data unchanged.
    pub level: u8,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(spec: &DistortionSpec, index: usize) -> u64 {
    mix(mix(mix(spec.seed) ^ (spec.kind.index() << 8) ^ spec.level as u64) ^ index as u64)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Convolve each row (`horizontal`) or column with `kernel`, clamping at
/// the borders.
fn convolve_1d(img: &[f64], h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let off = k as i64 - r;
                let (sy, sx) = if horizontal {
                    (y as i64, (x as i64 + off).clamp(0, w as i64 - 1))
                } else {
                    ((y as i64 + off).clamp(0, h as i64 - 1), x as i64)
                };
                acc += kv * img[sy as usize * w + sx as usize];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Distort one `[C, H, W]` sample (as `f64`) in place.
pub fn distort_sample(
    sample: &mut [f64],
    shape: &[usize],
    kind: DistortionKind,
    param: f64,
    rng: &mut ChaCha8Rng,
) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    match kind {
        DistortionKind::GaussianNoise => {
            if param > 0.0 {
                let n = Normal::new(0.0, param).expect("positive sigma");
                sample.iter_mut().for_each(|v| *v += n.sample(rng));
            }
        }
        DistortionKind::SaltAndPepper => {
            for v in sample.iter_mut() {
                if rng.gen::<f64>() < param {
                    *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        DistortionKind::GaussianBlur => {
            if param > 0.0 {
                let k = gaussian_kernel(param);
                for ch in sample.chunks_mut(h * w).take(c) {
                    let t = convolve_1d(ch, h, w, &k, true);
                    let t = convolve_1d(&t, h, w, &k, false);
                    ch.copy_from_slice(&t);
                }
            }
        }
        DistortionKind::MotionBlur => {
            let len = param as usize;
            if len > 1 {
                // even lengths extend one pixel further to the right
                let mut k = vec![1.0 / len as f64; len];
                if len.is_multiple_of(2) {
                    k.insert(0, 0.0);
                }
                for ch in sample.chunks_mut(h * w).take(c) {
                    let t = convolve_1d(ch, h, w, &k, true);
                    ch.copy_from_slice(&t);
                }
            }
        }
        DistortionKind::Overexposure | DistortionKind::Underexposure => {
            sample.iter_mut().for_each(|v| *v += param);
        }
    }
    sample.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// A distorted copy of `ds`; the input is left untouched. Deterministic in
/// `spec.seed` and independent of evaluation order.
pub fn apply_distortion<T: Scalar>(
    ds: &Dataset<T>,
    spec: &DistortionSpec,
    table: &DistortionTable,
) -> Result<Dataset<T>> {
    let param = table.parameter(spec.kind, spec.level)?;
    let shape = ds.sample_shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("distortions need [C, H, W] samples"));
    }
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(ds.images.len());
    for (i, chunk) in ds.images.data().chunks(per).enumerate() {
        let mut s: Vec<f64> = chunk.iter().map(|v| v.as_f64()).collect();
        if spec.level > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec, i));
            distort_sample(&mut s, &shape, spec.kind, param, &mut rng);
        }
        data.extend(s.into_iter().map(T::of));
    }
    Ok(Dataset {
        images: Tensor::new(ds.images.shape(), data)?,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        split: ds.split,
        provenance: Provenance::Derived(format!("{} level {}", spec.kind, spec.level)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_monotone() {
        DistortionTable::default().validate().unwrap();
        let mut t = DistortionTable::default();
        t.gaussian_noise[2] = 0.01;
        assert!(t.validate().is_err());
    }

    #[test]
    fn kernels_are_normalized() {
        for s in [0.5, 1.0, 2.5] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = vec![0.4; 64];
        distort_sample(
            &mut s,
            &[1, 8, 8],
            DistortionKind::GaussianBlur,
            2.0,
            &mut rng,
        );
        assert!(s.iter().all(|v| (v - 0.4).abs() < 1e-12));
        distort_sample(
            &mut s,
            &[1, 8, 8],
            DistortionKind::MotionBlur,
            5.0,
            &mut rng,
        );
        assert!(s.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn names_parse() {
        for k in DistortionKind::ALL {
            assert_eq!(k.name().parse::<DistortionKind>().unwrap(), k);
        }
    }
}
