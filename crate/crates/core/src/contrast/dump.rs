//! `CNFX` feature dump files.
//!
//! ```text
//! "CNFX" | classes u32 | block_dim u32 | extraction u8 | normalized u8
//! | records: sample_id u32 | predicted u16 | f32 * (classes * block_dim)
//! ```
//!
//! All integers little-endian. The extraction byte is the loss code, or
//! `0x80` for sign-step accumulation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::features::ContrastiveFeature;
use super::loss::LossKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"CNFX";
pub(crate) const FGSM_CODE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u32,
    pub predicted: u16,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub num_classes: usize,
    pub block_dim: usize,
    /// `None` for sign-step features.
    pub loss: Option<LossKind>,
    pub normalized: bool,
    pub records: Vec<FeatureRecord>,
}

impl FeatureDump {
    pub fn new(
        num_classes: usize,
        block_dim: usize,
        loss: Option<LossKind>,
        normalized: bool,
    ) -> Self {
        FeatureDump {
            num_classes,
            block_dim,
            loss,
            normalized,
            records: Vec::new(),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.num_classes * self.block_dim
    }

    pub fn push<T: Scalar>(&mut self, f: &ContrastiveFeature<T>) -> Result<()> {
        if f.num_classes != self.num_classes || f.block_dim != self.block_dim {
            return Err(Error::invalid(format!(
                "feature is {}x{}, dump holds {}x{}",
                f.num_classes, f.block_dim, self.num_classes, self.block_dim
            )));
        }
        if f.loss != self.loss {
            return Err(Error::invalid(
                "extraction kind differs from the dump header",
            ));
        }
        if f.normalized != self.normalized {
            return Err(Error::invalid(
                "normalization flag differs from the dump header",
            ));
        }
        let predicted =
            u16::try_from(f.predicted).map_err(|_| Error::invalid("class index exceeds u16"))?;
        self.records.push(FeatureRecord {
            sample_id: f.sample_id,
            predicted,
            values: f.data.iter().map(|v| v.as_f64() as f32).collect(),
        });
        Ok(())
    }

    /// Records as features with `T` storage.
    pub fn features<T: Scalar>(&self) -> Vec<ContrastiveFeature<T>> {
        self.records
            .iter()
            .map(|r| ContrastiveFeature {
                data: r.values.iter().map(|&v| T::of(v as f64)).collect(),
                num_classes: self.num_classes,
                block_dim: self.block_dim,
                sample_id: r.sample_id,
                predicted: r.predicted as usize,
                loss: self.loss,
                normalized: self.normalized,
                nonconverged: Vec::new(),
            })
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        w.write_u32::<LittleEndian>(self.block_dim as u32)?;
        w.write_u8(self.loss.map_or(FGSM_CODE, LossKind::code))?;
        w.write_u8(self.normalized as u8)?;
        let len = self.feature_len();
        for r in &self.records {
            if r.values.len() != len {
                return Err(Error::invalid(format!(
                    "record {} has {} values, expected {len}",
                    r.sample_id,
                    r.values.len()
                )));
            }
            w.write_u32::<LittleEndian>(r.sample_id)?;
            w.write_u16::<LittleEndian>(r.predicted)?;
            for &v in &r.values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated feature header"))?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected CNFX")));
        }
        let header = (|| -> std::io::Result<(u32, u32, u8, u8)> {
            Ok((
                r.read_u32::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
                r.read_u8()?,
                r.read_u8()?,
            ))
        })()
        .map_err(|_| Error::format("truncated feature header"))?;
        let (classes, dim, code, norm) = header;
        let loss = if code == FGSM_CODE {
            None
        } else {
            Some(
                LossKind::from_code(code)
                    .ok_or_else(|| Error::format(format!("unknown loss code {code}")))?,
            )
        };
        let mut dump = FeatureDump::new(classes as usize, dim as usize, loss, norm != 0);
        let len = dump.feature_len();
        let record_bytes = 6 + 4 * len;
        if !r.len().is_multiple_of(record_bytes) {
            return Err(Error::format("truncated feature record"));
        }
        while !r.is_empty() {
            let sample_id = r.read_u32::<LittleEndian>()?;
            let predicted = r.read_u16::<LittleEndian>()?;
            let mut values = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            dump.records.push(FeatureRecord {
                sample_id,
                predicted,
                values,
            });
        }
        Ok(dump)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
