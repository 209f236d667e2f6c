//! `CNMF` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CNMF" | version u16 | role u8 | input rank u8 | dims u32*rank
//! | layer count u32 | per layer: tag u8 + fields
//! | epoch u32 | has_magnitude u8 | magnitude f64
//! | [head only] fingerprint u64 | extraction u8 | normalize u8
//! |             epsilon f64 | max_iters u32 | classes u32 | feature_dim u32
//! | param count u32 | per param: numel u32 + f32*numel
//! ```
//!
//! Parameters are stored as `f32`; a `Network<f32>` round-trips bit-exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::{bias_name, weight_name, LayerSpec, Network};
use crate::autodiff::{Padding, ParamStore};
use crate::contrast::{ExtractConfig, Extraction, LossKind, FGSM_CODE};
use crate::error::{Error, Result};
use crate::head::Pairing;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNMF";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Role {
    Base,
    Head(Pairing),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub network: Network<T>,
    /// Training epochs completed when the state was saved.
    pub epoch: u32,
    /// Mean maximum logit over the training set, once computed.
    pub magnitude: Option<f64>,
    pub role: Role,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn base(network: Network<T>) -> Self {
        Checkpoint {
            network,
            epoch: 0,
            magnitude: None,
            role: Role::Base,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let net = &self.network;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(match self.role {
            Role::Base => 0,
            Role::Head(_) => 1,
        })?;
        w.write_u8(net.input_shape().len() as u8)?;
        for &d in net.input_shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(net.layers().len() as u32)?;
        for layer in net.layers() {
            write_layer(w, layer)?;
        }
        w.write_u32::<LittleEndian>(self.epoch)?;
        w.write_u8(self.magnitude.is_some() as u8)?;
        w.write_f64::<LittleEndian>(self.magnitude.unwrap_or(0.0))?;
        if let Role::Head(p) = &self.role {
            w.write_u64::<LittleEndian>(p.base_fingerprint)?;
            let (code, eps, iters) = extraction_fields(&p.config.extraction);
            w.write_u8(code)?;
            w.write_u8(p.config.normalize as u8)?;
            w.write_f64::<LittleEndian>(eps)?;
            w.write_u32::<LittleEndian>(iters)?;
            w.write_u32::<LittleEndian>(p.num_classes as u32)?;
            w.write_u32::<LittleEndian>(p.feature_dim as u32)?;
        }
        w.write_u32::<LittleEndian>(net.params().len() as u32)?;
        for (i, layer) in net.layers().iter().enumerate() {
            if !layer.has_params() {
                continue;
            }
            for name in [weight_name(i), bias_name(i)] {
                let t = net.params().get(&name).expect("validated network");
                w.write_u32::<LittleEndian>(t.len() as u32)?;
                for v in t.data() {
                    w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let ck = Self::read_from(&mut r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::format("truncated checkpoint")
            }
            other => other,
        })?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected CNMF")));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let role_tag = r.read_u8()?;
        if role_tag > 1 {
            return Err(Error::format(format!("unknown role tag {role_tag}")));
        }
        let rank = r.read_u8()? as usize;
        let input_shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let layer_count = r.read_u32::<LittleEndian>()? as usize;
        if layer_count > 4096 {
            return Err(Error::format("implausible layer count"));
        }
        let layers = (0..layer_count)
            .map(|_| read_layer(r))
            .collect::<Result<Vec<_>>>()?;
        let epoch = r.read_u32::<LittleEndian>()?;
        let has_m = r.read_u8()?;
        let m = r.read_f64::<LittleEndian>()?;
        let magnitude = (has_m != 0).then_some(m);
        let role = if role_tag == 1 {
            let base_fingerprint = r.read_u64::<LittleEndian>()?;
            let code = r.read_u8()?;
            let normalize = r.read_u8()? != 0;
            let epsilon = r.read_f64::<LittleEndian>()?;
            let max_iters = r.read_u32::<LittleEndian>()?;
            let num_classes = r.read_u32::<LittleEndian>()? as usize;
            let feature_dim = r.read_u32::<LittleEndian>()? as usize;
            Role::Head(Pairing {
                num_classes,
                feature_dim,
                config: ExtractConfig {
                    extraction: extraction_from_fields(code, epsilon, max_iters)?,
                    normalize,
                },
                base_fingerprint,
            })
        } else {
            Role::Base
        };

        // Parameter order follows the layer list.
        let template = Network::<f32>::new(&input_shape, layers.clone(), 0)
            .map_err(|e| Error::format(format!("invalid architecture: {e}")))?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != template.params().len() {
            return Err(Error::format(format!(
                "checkpoint holds {count} parameters, architecture needs {}",
                template.params().len()
            )));
        }
        let mut params = ParamStore::new();
        for (name, t) in template.params().iter() {
            let numel = r.read_u32::<LittleEndian>()? as usize;
            if numel != t.len() {
                return Err(Error::format(format!(
                    "parameter {name} has {numel} values, expected {}",
                    t.len()
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(T::of(r.read_f32::<LittleEndian>()? as f64));
            }
            params.insert(name, Tensor::new(t.shape(), data)?);
        }
        let network = Network::from_parts(&input_shape, layers, params)?;
        Ok(Checkpoint {
            network,
            epoch,
            magnitude,
            role,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_layer(w: &mut impl Write, layer: &LayerSpec) -> Result<()> {
    match *layer {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            w.write_u8(1)?;
            for v in [in_ch, out_ch, kernel, stride] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
            w.write_u8(match padding {
                Padding::Valid => 0,
                Padding::Same => 1,
            })?;
        }
        LayerSpec::Dense { inputs, outputs } => {
            w.write_u8(2)?;
            w.write_u32::<LittleEndian>(inputs as u32)?;
            w.write_u32::<LittleEndian>(outputs as u32)?;
        }
        LayerSpec::Relu => w.write_u8(3)?,
        LayerSpec::Sigmoid => w.write_u8(4)?,
        LayerSpec::MaxPool { size, stride } => {
            w.write_u8(5)?;
            w.write_u32::<LittleEndian>(size as u32)?;
            w.write_u32::<LittleEndian>(stride as u32)?;
        }
        LayerSpec::Flatten => w.write_u8(6)?,
    }
    Ok(())
}

fn read_layer(r: &mut impl Read) -> Result<LayerSpec> {
    let tag = r.read_u8()?;
    let layer = match tag {
        1 => {
            let mut f = [0usize; 4];
            for v in f.iter_mut() {
                *v = r.read_u32::<LittleEndian>()? as usize;
            }
            let padding = match r.read_u8()? {
                0 => Padding::Valid,
                1 => Padding::Same,
                p => return Err(Error::format(format!("unknown padding tag {p}"))),
            };
            LayerSpec::Conv2d {
                in_ch: f[0],
                out_ch: f[1],
                kernel: f[2],
                stride: f[3],
                padding,
            }
        }
        2 => LayerSpec::Dense {
            inputs: r.read_u32::<LittleEndian>()? as usize,
            outputs: r.read_u32::<LittleEndian>()? as usize,
        },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Sigmoid,
        5 => LayerSpec::MaxPool {
            size: r.read_u32::<LittleEndian>()? as usize,
            stride: r.read_u32::<LittleEndian>()? as usize,
        },
        6 => LayerSpec::Flatten,
        t => return Err(Error::format(format!("unknown layer tag {t}"))),
    };
    Ok(layer)
}

fn extraction_fields(e: &Extraction) -> (u8, f64, u32) {
    match *e {
        Extraction::Gradient(kind) => (kind.code(), 0.0, 0),
        Extraction::Fgsm { epsilon, max_iters } => (FGSM_CODE, epsilon, max_iters as u32),
    }
}

fn extraction_from_fields(code: u8, epsilon: f64, max_iters: u32) -> Result<Extraction> {
    if code == FGSM_CODE {
        return Ok(Extraction::Fgsm {
            epsilon,
            max_iters: max_iters as usize,
        });
    }
    LossKind::from_code(code)
        .map(Extraction::Gradient)
        .ok_or_else(|| Error::format(format!("unknown extraction code {code}")))
}
