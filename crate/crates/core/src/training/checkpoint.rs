//! Binary checkpoint: model, optimizer, schedule position and RNG state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOEXCKPT" | u16 version | u8 dtype
//! u32 len | JSON {model, train, iter, opt_step}
//! u32 count | count × (u16 len | name | u8 dtype | u8 ndim | ndim × u32 | raw data)
//! 32-byte seed | u64 stream | u128 word position
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>` after the parameters.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::transformer::{Model, ModelConfig, ParamStore};

pub const MAGIC: &[u8; 8] = b"MOEXCKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub iter: u64,
    pub opt: AdamW<T>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    iter: u64,
    opt_step: u64,
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        let header = serde_json::to_vec(&Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            iter: self.iter,
            opt_step: self.opt.step,
        })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let p = &self.model.params;
        out.extend_from_slice(&((3 * p.len()) as u32).to_le_bytes());
        for (name, t) in p.iter() {
            write_tensor(&mut out, name, t);
        }
        for (name, t) in p.names().iter().zip(&self.opt.m) {
            write_tensor(&mut out, &format!("adam.m.{name}"), t);
        }
        for (name, t) in p.names().iter().zip(&self.opt.v) {
            write_tensor(&mut out, &format!("adam.v.{name}"), t);
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    /// Parse a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != T::DTYPE.code() {
            return Err(Error::format(
                path,
                format!("checkpoint dtype code {dtype} differs from requested {:?}", T::DTYPE),
            ));
        }
        let hlen = u32::from_le_bytes(r.array()?) as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("config block: {e}")))?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor::<T>()?);
        }
        if count % 3 != 0 {
            return Err(Error::format(path, "tensor table is not params + two moment sets"));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if i < n {
                params.push(name, t);
            } else {
                let base = &params.names()[i % n];
                let (prefix, store) = if i < 2 * n { ("adam.m.", &mut m) } else { ("adam.v.", &mut v) };
                if name.strip_prefix(prefix) != Some(base.as_str()) {
                    return Err(Error::format(path, format!("unexpected tensor {name}")));
                }
                if t.shape() != params.tensors()[i % n].shape() {
                    return Err(Error::format(path, format!("moment {name} has the wrong shape")));
                }
                store.push(t);
            }
        }
        let seed = r.array::<32>()?;
        let stream = u64::from_le_bytes(r.array()?);
        let word_pos = u128::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the RNG state"));
        }
        let model = Model::from_parts(header.model, params).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            model,
            train: header.train,
            iter: header.iter,
            opt: AdamW {
                m,
                v,
                step: header.opt_step,
            },
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let nlen = u16::from_le_bytes(self.array()?) as usize;
        let name = String::from_utf8(self.take(nlen)?.to_vec())
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?;
        let dtype = DType::from_code(self.u8()?)
            .ok_or_else(|| Error::format(self.path, format!("unknown dtype for {name}")))?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(self.array()?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(self.path, e.to_string()))?;
        Ok((name, t))
    }
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}
