//! Flat little-endian weight files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SSMW"
//! 4       4  u32      format version (1)
//! 8       8  u64      seed the weights were derived from
//! 16      4  u32      model kind (1 autoencoder, 2 image embedder, 3 text embedder)
//! 20      4  u32      tensor count n
//! 24      ...         per tensor: u32 rank, then rank x u64 dims
//! ...     ...         tensor data in the same order, row-major f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::autoencoder::ToyAutoencoder;

pub const MAGIC: &[u8; 4] = b"SSMW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelKind {
    Autoencoder = 1,
    ImageEmbedder = 2,
    TextEmbedder = 3,
}

impl ModelKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(ModelKind::Autoencoder),
            2 => Ok(ModelKind::ImageEmbedder),
            3 => Ok(ModelKind::TextEmbedder),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: ModelKind,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated weight file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a weight file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let seed = r.u64()?;
        let kind = ModelKind::from_u32(r.u32()?)?;
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(dims);
        }
        let mut tensors = Vec::with_capacity(count.min(1024));
        for shape in shapes {
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(WeightFile { kind, seed, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::imageio::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

impl ToyAutoencoder {
    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            kind: ModelKind::Autoencoder,
            seed: self.seed,
            tensors: self
                .encoder
                .tensors()
                .into_iter()
                .chain(self.decoder.tensors())
                .cloned()
                .collect(),
        }
    }

    pub fn from_weight_file(file: WeightFile) -> Result<Self> {
        if file.kind != ModelKind::Autoencoder || file.tensors.len() != 8 {
            return Err(Error::Format("not an autoencoder weight file".into()));
        }
        let hidden = file.tensors[1].numel();
        let mut ae = ToyAutoencoder::init(file.seed, hidden);
        let slots = ae.encoder.tensors_mut().into_iter().chain(ae.decoder.tensors_mut());
        for (dst, src) in slots.zip(file.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Format(format!(
                    "autoencoder tensor shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(ae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(WeightFile::read(path)?)
    }
}
