//! `MRF1` feature dump files.
//!
//! Layout: the magic `MRF1`, five little-endian `u32` header words
//! (version, T, D, resolution in samples, sample rate), then `T * D`
//! little-endian `f64` values in row-major order.

use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRF1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("not a feature dump (bad magic)")]
    BadMagic,
    #[error("unsupported dump version {0}")]
    Version(u32),
    #[error("payload is {got} bytes, header implies {expected}")]
    Size { expected: usize, got: usize },
    #[error("feature matrix must be T x D, got {0:?}")]
    Shape(Vec<usize>),
    #[error("{0} does not fit in a u32 header field")]
    TooLarge(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub features: Tensor,
    pub resolution_samples: u32,
    pub sample_rate: u32,
}

fn u32_field(v: usize) -> Result<u32, DumpError> {
    u32::try_from(v).map_err(|_| DumpError::TooLarge(v))
}

impl FeatureDump {
    pub fn new(features: Tensor, resolution_samples: usize, sample_rate: u32) -> Result<Self, DumpError> {
        if features.rank() != 2 {
            return Err(DumpError::Shape(features.shape().to_vec()));
        }
        Ok(Self { features, resolution_samples: u32_field(resolution_samples)?, sample_rate })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DumpError> {
        let (t, d) = self.features.dims2().ok_or_else(|| DumpError::Shape(self.features.shape().to_vec()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * t * d);
        out.extend_from_slice(MAGIC);
        for w in [VERSION, u32_field(t)?, u32_field(d)?, self.resolution_samples, self.sample_rate] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DumpError> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(DumpError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != VERSION {
            return Err(DumpError::Version(word(0)));
        }
        let (t, d) = (word(1) as usize, word(2) as usize);
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 8 * t * d {
            return Err(DumpError::Size { expected: 8 * t * d, got: payload.len() });
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let features = Tensor::new(vec![t, d], data).map_err(|_| DumpError::Shape(vec![t, d]))?;
        Ok(Self { features, resolution_samples: word(3), sample_rate: word(4) })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DumpError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DumpError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
