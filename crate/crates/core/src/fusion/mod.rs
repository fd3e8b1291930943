//! Fusion of encoder outputs at different frame rates.
//!
//! Both strategies bring every stream to the greatest common divisor of the
//! input resolutions and then cut all streams to the shortest one (capped at
//! `L // R_gcd`). Streams are never padded.

pub mod hier;
pub mod parallel;

pub use hier::{fuse_hier, AlignDeconv, FusionInit, HierFusion, PairFusion, ResidualConvBlock, ThirdFusion};
pub use parallel::{fuse_parallel, upsample, weight_report, FusionWeights, ParallelFusion, Upsampler, WeightReport};

use crate::graph::{Graph, Var};
use crate::resolution::{ResolutionError, ResolutionSpec};
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("resolution {coarse} samples is not an integer multiple of {fine} samples")]
    NonIntegerFactor { coarse: usize, fine: usize },
    #[error("pyramid mismatch: {0}")]
    PyramidMismatch(String),
    #[error("fused output has no frames")]
    EmptyFusion,
    #[error("resolutions must go from coarse to fine: {0}")]
    ResolutionOrder(String),
    #[error("hierarchical fusion takes 2 or 3 encoders, got {0}")]
    BadK(usize),
    #[error(transparent)]
    Resolution(#[from] ResolutionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Duplicate each frame `factor` times.
    Repeat,
    /// Transposed convolution with kernel = stride = `factor`.
    Deconv,
}

impl std::str::FromStr for UpsampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repeat" => Ok(Self::Repeat),
            "deconv" => Ok(Self::Deconv),
            other => Err(format!("unknown upsampling mode {other:?} (repeat, deconv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsamplerSpec {
    pub mode: UpsampleMode,
    pub factor: usize,
}

impl UpsamplerSpec {
    /// Upsampler taking frames at `from` to the finer resolution `to`.
    pub fn between(mode: UpsampleMode, from: &ResolutionSpec, to: &ResolutionSpec) -> Result<Self, FusionError> {
        let factor = from.ratio_to(to).ok_or(FusionError::NonIntegerFactor {
            coarse: from.stride_product,
            fine: to.stride_product,
        })?;
        Ok(Self { mode, factor })
    }
}

/// Cuts every stream to the shortest length, optionally capped. All inputs
/// must share their feature width.
pub(crate) fn trim_to_common(g: &mut Graph, streams: &[Var], cap: Option<usize>) -> Result<(Vec<Var>, usize), FusionError> {
    let mut len = streams.iter().map(|v| g.shape(*v)[0]).min().unwrap_or(0);
    if let Some(c) = cap {
        len = len.min(c);
    }
    if len == 0 {
        return Err(FusionError::EmptyFusion);
    }
    let mut out = Vec::with_capacity(streams.len());
    for &v in streams {
        out.push(if g.shape(v)[0] == len { v } else { g.slice(v, 0, 0, len)? });
    }
    Ok((out, len))
}
