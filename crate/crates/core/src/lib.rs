//! Multi-resolution speech encoders: extractor geometry, toy transformer
//! encoders with reverse-mode autodiff, parallel and hierarchical fusion,
//! CTC, and an analytic cost model.

pub mod audio;
pub mod cost;
pub mod ctc;
pub mod encoder;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod resolution;
pub mod rng;
pub mod tensor;

pub use audio::{AudioBuffer, AudioError, SignalKind};
pub use cost::{CostError, CostReport, EncoderArch, FaithfulArch, FusedSystem, FusionKind};
pub use ctc::{CtcError, LabelSeq};
pub use encoder::{Encoder, EncoderConfig, EncoderError, FeaturePyramid};
pub use fusion::{FusionError, FusionInit, FusionWeights, UpsampleMode, UpsamplerSpec, WeightReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use resolution::{ConvLayer, ConvStackSpec, ResolutionError, ResolutionSpec};
pub use rng::SplitMix;
pub use tensor::{Tensor, TensorError};
