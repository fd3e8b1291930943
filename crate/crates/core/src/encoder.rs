//! Toy HuBERT-style encoder: strided conv extractor, projection to the model
//! width, and a post-norm transformer stack, exposing every layer's output.
//!
//! Layer 0 of the [`FeaturePyramid`] is the pre-transformer feature: conv
//! output projected to `D`, plus sinusoidal positions, then layer-normed.
//! Layers `1..=N` are the transformer outputs. Each conv layer is followed by
//! a plain per-frame layer norm and GELU (no group norm, no conv bias).

use crate::audio::AudioBuffer;
use crate::graph::{Graph, Var};
use crate::nn::{sinusoidal_positions, LayerNorm, Linear, TransformerLayer};
use crate::params::{Bound, ParamId, ParamStore};
use crate::resolution::{nominal_resolution, stack_out_len, ConvStackSpec, ResolutionSpec};
use crate::rng::SplitMix;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("input of {samples} samples is too short: conv layer {layer} produces no frames")]
    InputTooShort { samples: usize, layer: usize },
    #[error("audio at {got} Hz, encoder expects {expected} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub conv_stack: ConvStackSpec,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_channels: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl EncoderConfig {
    /// Transformer sizes bound to the `A-toy`/`B-toy`/`C-toy` aliases.
    pub const TOY_DIM: usize = 32;
    pub const TOY_LAYERS: usize = 3;
    pub const TOY_FFN: usize = 64;
    pub const TOY_HEADS: usize = 4;
    pub const TOY_CHANNELS: usize = 16;

    /// Reference conv stack `row` (A, B or C) with the toy transformer.
    pub fn toy_row(row: char, seed: u64) -> Option<Self> {
        Some(Self {
            conv_stack: ConvStackSpec::row(row, Self::TOY_CHANNELS)?,
            model_dim: Self::TOY_DIM,
            ffn_dim: Self::TOY_FFN,
            layers: Self::TOY_LAYERS,
            heads: Self::TOY_HEADS,
            conv_channels: Self::TOY_CHANNELS,
            sample_rate: 16000,
            seed,
        })
    }

    /// Reference conv stack with the full base-size transformer.
    pub fn base_row(row: char, seed: u64) -> Option<Self> {
        Some(Self {
            conv_stack: ConvStackSpec::row(row, 512)?,
            model_dim: 768,
            ffn_dim: 3072,
            layers: 12,
            heads: 12,
            conv_channels: 512,
            sample_rate: 16000,
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::BadConfig(m));
        if self.model_dim == 0 || self.ffn_dim == 0 || self.conv_channels == 0 {
            return bad("model_dim, ffn_dim and conv_channels must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        Ok(())
    }

    pub fn resolution(&self) -> ResolutionSpec {
        nominal_resolution(&self.conv_stack, self.sample_rate)
    }
}

/// Layer outputs `X^0..X^N` of one encoder, each `T x D`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub layers: Vec<Tensor>,
    pub resolution: ResolutionSpec,
    /// Length of the source signal in samples.
    pub input_len: usize,
}

impl FeaturePyramid {
    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("pyramid has layers")
    }
}

/// Graph-resident counterpart of [`FeaturePyramid`].
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub layers: Vec<Var>,
    pub resolution: ResolutionSpec,
    pub input_len: usize,
}

impl PyramidVars {
    /// Loads a computed pyramid as graph constants.
    pub fn constant(g: &mut Graph, p: &FeaturePyramid) -> Self {
        Self {
            layers: p.layers.iter().map(|t| g.constant(t.clone())).collect(),
            resolution: p.resolution,
            input_len: p.input_len,
        }
    }

    /// Loads a computed pyramid as differentiable leaves.
    pub fn leaves(g: &mut Graph, p: &FeaturePyramid) -> Self {
        Self {
            layers: p.layers.iter().map(|t| g.leaf(t.clone())).collect(),
            resolution: p.resolution,
            input_len: p.input_len,
        }
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("pyramid has layers")
    }

    pub fn to_values(&self, g: &Graph) -> FeaturePyramid {
        FeaturePyramid {
            layers: self.layers.iter().map(|v| g.value(*v).clone()).collect(),
            resolution: self.resolution,
            input_len: self.input_len,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    kernel: ParamId,
    norm: LayerNorm,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    convs: Vec<ConvBlock>,
    proj: Linear,
    input_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    params: std::ops::Range<usize>,
}

impl Encoder {
    /// Registers a freshly initialized encoder in `store`.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, name: &str) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let stack = cfg
            .conv_stack
            .with_channels(cfg.conv_channels)
            .map_err(|e| EncoderError::BadConfig(e.to_string()))?;
        let mut rng = SplitMix::new(cfg.seed);
        let start = store.len();
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, l) in stack.layers().iter().enumerate() {
            let kernel = store.add_xavier(
                format!("{name}.conv{i}.kernel"),
                &[l.kernel, c_in, l.channels_out],
                l.kernel * c_in,
                l.kernel * l.channels_out,
                &mut rng,
            );
            let norm = LayerNorm::new(store, &format!("{name}.conv{i}.norm"), l.channels_out);
            convs.push(ConvBlock { kernel, norm, stride: l.stride });
            c_in = l.channels_out;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), c_in, cfg.model_dim, &mut rng);
        let input_norm = LayerNorm::new(store, &format!("{name}.input_norm"), cfg.model_dim);
        let layers = (0..cfg.layers)
            .map(|i| {
                TransformerLayer::new(store, &format!("{name}.layer{i}"), cfg.model_dim, cfg.ffn_dim, cfg.heads, &mut rng)
            })
            .collect();
        let cfg = EncoderConfig { conv_stack: stack, ..cfg };
        Ok(Self { cfg, convs, proj, input_norm, layers, params: start..store.len() })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn resolution(&self) -> ResolutionSpec {
        self.cfg.resolution()
    }

    /// Parameter ids owned by this encoder.
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.params.clone()
    }

    /// Enumerated scalar parameter count of this instance.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.scalar_count_in(self.params.clone())
    }

    /// Frames produced for `samples` input samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        stack_out_len(&self.cfg.conv_stack, samples)
    }

    fn check_input(&self, audio: &AudioBuffer) -> Result<(), EncoderError> {
        if audio.sample_rate() != self.cfg.sample_rate {
            return Err(EncoderError::SampleRate { expected: self.cfg.sample_rate, got: audio.sample_rate() });
        }
        let mut n = audio.len();
        for (i, l) in self.cfg.conv_stack.layers().iter().enumerate() {
            n = crate::resolution::conv_out_len(n, l.kernel, l.stride);
            if n == 0 {
                return Err(EncoderError::InputTooShort { samples: audio.len(), layer: i });
            }
        }
        Ok(())
    }

    /// Records the forward pass in `g` and returns the layer outputs.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, audio: &AudioBuffer) -> Result<PyramidVars, EncoderError> {
        self.check_input(audio)?;
        let mut x = g.constant(Tensor::new(vec![audio.len(), 1], audio.samples().to_vec())?);
        for c in &self.convs {
            x = g.conv1d(x, p.var(c.kernel), c.stride)?;
            x = c.norm.forward(g, p, x)?;
            x = g.gelu(x)?;
        }
        let x = self.proj.forward(g, p, x)?;
        let frames = g.shape(x)[0];
        let pos = g.constant(sinusoidal_positions(frames, self.cfg.model_dim));
        let x = g.add(x, pos)?;
        let mut h = self.input_norm.forward(g, p, x)?;
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        layers.push(h);
        for layer in &self.layers {
            h = layer.forward(g, p, h)?;
            layers.push(h);
        }
        Ok(PyramidVars { layers, resolution: self.resolution(), input_len: audio.len() })
    }

    /// Evaluates the encoder without recording gradients.
    pub fn forward_features(&self, store: &ParamStore, audio: &AudioBuffer) -> Result<FeaturePyramid, EncoderError> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars = self.forward_graph(&mut g, &p, audio)?;
        Ok(vars.to_values(&g))
    }
}

/// Builds a standalone encoder with its own parameter store.
pub fn build_encoder(cfg: EncoderConfig) -> Result<(Encoder, ParamStore), EncoderError> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, "encoder")?;
    Ok((enc, store))
}
