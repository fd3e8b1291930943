//! Frame-rate arithmetic for strided convolution stacks.
//!
//! Convolutions here never pad, so a stack whose strides multiply to `R`
//! samples yields slightly fewer than `L / R` frames: one second of 16 kHz
//! audio through the 20 ms stack gives 49 frames, not 50. The fused length
//! `L // R_gcd` is the nominal count; fusion trims streams to fit it.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolutionError {
    #[error("mixed sample rates: {0} Hz vs {1} Hz")]
    MixedSampleRate(u32, u32),
    #[error("no resolutions given")]
    Empty,
    #[error("invalid conv stack: {0}")]
    BadStack(String),
}

/// One convolution layer: window and hop, in input frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels_out: usize,
}

/// Ordered convolution layers of a feature extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackSpec {
    layers: Vec<ConvLayer>,
}

pub const DEFAULT_CHANNELS: usize = 512;

/// `(kernel, stride, repeat)` groups of the three reference extractors.
pub const ROW_A: &[(usize, usize, usize)] = &[(10, 5, 1), (3, 2, 4), (2, 2, 2)];
pub const ROW_B: &[(usize, usize, usize)] = &[(10, 5, 1), (3, 2, 4), (2, 2, 3)];
pub const ROW_C: &[(usize, usize, usize)] = &[(10, 5, 2), (3, 2, 4), (2, 2, 2)];

impl ConvStackSpec {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self, ResolutionError> {
        if layers.is_empty() {
            return Err(ResolutionError::BadStack("no layers".into()));
        }
        for l in &layers {
            if l.stride == 0 || l.kernel < l.stride {
                return Err(ResolutionError::BadStack(format!(
                    "kernel {} / stride {} violates kernel >= stride >= 1",
                    l.kernel, l.stride
                )));
            }
            if l.channels_out == 0 {
                return Err(ResolutionError::BadStack("zero channels".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Expands `(kernel, stride, repeat)` groups with a uniform channel width.
    pub fn from_groups(groups: &[(usize, usize, usize)], channels: usize) -> Result<Self, ResolutionError> {
        let layers = groups
            .iter()
            .flat_map(|&(kernel, stride, n)| {
                std::iter::repeat_n(ConvLayer { kernel, stride, channels_out: channels }, n)
            })
            .collect();
        Self::new(layers)
    }

    /// Reference extractor `A`, `B` or `C` (20, 40 and 100 ms at 16 kHz).
    pub fn row(name: char, channels: usize) -> Option<Self> {
        let groups = match name.to_ascii_uppercase() {
            'A' => ROW_A,
            'B' => ROW_B,
            'C' => ROW_C,
            _ => return None,
        };
        Self::from_groups(groups, channels).ok()
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self, ResolutionError> {
        Self::new(self.layers.iter().map(|l| ConvLayer { channels_out: channels, ..*l }).collect())
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Compresses consecutive identical `(kernel, stride)` layers into groups.
    pub fn groups(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for l in &self.layers {
            match out.last_mut() {
                Some((k, s, n)) if *k == l.kernel && *s == l.stride => *n += 1,
                _ => out.push((l.kernel, l.stride, 1)),
            }
        }
        out
    }
}

impl fmt::Display for ConvStackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups().iter().map(|(k, s, n)| format!("({k},{s})*{n}")).collect();
        f.write_str(&parts.join(" + "))
    }
}

impl FromStr for ConvStackSpec {
    type Err = ResolutionError;

    /// Parses `"(10,5)*1 + (3,2)*4 + (2,2)*2"`; whitespace is ignored and a
    /// missing `*n` means one layer. Channels default to [`DEFAULT_CHANNELS`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = |why: &str| ResolutionError::BadStack(format!("{why} in {s:?}"));
        if compact.is_empty() {
            return Err(bad("empty stack"));
        }
        let mut groups = Vec::new();
        for term in compact.split('+') {
            let rest = term.strip_prefix('(').ok_or_else(|| bad("expected '('"))?;
            let (pair, tail) = rest.split_once(')').ok_or_else(|| bad("expected ')'"))?;
            let (k, st) = pair.split_once(',').ok_or_else(|| bad("expected 'kernel,stride'"))?;
            let kernel: usize = k.parse().map_err(|_| bad("bad kernel"))?;
            let stride: usize = st.parse().map_err(|_| bad("bad stride"))?;
            let repeat: usize = match tail {
                "" => 1,
                t => t.strip_prefix('*').and_then(|n| n.parse().ok()).ok_or_else(|| bad("bad repeat"))?,
            };
            if repeat == 0 {
                return Err(bad("repeat count 0"));
            }
            groups.push((kernel, stride, repeat));
        }
        Self::from_groups(&groups, DEFAULT_CHANNELS)
    }
}

/// Time span of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResolutionSpec {
    pub stride_product: usize,
    pub sample_rate: u32,
}

impl ResolutionSpec {
    pub fn new(stride_product: usize, sample_rate: u32) -> Self {
        Self { stride_product, sample_rate }
    }

    pub fn nominal_ms(&self) -> f64 {
        1000.0 * self.stride_product as f64 / self.sample_rate as f64
    }

    /// Whole-number ratio `self / finer`, if `finer` divides `self`.
    pub fn ratio_to(&self, finer: &ResolutionSpec) -> Option<usize> {
        (self.sample_rate == finer.sample_rate && self.stride_product % finer.stride_product == 0)
            .then(|| self.stride_product / finer.stride_product)
    }
}

impl fmt::Display for ResolutionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ms ({} samples @ {} Hz)", self.nominal_ms(), self.stride_product, self.sample_rate)
    }
}

/// Frames produced by one unpadded strided window.
pub fn conv_out_len(in_len: usize, kernel: usize, stride: usize) -> usize {
    if in_len < kernel {
        0
    } else {
        (in_len - kernel) / stride + 1
    }
}

pub fn stack_out_len(spec: &ConvStackSpec, in_len: usize) -> usize {
    spec.layers.iter().fold(in_len, |n, l| conv_out_len(n, l.kernel, l.stride))
}

/// Frame counts after each layer.
pub fn stack_trace(spec: &ConvStackSpec, in_len: usize) -> Vec<usize> {
    spec.layers
        .iter()
        .scan(in_len, |n, l| {
            *n = conv_out_len(*n, l.kernel, l.stride);
            Some(*n)
        })
        .collect()
}

pub fn nominal_resolution(spec: &ConvStackSpec, sample_rate: u32) -> ResolutionSpec {
    ResolutionSpec::new(spec.stride_product(), sample_rate)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn gcd_resolution(resolutions: &[ResolutionSpec]) -> Result<ResolutionSpec, ResolutionError> {
    let first = resolutions.first().ok_or(ResolutionError::Empty)?;
    let mut g = 0;
    for r in resolutions {
        if r.sample_rate != first.sample_rate {
            return Err(ResolutionError::MixedSampleRate(first.sample_rate, r.sample_rate));
        }
        g = gcd(g, r.stride_product);
    }
    Ok(ResolutionSpec::new(g, first.sample_rate))
}

/// Nominal fused frame count `L // R`.
pub fn fused_len(in_len: usize, gcd_res: &ResolutionSpec) -> usize {
    in_len / gcd_res.stride_product
}
