//! Closed-form parameter, MAC and FLOP accounting.
//!
//! Two fidelities are modeled:
//!
//! * [`EncoderArch::Toy`] mirrors [`crate::encoder::Encoder`] exactly, so
//!   the census can be checked against an instantiated model.
//! * [`EncoderArch::Faithful`] follows the full-size published layout:
//!   bias-free conv extractor (group norm on the first layer for base
//!   models, layer norm on every layer for large ones), feature layer norm,
//!   projection, grouped positional convolution (kernel 128, 16 groups,
//!   weight-normalized), encoder layer norm, post-norm transformer layers,
//!   the mask embedding, and the pretraining projection plus label
//!   embeddings (504 classes). It is never instantiated.
//!
//! MACs count multiply-accumulates of one forward pass over `input_len`
//! samples; FLOPs are `2 * MACs`. Norms, activations and softmax are not
//! counted.

use std::fmt;

use crate::encoder::EncoderConfig;
use crate::fusion::UpsampleMode;
use crate::resolution::{conv_out_len, gcd_resolution, stack_out_len, ConvStackSpec, ResolutionSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("bad architecture: {0}")]
    BadConfig(String),
    #[error("reports cover different input lengths: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("input length must be positive")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    ConvExtractor,
    Projection,
    PositionalConv,
    AttentionProjections,
    /// Score and context products, quadratic in frame count.
    AttentionScores,
    FeedForward,
    LayerNorms,
    PretrainHeads,
    Fusion,
    Head,
}

impl Component {
    pub fn key(self) -> &'static str {
        match self {
            Self::ConvExtractor => "conv_extractor",
            Self::Projection => "projection",
            Self::PositionalConv => "positional_conv",
            Self::AttentionProjections => "attention_proj",
            Self::AttentionScores => "attention_scores",
            Self::FeedForward => "ffn",
            Self::LayerNorms => "layer_norms",
            Self::PretrainHeads => "pretrain_heads",
            Self::Fusion => "fusion",
            Self::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ComponentCost {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub input_len: usize,
    breakdown: Vec<(Component, ComponentCost)>,
}

impl CostReport {
    fn new(name: impl Into<String>, input_len: usize) -> Self {
        Self { name: name.into(), input_len, breakdown: Vec::new() }
    }

    fn add(&mut self, c: Component, params: u64, macs: u64) {
        match self.breakdown.iter_mut().find(|(k, _)| *k == c) {
            Some((_, cost)) => {
                cost.params += params;
                cost.macs += macs;
            }
            None => {
                self.breakdown.push((c, ComponentCost { params, macs }));
                self.breakdown.sort_by_key(|(k, _)| *k);
            }
        }
    }

    fn merge(&mut self, other: &CostReport) {
        for (c, cost) in &other.breakdown {
            self.add(*c, cost.params, cost.macs);
        }
    }

    pub fn breakdown(&self) -> &[(Component, ComponentCost)] {
        &self.breakdown
    }

    pub fn component(&self, c: Component) -> ComponentCost {
        self.breakdown.iter().find(|(k, _)| *k == c).map(|(_, v)| *v).unwrap_or_default()
    }

    pub fn params(&self) -> u64 {
        self.breakdown.iter().map(|(_, c)| c.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.breakdown.iter().map(|(_, c)| c.macs).sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    /// `key=value` records.
    pub fn to_records(&self) -> String {
        let mut out = format!("name={}\ninput_len={}\n", self.name, self.input_len);
        for (c, cost) in &self.breakdown {
            out.push_str(&format!("params.{}={}\nmacs.{}={}\n", c.key(), cost.params, c.key(), cost.macs));
        }
        out.push_str(&format!("params.total={}\nmacs.total={}\nflops.total={}\n", self.params(), self.macs(), self.flops()));
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} samples)", self.name, self.input_len)?;
        writeln!(f, "{:<18} {:>14} {:>18}", "component", "params", "MACs")?;
        for (c, cost) in &self.breakdown {
            writeln!(f, "{:<18} {:>14} {:>18}", c.key(), cost.params, cost.macs)?;
        }
        writeln!(f, "{:<18} {:>14} {:>18}", "total", self.params(), self.macs())?;
        write!(
            f,
            "params {:.1} M | MACs {:.3} G | FLOPs {:.4} T",
            self.params() as f64 / 1e6,
            self.macs() as f64 / 1e9,
            self.flops() as f64 / 1e12
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorNorm {
    /// Group norm with one group per channel on the first conv layer only.
    FirstLayerGroupNorm,
    /// Layer norm after every conv layer.
    EveryLayer,
}

/// Full-size encoder layout used for the faithful census.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaithfulArch {
    pub conv_stack: ConvStackSpec,
    pub extractor_norm: ExtractorNorm,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub final_dim: usize,
    pub label_classes: usize,
    pub sample_rate: u32,
}

impl FaithfulArch {
    /// Base-size encoder over reference extractor `row` (A, B or C).
    pub fn base(row: char) -> Option<Self> {
        Some(Self {
            conv_stack: ConvStackSpec::row(row, 512)?,
            extractor_norm: ExtractorNorm::FirstLayerGroupNorm,
            model_dim: 768,
            ffn_dim: 3072,
            layers: 12,
            heads: 12,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            final_dim: 256,
            label_classes: 504,
            sample_rate: 16000,
        })
    }

    /// Large-size encoder over the 20 ms extractor.
    pub fn large() -> Self {
        Self {
            conv_stack: ConvStackSpec::row('A', 512).expect("row A"),
            extractor_norm: ExtractorNorm::EveryLayer,
            model_dim: 1024,
            ffn_dim: 4096,
            layers: 24,
            heads: 16,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            final_dim: 768,
            label_classes: 504,
            sample_rate: 16000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderArch {
    Toy(EncoderConfig),
    Faithful(FaithfulArch),
}

impl EncoderArch {
    pub fn conv_stack(&self) -> &ConvStackSpec {
        match self {
            Self::Toy(c) => &c.conv_stack,
            Self::Faithful(f) => &f.conv_stack,
        }
    }

    pub fn model_dim(&self) -> usize {
        match self {
            Self::Toy(c) => c.model_dim,
            Self::Faithful(f) => f.model_dim,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Toy(c) => c.layers,
            Self::Faithful(f) => f.layers,
        }
    }

    pub fn resolution(&self) -> ResolutionSpec {
        let rate = match self {
            Self::Toy(c) => c.sample_rate,
            Self::Faithful(f) => f.sample_rate,
        };
        ResolutionSpec::new(self.conv_stack().stride_product(), rate)
    }
}

struct Dims {
    d: usize,
    ffn: usize,
    layers: usize,
}

fn transformer_costs(r: &mut CostReport, dims: &Dims, frames: u64) {
    let (d, ffn, n) = (dims.d as u64, dims.ffn as u64, dims.layers as u64);
    r.add(Component::AttentionProjections, n * 4 * (d * d + d), n * 4 * frames * d * d);
    r.add(Component::AttentionScores, 0, n * 2 * frames * frames * d);
    r.add(Component::FeedForward, n * (2 * d * ffn + ffn + d), n * 2 * frames * d * ffn);
    r.add(Component::LayerNorms, n * 4 * d, 0);
}

fn conv_costs(r: &mut CostReport, stack: &ConvStackSpec, input_len: usize) -> (usize, usize) {
    let mut len = input_len;
    let mut c_in = 1;
    for l in stack.layers() {
        len = conv_out_len(len, l.kernel, l.stride);
        let weights = (l.kernel * c_in * l.channels_out) as u64;
        r.add(Component::ConvExtractor, weights, len as u64 * weights);
        c_in = l.channels_out;
    }
    (len, c_in)
}

/// Parameter and compute census of one encoder.
pub fn encoder_cost(arch: &EncoderArch, input_len: usize) -> Result<CostReport, CostError> {
    match arch {
        EncoderArch::Toy(cfg) => {
            cfg.validate().map_err(|e| CostError::BadConfig(e.to_string()))?;
            let stack = cfg.conv_stack.with_channels(cfg.conv_channels).map_err(|e| CostError::BadConfig(e.to_string()))?;
            let mut r = CostReport::new(format!("toy {stack}"), input_len);
            let (frames, c) = conv_costs(&mut r, &stack, input_len);
            let (d, t) = (cfg.model_dim as u64, frames as u64);
            r.add(Component::LayerNorms, 2 * (stack.layers().len() * c) as u64 + 2 * d, 0);
            r.add(Component::Projection, c as u64 * d + d, t * c as u64 * d);
            transformer_costs(&mut r, &Dims { d: cfg.model_dim, ffn: cfg.ffn_dim, layers: cfg.layers }, t);
            Ok(r)
        }
        EncoderArch::Faithful(f) => {
            if f.heads == 0 || f.model_dim % f.heads != 0 || f.model_dim % f.pos_conv_groups != 0 {
                return Err(CostError::BadConfig("model_dim must divide by heads and positional groups".into()));
            }
            let mut r = CostReport::new(format!("faithful {}", f.conv_stack), input_len);
            let (frames, c) = conv_costs(&mut r, &f.conv_stack, input_len);
            let (d, t, c) = (f.model_dim as u64, frames as u64, c as u64);
            let norm_params: u64 = match f.extractor_norm {
                ExtractorNorm::FirstLayerGroupNorm => 2 * f.conv_stack.layers()[0].channels_out as u64,
                ExtractorNorm::EveryLayer => f.conv_stack.layers().iter().map(|l| 2 * l.channels_out as u64).sum(),
            };
            // extractor norms, feature norm, encoder norm
            r.add(Component::LayerNorms, norm_params + 2 * c + 2 * d, 0);
            r.add(Component::Projection, c * d + d, t * c * d);
            let k = f.pos_conv_kernel as u64;
            let per_group = d / f.pos_conv_groups as u64;
            // weight-norm direction tensor, bias, and one magnitude per tap
            r.add(Component::PositionalConv, d * per_group * k + d + k, t * d * per_group * k);
            transformer_costs(&mut r, &Dims { d: f.model_dim, ffn: f.ffn_dim, layers: f.layers }, t);
            let fd = f.final_dim as u64;
            r.add(Component::PretrainHeads, d + (d * fd + fd) + f.label_classes as u64 * fd, 0);
            Ok(r)
        }
    }
}

/// Closed-form parameter count of one encoder.
pub fn count_params(arch: &EncoderArch) -> Result<u64, CostError> {
    Ok(encoder_cost(arch, 0)?.params())
}

/// Linear-layer MACs `T * D_in * D_out`.
pub fn linear_macs(frames: usize, d_in: usize, d_out: usize) -> u64 {
    (frames * d_in * d_out) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    None,
    Parallel(UpsampleMode),
    Hierarchical,
}

/// Encoders plus fusion and an optional linear CTC head over `head_vocab`.
#[derive(Debug, Clone)]
pub struct FusedSystem {
    pub name: String,
    pub encoders: Vec<EncoderArch>,
    pub fusion: FusionKind,
    pub head_vocab: Option<usize>,
}

fn fusion_costs(sys: &FusedSystem, frames: &[usize], input_len: usize) -> Result<(u64, u64), CostError> {
    let res: Vec<_> = sys.encoders.iter().map(EncoderArch::resolution).collect();
    let target = gcd_resolution(&res).map_err(|e| CostError::BadConfig(e.to_string()))?;
    let cap = input_len / target.stride_product;
    let d = sys.encoders[0].model_dim() as u64;
    let factor = |r: &ResolutionSpec, to: &ResolutionSpec| r.stride_product / to.stride_product;
    match sys.fusion {
        FusionKind::None => Ok((0, 0)),
        FusionKind::Parallel(mode) => {
            let layers = sys.encoders[0].depth() as u64 + 1;
            let t_mr = frames.iter().zip(&res).map(|(t, r)| t * factor(r, &target)).min().unwrap_or(0).min(cap) as u64;
            let mut params = sys.encoders.len() as u64 * layers;
            let mut macs = sys.encoders.len() as u64 * layers * t_mr * d;
            if mode == UpsampleMode::Deconv {
                for (t, r) in frames.iter().zip(&res) {
                    let f = factor(r, &target) as u64;
                    params += f * d * d + d;
                    macs += layers * *t as u64 * f * d * d;
                }
            }
            Ok((params, macs))
        }
        FusionKind::Hierarchical => {
            if !(2..=3).contains(&sys.encoders.len()) {
                return Err(CostError::BadConfig(format!("hierarchical fusion of {} encoders", sys.encoders.len())));
            }
            if res.windows(2).any(|w| w[0].stride_product <= w[1].stride_product) {
                return Err(CostError::BadConfig("hierarchical fusion needs coarse-to-fine order".into()));
            }
            let block = (3 * d * d + 3 * d, 3 * d * d);
            let deconv = |t_in: u64, ratio: u64| ((ratio * d * d + d), t_in * ratio * d * d);
            let mut params = 0;
            let mut macs = 0;
            let t12_res = gcd_resolution(&res[..2]).expect("validated");
            let mut streams = Vec::new();
            for k in 0..2 {
                let ratio = factor(&res[k], &t12_res) as u64;
                let (dp, dm) = deconv(frames[k] as u64, ratio);
                params += block.0 + dp;
                macs += frames[k] as u64 * block.1 + dm;
                streams.push(frames[k] as u64 * ratio);
            }
            let t12 = streams.iter().copied().min().unwrap_or(0).min(cap as u64);
            if let Some(r3) = res.get(2) {
                let (dp, dm) = deconv(t12, factor(&t12_res, &target) as u64);
                let (dp3, dm3) = deconv(frames[2] as u64, factor(r3, &target) as u64);
                params += dp + block.0 + dp3;
                macs += dm + frames[2] as u64 * block.1 + dm3;
            }
            Ok((params, macs))
        }
    }
}

/// Census of a complete system: every encoder, the fusion stage and the head.
pub fn system_cost(sys: &FusedSystem, input_len: usize) -> Result<CostReport, CostError> {
    if input_len == 0 {
        return Err(CostError::EmptyInput);
    }
    if sys.encoders.is_empty() {
        return Err(CostError::BadConfig("no encoders".into()));
    }
    let mut r = CostReport::new(sys.name.clone(), input_len);
    let mut frames = Vec::new();
    for e in &sys.encoders {
        r.merge(&encoder_cost(e, input_len)?);
        frames.push(stack_out_len(e.conv_stack(), input_len));
    }
    let (fp, fm) = fusion_costs(sys, &frames, input_len)?;
    r.add(Component::Fusion, fp, fm);
    if let Some(v) = sys.head_vocab {
        let res: Vec<_> = sys.encoders.iter().map(EncoderArch::resolution).collect();
        let target = gcd_resolution(&res).map_err(|e| CostError::BadConfig(e.to_string()))?;
        let t_out = match sys.fusion {
            FusionKind::None => frames[0],
            _ => frames
                .iter()
                .zip(&res)
                .map(|(t, r)| t * (r.stride_product / target.stride_product))
                .min()
                .unwrap_or(0)
                .min(input_len / target.stride_product),
        };
        let d = sys.encoders[0].model_dim();
        r.add(Component::Head, (d * v + v) as u64, linear_macs(t_out, d, v));
    }
    Ok(r)
}

/// MAC count of one encoder, as a report.
pub fn count_macs(arch: &EncoderArch, input_len: usize) -> Result<CostReport, CostError> {
    if input_len == 0 {
        return Err(CostError::EmptyInput);
    }
    encoder_cost(arch, input_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub params_ratio: f64,
    pub macs_ratio: f64,
}

/// Side-by-side totals with ratios against `reports[baseline]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub input_len: usize,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_systems(reports: &[CostReport], baseline: usize) -> Result<Comparison, CostError> {
    let base = reports.get(baseline).ok_or_else(|| CostError::BadConfig(format!("no report {baseline}")))?;
    if let Some(r) = reports.iter().find(|r| r.input_len != base.input_len) {
        return Err(CostError::LengthMismatch(base.input_len, r.input_len));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            params: r.params(),
            macs: r.macs(),
            flops: r.flops(),
            params_ratio: r.params() as f64 / base.params() as f64,
            macs_ratio: r.macs() as f64 / base.macs() as f64,
        })
        .collect();
    Ok(Comparison { baseline: base.name.clone(), input_len: base.input_len, rows })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
        writeln!(f, "{:<w$} | {:>9} | {:>10} | {:>9} | {:>7} | {:>7}", "system", "Param.(M)", "MACs(G)", "FLOPs(T)", "xParam", "xMACs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<w$} | {:>9.1} | {:>10.2} | {:>9.4} | {:>7.3} | {:>7.3}",
                r.name,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                r.flops as f64 / 1e12,
                r.params_ratio,
                r.macs_ratio
            )?;
        }
        write!(f, "baseline: {} at {} samples", self.baseline, self.input_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(row: char) -> EncoderArch {
        EncoderArch::Faithful(FaithfulArch::base(row).unwrap())
    }

    #[test]
    fn base_rows_exact() {
        assert_eq!(count_params(&base('A')).unwrap(), 94_697_600);
        assert_eq!(count_params(&base('B')).unwrap(), 94_697_600 + 512 * 512 * 2);
        assert_eq!(count_params(&base('C')).unwrap(), 94_697_600 + 512 * 512 * 10);
    }

    #[test]
    fn large_census() {
        let p = count_params(&EncoderArch::Faithful(FaithfulArch::large())).unwrap();
        assert!((p as f64 / 1e6 - 316.6).abs() < 0.05, "{p}");
    }

    #[test]
    fn linear_layer_macs() {
        assert_eq!(linear_macs(10, 4, 3), 120);
    }

    #[test]
    fn flops_are_twice_macs_and_totals_add_up() {
        let r = count_macs(&base('B'), 48000).unwrap();
        assert_eq!(r.flops(), 2 * r.macs());
        let sum: u64 = r.breakdown().iter().map(|(_, c)| c.macs).sum();
        assert_eq!(sum, r.macs());
        assert!(r.component(Component::AttentionScores).macs > 0);
    }

    #[test]
    fn identical_reports_ratio_one() {
        let r = count_macs(&base('A'), 16000).unwrap();
        let cmp = compare_systems(&[r.clone(), r], 0).unwrap();
        assert!(cmp.rows.iter().all(|row| row.params_ratio == 1.0 && row.macs_ratio == 1.0));
    }

    #[test]
    fn length_mismatch() {
        let a = count_macs(&base('A'), 16000).unwrap();
        let b = count_macs(&base('A'), 32000).unwrap();
        assert_eq!(compare_systems(&[a, b], 0), Err(CostError::LengthMismatch(16000, 32000)));
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(count_macs(&base('A'), 0), Err(CostError::EmptyInput));
    }
}
