//! Parallel fusion: a learned convex combination of every layer of every
//! encoder, each upsampled to the common resolution.
//!
//! The weights `w[k][i]` come from one softmax over all `K * (N + 1)` logits,
//! so they stay in `[0, 1]` and sum to one whatever the logits are.

use std::fmt;

use super::{trim_to_common, FusionError, UpsampleMode, UpsamplerSpec};
use crate::encoder::{FeaturePyramid, PyramidVars};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::resolution::{fused_len, gcd_resolution, ResolutionSpec};
use crate::tensor::Tensor;

/// Fusion logits for `encoders` streams of `layers_per_encoder` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    logits: Tensor,
}

impl FusionWeights {
    /// All-zero logits: every weight `1 / (K * (N + 1))`.
    pub fn init(encoders: usize, depth: usize) -> Self {
        Self { logits: Tensor::zeros(&[encoders, depth + 1]) }
    }

    pub fn from_logits(logits: Tensor) -> Result<Self, FusionError> {
        match logits.dims2() {
            Some((k, n)) if k > 0 && n > 0 && logits.is_finite() => Ok(Self { logits }),
            _ => Err(FusionError::PyramidMismatch(format!("bad logit shape {:?}", logits.shape()))),
        }
    }

    /// All weight on `(encoder, layer)`. The other logits are `-1e300`, whose
    /// exponentials underflow to exactly zero.
    pub fn one_hot(encoders: usize, depth: usize, encoder: usize, layer: usize) -> Self {
        let mut logits = Tensor::full(&[encoders, depth + 1], -1e300);
        logits.data_mut()[encoder * (depth + 1) + layer] = 0.0;
        Self { logits }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn encoders(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Normalized weights, same layout as the logits.
    pub fn weights(&self) -> Tensor {
        let mut g = Graph::new();
        let flat = g.constant(self.logits.clone().reshape(vec![self.logits.len()]).expect("flat"));
        let w = g.softmax(flat, 0).expect("finite softmax");
        g.value(w).clone().reshape(self.logits.shape().to_vec()).expect("same count")
    }
}

/// Per-encoder weight totals `sum_i w[k][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub names: Vec<String>,
    pub sums: Vec<f64>,
}

impl WeightReport {
    pub fn total(&self) -> f64 {
        self.sums.iter().sum()
    }

    /// `key=value` records, one per encoder plus the total.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (n, s) in self.names.iter().zip(&self.sums) {
            out.push_str(&format!("weight_sum.{n}={s:.17e}\n"));
        }
        out.push_str(&format!("weight_sum.total={:.17e}\n", self.total()));
        out
    }
}

impl fmt::Display for WeightReport {
    /// Aligned two-column table with two decimals and a total row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.names.iter().map(String::len).chain([7]).max().unwrap_or(7);
        writeln!(f, "{:<width$} | {:>6}", "Encoder", "Weight")?;
        writeln!(f, "{}-+-{}", "-".repeat(width), "-".repeat(6))?;
        for (n, s) in self.names.iter().zip(&self.sums) {
            writeln!(f, "{n:<width$} | {s:>6.2}")?;
        }
        writeln!(f, "{}-+-{}", "-".repeat(width), "-".repeat(6))?;
        write!(f, "{:<width$} | {:>6.2}", "Total", self.total())
    }
}

/// Sums each encoder's weights across layers. `names` labels the rows; it
/// defaults to `enc0`, `enc1`, ... when shorter than the encoder count.
pub fn weight_report(weights: &FusionWeights, names: &[String]) -> WeightReport {
    let w = weights.weights();
    let sums = (0..weights.encoders()).map(|k| w.row(k).iter().sum()).collect();
    let names = (0..weights.encoders())
        .map(|k| names.get(k).cloned().unwrap_or_else(|| format!("enc{k}")))
        .collect();
    WeightReport { names, sums }
}

/// One encoder's upsampler. Deconv kernels start as frame repetition.
#[derive(Debug, Clone, Copy)]
pub enum Upsampler {
    Repeat { factor: usize },
    Deconv { factor: usize, kernel: ParamId, bias: ParamId },
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, name: &str, spec: UpsamplerSpec, dim: usize) -> Self {
        match spec.mode {
            UpsampleMode::Repeat => Self::Repeat { factor: spec.factor },
            UpsampleMode::Deconv => {
                let kernel = store.add(format!("{name}.kernel"), repeat_kernel(spec.factor, dim));
                let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
                Self::Deconv { factor: spec.factor, kernel, bias }
            }
        }
    }

    pub fn factor(&self) -> usize {
        match *self {
            Self::Repeat { factor } | Self::Deconv { factor, .. } => factor,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, FusionError> {
        Ok(match *self {
            Self::Repeat { factor: 1 } => x,
            Self::Repeat { factor } => g.repeat_rows(x, factor)?,
            Self::Deconv { factor, kernel, bias } => {
                let y = g.conv1d_transpose(x, p.var(kernel), factor)?;
                g.add_row(y, p.var(bias))?
            }
        })
    }
}

/// `[factor, dim, dim]` kernel with an identity matrix at every tap.
pub(crate) fn repeat_kernel(factor: usize, dim: usize) -> Tensor {
    let mut k = Tensor::zeros(&[factor, dim, dim]);
    for j in 0..factor {
        for c in 0..dim {
            k.data_mut()[j * dim * dim + c * dim + c] = 1.0;
        }
    }
    k
}

/// Parameters of one parallel fusion head.
#[derive(Debug, Clone)]
pub struct ParallelFusion {
    pub logits: ParamId,
    pub upsamplers: Vec<Upsampler>,
    resolutions: Vec<ResolutionSpec>,
    depth: usize,
    dim: usize,
}

impl ParallelFusion {
    /// Registers logits (zeros) and upsamplers for encoders at `resolutions`
    /// with `depth` transformer layers of width `dim`.
    pub fn new(
        store: &mut ParamStore,
        resolutions: &[ResolutionSpec],
        depth: usize,
        dim: usize,
        mode: UpsampleMode,
    ) -> Result<Self, FusionError> {
        if resolutions.is_empty() {
            return Err(FusionError::PyramidMismatch("no encoders".into()));
        }
        let target = gcd_resolution(resolutions)?;
        let logits = store.add("fusion.logits", Tensor::zeros(&[resolutions.len(), depth + 1]));
        let upsamplers = resolutions
            .iter()
            .enumerate()
            .map(|(k, r)| Ok(Upsampler::new(store, &format!("fusion.up{k}"), UpsamplerSpec::between(mode, r, &target)?, dim)))
            .collect::<Result<_, FusionError>>()?;
        Ok(Self { logits, upsamplers, resolutions: resolutions.to_vec(), depth, dim })
    }

    pub fn target(&self) -> ResolutionSpec {
        gcd_resolution(&self.resolutions).expect("validated at construction")
    }

    pub fn weights(&self, store: &ParamStore) -> FusionWeights {
        FusionWeights { logits: store.get(self.logits).clone() }
    }

    fn check(&self, pyramids: &[PyramidVars], g: &Graph) -> Result<(), FusionError> {
        if pyramids.len() != self.resolutions.len() {
            return Err(FusionError::PyramidMismatch(format!(
                "{} pyramids for {} encoders",
                pyramids.len(),
                self.resolutions.len()
            )));
        }
        for (k, (p, r)) in pyramids.iter().zip(&self.resolutions).enumerate() {
            if p.layers.len() != self.depth + 1 {
                return Err(FusionError::PyramidMismatch(format!(
                    "encoder {k} has {} layers, expected {}",
                    p.layers.len(),
                    self.depth + 1
                )));
            }
            if p.resolution != *r {
                return Err(FusionError::PyramidMismatch(format!("encoder {k} is at {}, expected {r}", p.resolution)));
            }
            if p.input_len != pyramids[0].input_len {
                return Err(FusionError::PyramidMismatch("pyramids come from different inputs".into()));
            }
            if let Some(l) = p.layers.iter().find(|l| g.shape(**l).get(1) != Some(&self.dim)) {
                return Err(FusionError::PyramidMismatch(format!(
                    "encoder {k} features {:?}, expected width {}",
                    g.shape(*l),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    /// Encoder indices from coarse to fine; ties keep input order. Summing in
    /// this order makes the output independent of how encoders are listed.
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.resolutions.len()).collect();
        order.sort_by_key(|&k| std::cmp::Reverse(self.resolutions[k].stride_product));
        order
    }

    /// `sum_i sum_k w[k][i] * UP_k(X_k^i)` trimmed to the common length.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pyramids: &[PyramidVars]) -> Result<Var, FusionError> {
        self.check(pyramids, g)?;
        let order = self.canonical_order();
        let layers = self.depth + 1;

        let logits = p.var(self.logits);
        let rows = order.iter().map(|&k| g.slice(logits, 0, k, 1)).collect::<Result<Vec<_>, _>>()?;
        let flat = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 1)? };
        let weights = g.softmax(flat, 1)?;

        let cap = fused_len(pyramids[0].input_len, &self.target());
        let mut upsampled = vec![Vec::with_capacity(layers); order.len()];
        let mut ends = Vec::new();
        for (slot, &k) in order.iter().enumerate() {
            for &x in &pyramids[k].layers {
                let u = self.upsamplers[k].forward(g, p, x)?;
                upsampled[slot].push(u);
            }
            ends.push(upsampled[slot][0]);
        }
        let (_, len) = trim_to_common(g, &ends, Some(cap))?;

        let mut acc: Option<Var> = None;
        for i in 0..layers {
            for (slot, streams) in upsampled.iter().enumerate() {
                let x = streams[i];
                let x = if g.shape(x)[0] == len { x } else { g.slice(x, 0, 0, len)? };
                let w = g.select(weights, slot * layers + i)?;
                let term = g.scale_by(x, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
        }
        Ok(acc.expect("at least one term"))
    }

    /// Evaluates the fusion on computed pyramids without gradients.
    pub fn evaluate(&self, store: &ParamStore, pyramids: &[FeaturePyramid]) -> Result<Tensor, FusionError> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<_> = pyramids.iter().map(|py| PyramidVars::constant(&mut g, py)).collect();
        let out = self.forward(&mut g, &p, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// Upsamples `x` on its own: repeat mode duplicates frames, deconv mode uses
/// the repetition-equivalent initial kernel.
pub fn upsample(x: &Tensor, spec: UpsamplerSpec) -> Result<Tensor, FusionError> {
    let dim = x.dims2().ok_or_else(|| FusionError::PyramidMismatch(format!("features {:?}", x.shape())))?.1;
    let mut store = ParamStore::new();
    let up = Upsampler::new(&mut store, "up", spec, dim);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = up.forward(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

/// Parallel fusion of computed pyramids with the given weights. Deconv
/// upsamplers use their initial (repetition-equivalent) kernels.
pub fn fuse_parallel(
    pyramids: &[FeaturePyramid],
    weights: &FusionWeights,
    up: &[UpsamplerSpec],
) -> Result<Tensor, FusionError> {
    let first = pyramids.first().ok_or_else(|| FusionError::PyramidMismatch("no pyramids".into()))?;
    if weights.encoders() != pyramids.len() || up.len() != pyramids.len() {
        return Err(FusionError::PyramidMismatch(format!(
            "{} pyramids, {} weight rows, {} upsamplers",
            pyramids.len(),
            weights.encoders(),
            up.len()
        )));
    }
    let resolutions: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let target = gcd_resolution(&resolutions)?;
    for (r, u) in resolutions.iter().zip(up) {
        let expected = UpsamplerSpec::between(u.mode, r, &target)?;
        if expected.factor != u.factor {
            return Err(FusionError::PyramidMismatch(format!(
                "upsampling factor {} for {r}, expected {}",
                u.factor, expected.factor
            )));
        }
    }
    let mut store = ParamStore::new();
    let mode = up[0].mode;
    if up.iter().any(|u| u.mode != mode) {
        return Err(FusionError::PyramidMismatch("mixed upsampling modes".into()));
    }
    let fusion = ParallelFusion::new(&mut store, &resolutions, first.depth(), first.dim(), mode)?;
    *store.get_mut(fusion.logits) = weights.logits.clone();
    fusion.evaluate(&store, pyramids)
}
