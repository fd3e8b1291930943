//! Hierarchical fusion of final-layer features, coarsest stream first.
//!
//! With streams 1, 2, 3 ordered coarse to fine:
//!
//! ```text
//! X12 = Deconv1(Conv1(X1)) + Deconv2(Conv2(X2))
//! X13 = Deconv12(X12)      + Deconv3(Conv3(X3))
//! ```
//!
//! `Conv` is a residual block (`x + conv3(gelu(ln(x)))`, same padding) and
//! `Deconv` a transposed conv whose kernel and stride equal the ratio to the
//! target resolution. There is no conv block on `X12`.

use super::parallel::repeat_kernel;
use super::{trim_to_common, FusionError};
use crate::encoder::{FeaturePyramid, PyramidVars};
use crate::graph::{Graph, Var};
use crate::nn::LayerNorm;
use crate::params::{xavier_bound, Bound, ParamId, ParamStore};
use crate::resolution::{fused_len, gcd_resolution, ResolutionSpec};
use crate::rng::SplitMix;
use crate::tensor::Tensor;

/// Scale applied to the Xavier bound of residual conv kernels under
/// [`FusionInit::NearIdentity`].
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionInit {
    /// Residual kernels exactly zero: every block is the identity.
    Identity,
    /// Small random residual kernels drawn from `seed`.
    NearIdentity { seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualConvBlock {
    pub norm: LayerNorm,
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ResidualConvBlock {
    pub const KERNEL: usize = 3;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: Option<&mut SplitMix>) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        let shape = [Self::KERNEL, dim, dim];
        let k = match rng {
            Some(r) => {
                let bound = RESIDUAL_INIT_SCALE * xavier_bound(Self::KERNEL * dim, Self::KERNEL * dim);
                Tensor::uniform(&shape, bound, r)
            }
            None => Tensor::zeros(&shape),
        };
        let kernel = store.add(format!("{name}.kernel"), k);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { norm, kernel, bias }
    }

    pub fn param_count(dim: usize) -> usize {
        Self::KERNEL * dim * dim + 3 * dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, FusionError> {
        let h = self.norm.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = g.conv1d_padded(h, p.var(self.kernel), 1, Self::KERNEL / 2)?;
        let h = g.add_row(h, p.var(self.bias))?;
        Ok(g.add(x, h)?)
    }
}

/// Transposed conv with kernel = stride = `ratio`, initialized to repeat frames.
#[derive(Debug, Clone, Copy)]
pub struct AlignDeconv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ratio: usize,
}

impl AlignDeconv {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize) -> Self {
        let kernel = store.add(format!("{name}.kernel"), repeat_kernel(ratio, dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { kernel, bias, ratio }
    }

    pub fn param_count(dim: usize, ratio: usize) -> usize {
        ratio * dim * dim + dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, FusionError> {
        let y = g.conv1d_transpose(x, p.var(self.kernel), self.ratio)?;
        Ok(g.add_row(y, p.var(self.bias))?)
    }
}

fn ratio(from: &ResolutionSpec, to: &ResolutionSpec) -> Result<usize, FusionError> {
    from.ratio_to(to).ok_or(FusionError::NonIntegerFactor { coarse: from.stride_product, fine: to.stride_product })
}

fn block(store: &mut ParamStore, name: &str, dim: usize, init: FusionInit, stream: u64) -> ResidualConvBlock {
    match init {
        FusionInit::Identity => ResidualConvBlock::new(store, name, dim, None),
        FusionInit::NearIdentity { seed } => {
            let mut rng = SplitMix::fork(seed, stream);
            ResidualConvBlock::new(store, name, dim, Some(&mut rng))
        }
    }
}

/// First fusion stage: two streams, the first no finer than the second.
#[derive(Debug, Clone)]
pub struct PairFusion {
    pub conv_coarse: ResidualConvBlock,
    pub conv_fine: ResidualConvBlock,
    pub deconv_coarse: AlignDeconv,
    pub deconv_fine: AlignDeconv,
    pub target: ResolutionSpec,
}

impl PairFusion {
    pub fn new(
        store: &mut ParamStore,
        coarse: &ResolutionSpec,
        fine: &ResolutionSpec,
        dim: usize,
        init: FusionInit,
    ) -> Result<Self, FusionError> {
        if coarse.stride_product < fine.stride_product {
            return Err(FusionError::ResolutionOrder(format!("{coarse} is finer than {fine}")));
        }
        let target = gcd_resolution(&[*coarse, *fine])?;
        Ok(Self {
            conv_coarse: block(store, "hier.conv1", dim, init, 1),
            conv_fine: block(store, "hier.conv2", dim, init, 2),
            deconv_coarse: AlignDeconv::new(store, "hier.deconv1", dim, ratio(coarse, &target)?),
            deconv_fine: AlignDeconv::new(store, "hier.deconv2", dim, ratio(fine, &target)?),
            target,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, coarse: Var, fine: Var, cap: Option<usize>) -> Result<Var, FusionError> {
        let a = self.conv_coarse.forward(g, p, coarse)?;
        let a = self.deconv_coarse.forward(g, p, a)?;
        let b = self.conv_fine.forward(g, p, fine)?;
        let b = self.deconv_fine.forward(g, p, b)?;
        let (t, _) = trim_to_common(g, &[a, b], cap)?;
        Ok(g.add(t[0], t[1])?)
    }
}

/// Second stage: merges the fused pair with a third stream.
#[derive(Debug, Clone)]
pub struct ThirdFusion {
    pub deconv_pair: AlignDeconv,
    pub conv_third: ResidualConvBlock,
    pub deconv_third: AlignDeconv,
    pub target: ResolutionSpec,
}

impl ThirdFusion {
    pub fn new(
        store: &mut ParamStore,
        pair: &ResolutionSpec,
        third: &ResolutionSpec,
        dim: usize,
        init: FusionInit,
    ) -> Result<Self, FusionError> {
        let target = gcd_resolution(&[*pair, *third])?;
        Ok(Self {
            deconv_pair: AlignDeconv::new(store, "hier.deconv12", dim, ratio(pair, &target)?),
            conv_third: block(store, "hier.conv3", dim, init, 3),
            deconv_third: AlignDeconv::new(store, "hier.deconv3", dim, ratio(third, &target)?),
            target,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, pair: Var, third: Var, cap: Option<usize>) -> Result<Var, FusionError> {
        let a = self.deconv_pair.forward(g, p, pair)?;
        let b = self.conv_third.forward(g, p, third)?;
        let b = self.deconv_third.forward(g, p, b)?;
        let (t, _) = trim_to_common(g, &[a, b], cap)?;
        Ok(g.add(t[0], t[1])?)
    }
}

#[derive(Debug, Clone)]
pub struct HierFusion {
    pub pair: PairFusion,
    pub third: Option<ThirdFusion>,
    resolutions: Vec<ResolutionSpec>,
}

impl HierFusion {
    /// `resolutions` must be strictly decreasing (coarse to fine), 2 or 3 long.
    pub fn new(store: &mut ParamStore, resolutions: &[ResolutionSpec], dim: usize, init: FusionInit) -> Result<Self, FusionError> {
        if !(2..=3).contains(&resolutions.len()) {
            return Err(FusionError::BadK(resolutions.len()));
        }
        if let Some(w) = resolutions.windows(2).find(|w| w[0].stride_product <= w[1].stride_product) {
            return Err(FusionError::ResolutionOrder(format!("{} must be coarser than {}", w[0], w[1])));
        }
        let pair = PairFusion::new(store, &resolutions[0], &resolutions[1], dim, init)?;
        let third = match resolutions.get(2) {
            Some(r3) => Some(ThirdFusion::new(store, &pair.target, r3, dim, init)?),
            None => None,
        };
        Ok(Self { pair, third, resolutions: resolutions.to_vec() })
    }

    pub fn target(&self) -> ResolutionSpec {
        self.third.as_ref().map_or(self.pair.target, |t| t.target)
    }

    pub fn resolutions(&self) -> &[ResolutionSpec] {
        &self.resolutions
    }

    /// Fuses the last layer of each pyramid.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pyramids: &[PyramidVars]) -> Result<Var, FusionError> {
        if pyramids.len() != self.resolutions.len() {
            return Err(FusionError::BadK(pyramids.len()));
        }
        for (py, r) in pyramids.iter().zip(&self.resolutions) {
            if py.resolution != *r {
                return Err(FusionError::ResolutionOrder(format!("got {}, expected {r}", py.resolution)));
            }
            if py.input_len != pyramids[0].input_len {
                return Err(FusionError::PyramidMismatch("pyramids come from different inputs".into()));
            }
        }
        let cap = fused_len(pyramids[0].input_len, &self.target());
        let x12 = self.pair.forward(g, p, pyramids[0].last(), pyramids[1].last(), Some(cap))?;
        match &self.third {
            None => Ok(x12),
            Some(t) => t.forward(g, p, x12, pyramids[2].last(), Some(cap)),
        }
    }

    pub fn evaluate(&self, store: &ParamStore, pyramids: &[FeaturePyramid]) -> Result<Tensor, FusionError> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<_> = pyramids.iter().map(|py| PyramidVars::constant(&mut g, py)).collect();
        let out = self.forward(&mut g, &p, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// Hierarchical fusion of computed pyramids (sorted coarse to fine) with
/// freshly initialized modules.
pub fn fuse_hier(pyramids: &[FeaturePyramid], init: FusionInit) -> Result<Tensor, FusionError> {
    let first = pyramids.first().ok_or(FusionError::BadK(0))?;
    let resolutions: Vec<_> = pyramids.iter().map(|p| p.resolution).collect();
    let mut store = ParamStore::new();
    let fusion = HierFusion::new(&mut store, &resolutions, first.dim(), init)?;
    fusion.evaluate(&store, pyramids)
}
