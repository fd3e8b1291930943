//! Encoders plus an optional fusion stage, sharing one parameter store.

use crate::audio::AudioBuffer;
use crate::encoder::{Encoder, PyramidVars};
use crate::fusion::{weight_report, FusionInit, HierFusion, ParallelFusion, WeightReport};
use crate::graph::{Graph, Var};
use crate::harness::config::{FusionChoice, RunConfig};
use crate::harness::dump::FeatureDump;
use crate::harness::HarnessError;
use crate::params::{Bound, ParamStore};
use crate::resolution::ResolutionSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum FusionStage {
    None,
    Parallel(ParallelFusion),
    Hier(HierFusion),
}

#[derive(Debug, Clone)]
pub struct System {
    pub store: ParamStore,
    pub names: Vec<String>,
    pub encoders: Vec<Encoder>,
    pub fusion: FusionStage,
}

impl System {
    /// Instantiates every encoder of `cfg` and its fusion stage. Hierarchical
    /// modules start at the identity.
    pub fn build(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        for (k, e) in cfg.encoders.iter().enumerate() {
            encoders.push(Encoder::new(e.config.clone(), &mut store, &format!("enc{k}"))?);
        }
        let resolutions: Vec<_> = encoders.iter().map(Encoder::resolution).collect();
        let first = encoders[0].config();
        let fusion = match cfg.fusion {
            FusionChoice::None => FusionStage::None,
            FusionChoice::MrP => {
                FusionStage::Parallel(ParallelFusion::new(&mut store, &resolutions, first.layers, first.model_dim, cfg.up_mode)?)
            }
            FusionChoice::MrH => FusionStage::Hier(HierFusion::new(&mut store, &resolutions, first.model_dim, FusionInit::Identity)?),
        };
        Ok(Self { store, names: cfg.encoders.iter().map(|e| e.name.clone()).collect(), encoders, fusion })
    }

    pub fn dim(&self) -> usize {
        self.encoders[0].config().model_dim
    }

    pub fn output_resolution(&self) -> ResolutionSpec {
        match &self.fusion {
            FusionStage::None => self.encoders[0].resolution(),
            FusionStage::Parallel(f) => f.target(),
            FusionStage::Hier(f) => f.target(),
        }
    }

    /// Records the output features (`T x D`) for `audio`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, audio: &AudioBuffer) -> Result<Var, HarnessError> {
        let pyramids = self
            .encoders
            .iter()
            .map(|e| e.forward_graph(g, p, audio))
            .collect::<Result<Vec<PyramidVars>, _>>()?;
        Ok(match &self.fusion {
            FusionStage::None => pyramids[0].last(),
            FusionStage::Parallel(f) => f.forward(g, p, &pyramids)?,
            FusionStage::Hier(f) => f.forward(g, p, &pyramids)?,
        })
    }

    pub fn features(&self, audio: &AudioBuffer) -> Result<Tensor, HarnessError> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, audio)?;
        Ok(g.value(out).clone())
    }

    pub fn dump(&self, audio: &AudioBuffer) -> Result<FeatureDump, HarnessError> {
        let r = self.output_resolution();
        Ok(FeatureDump::new(self.features(audio)?, r.stride_product, r.sample_rate)?)
    }

    /// Per-encoder layer-weight totals; parallel fusion only.
    pub fn weight_report(&self) -> Option<WeightReport> {
        match &self.fusion {
            FusionStage::Parallel(f) => Some(weight_report(&f.weights(&self.store), &self.names)),
            _ => None,
        }
    }
}
