//! Config-driven runs: system assembly, feature dumps and toy training.

pub mod config;
pub mod data;
pub mod dump;
pub mod system;
pub mod train;

pub use config::{ConfigError, FusionChoice, RunConfig, Task, TrainConfig};
pub use data::{ctc_toy_dataset, Utterance, TOY_TONES_HZ, TOY_VOCAB};
pub use dump::{DumpError, FeatureDump};
pub use system::{FusionStage, System};
pub use train::{train_toy, train_toy_with, TrainReport};

use crate::audio::AudioError;
use crate::ctc::CtcError;
use crate::encoder::EncoderError;
use crate::fusion::FusionError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("task {0:?} does not train")]
    NotTrainable(Task),
}

impl HarnessError {
    pub(crate) fn is_non_finite(&self) -> bool {
        let t = match self {
            Self::Tensor(t) => t,
            Self::Encoder(EncoderError::Tensor(t)) => t,
            Self::Fusion(FusionError::Tensor(t)) => t,
            Self::Ctc(CtcError::Tensor(t)) => t,
            _ => return false,
        };
        matches!(t, TensorError::NonFinite(_))
    }
}
