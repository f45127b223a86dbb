//! Edge-conditioned graph networks: the generator and discriminator of each
//! cascade stage.

mod checkpoint;
mod discriminator;
mod ecc;
mod generator;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use checkpoint::hex_digest;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use discriminator::{Discriminator, DiscriminatorVars};
pub use ecc::{ecc_forward, EccLayer, EccVars};
pub use generator::{BatchNorm, BatchStats, Generator, GeneratorOutput, GeneratorVars};

use crate::graphcore::DEFAULT_ROIS;

/// Architecture constants shared by a generator/discriminator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub n_rois: usize,
    /// Generator hidden width.
    pub hidden: usize,
    /// Discriminator hidden width.
    pub disc_hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Add the input adjacency to the final layer before symmetrising.
    pub skip: bool,
    #[serde(default)]
    pub norm_inference: NormInference,
}

/// Statistics batch-norm uses outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormInference {
    /// Node statistics of the graph being predicted, as in training.
    #[default]
    Graph,
    /// Exponential running averages collected during training.
    Running,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            n_rois: DEFAULT_ROIS,
            hidden: DEFAULT_ROIS,
            disc_hidden: DEFAULT_ROIS,
            dropout: 0.3,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            skip: true,
            norm_inference: NormInference::Graph,
        }
    }
}

impl GnnConfig {
    pub fn generator_dims(&self) -> [usize; 4] {
        [self.n_rois, self.hidden, self.hidden, self.n_rois]
    }

    pub fn discriminator_dims(&self) -> [usize; 3] {
        [2 * self.n_rois, self.disc_hidden, 1]
    }
}

/// Forward-pass behaviour.
///
/// Training mode normalises each graph over its own nodes and, when an RNG is
/// supplied, applies dropout. Eval mode never drops units and normalises
/// according to [`GnnConfig::norm_inference`]; it is deterministic.
pub enum Mode<'a> {
    Train { dropout: Option<&'a mut ChaCha8Rng> },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    fn dropout_rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Train { dropout: Some(rng) } => Some(&mut **rng),
            _ => None,
        }
    }
}
