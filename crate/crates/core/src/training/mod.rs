//! Optimisation of the generator cascade: AdamW, the per-epoch adversarial
//! schedule and cross-validation.

mod adamw;
mod cascade;
mod kfold;

use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWConfig};
pub use cascade::{
    cross_validate, train_cascade, Cascade, EpochRecord, FoldOutcome, LossHistory, TrainOutcome,
};
pub use kfold::{kfold_split, FoldSplit};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gnn::{hex_digest, GnnConfig};
use crate::graphcore::SIGMA_FLOOR;
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Number of predicted timepoints (cascade length).
    pub m: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub folds: usize,
    pub sigma_floor: f64,
    pub gnn: GnnConfig,
    /// Let generator-loss gradients flow back through earlier stages.
    pub chain_backprop: bool,
    pub generator_optim: AdamWConfig,
    pub discriminator_optim: AdamWConfig,
    /// Discriminator updates per epoch, performed before the generator updates.
    pub d_steps: usize,
    pub g_steps: usize,
    /// Results are identical in either mode, so this is not part of the hash.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            m: 2,
            loss: LossWeights::default(),
            seed: 0,
            folds: 3,
            sigma_floor: SIGMA_FLOOR,
            gnn: GnnConfig::default(),
            chain_backprop: true,
            generator_optim: AdamWConfig::generator(),
            discriminator_optim: AdamWConfig::discriminator(),
            d_steps: 1,
            g_steps: 1,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.m < 1 {
            return bad("m must be at least 1".into());
        }
        if !(self.sigma_floor > 0.0) {
            return bad(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            ));
        }
        if self.d_steps < 1 || self.g_steps < 1 {
            return bad("d_steps and g_steps must be at least 1".into());
        }
        let g = &self.gnn;
        if g.n_rois < 2 || g.hidden < 1 || g.disc_hidden < 1 {
            return bad(format!("invalid network widths {g:?}"));
        }
        if !(0.0..1.0).contains(&g.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", g.dropout));
        }
        if !(g.bn_eps > 0.0) || !(0.0..=1.0).contains(&g.bn_momentum) {
            return bad(format!("invalid batch-norm settings {g:?}"));
        }
        self.loss.validate()?;
        self.generator_optim.validate()?;
        self.discriminator_optim.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    /// Same config, seeded for one cross-validation fold.
    pub fn for_fold(&self, fold: usize) -> Self {
        Self {
            seed: self.seed.wrapping_add(fold as u64),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Variant;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.m, c.folds), (500, 2, 3));
        assert_eq!(
            (c.loss.lambda1, c.loss.lambda2, c.loss.lambda3),
            (2.0, 2.0, 0.001)
        );
        assert_eq!(c.generator_optim.lr, 0.01);
        assert_eq!(c.discriminator_optim.lr, 0.0002);
        assert_eq!(c.generator_optim.beta1, 0.5);
        assert!(c.chain_backprop);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_invalid() {
        for f in [
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.folds = 1,
            |c: &mut TrainConfig| c.m = 0,
            |c: &mut TrainConfig| c.sigma_floor = 0.0,
            |c: &mut TrainConfig| c.gnn.dropout = 1.0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn hash_ignores_execution_but_not_variant() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            execution: Execution::Sequential,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = TrainConfig {
            loss: LossWeights::for_variant(Variant::NoKl),
            ..a.clone()
        };
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.for_fold(2).seed, 2);
    }
}
