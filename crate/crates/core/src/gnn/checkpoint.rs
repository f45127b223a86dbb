//! Versioned JSON container for one cascade stage.
//!
//! ```json
//! {
//!   "format": "evographnet-checkpoint",
//!   "version": 1,
//!   "stage": 1,
//!   "config_hash": "<sha256 of the training config>",
//!   "generator": { "config": {..}, "layers": [..], "norms": [..] },
//!   "discriminator": { "config": {..}, "layers": [..] }
//! }
//! ```
//!
//! Tensors are stored as `{"shape": [..], "data": [..]}`. Floats are written
//! in shortest round-trip form and parsed with exact rounding, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, Generator};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "evographnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// 1-based cascade stage (`G_i` predicts `t_i`).
    pub stage: usize,
    pub config_hash: String,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Checkpoint {
    pub fn new(
        stage: usize,
        config_hash: impl Into<String>,
        generator: Generator,
        discriminator: Discriminator,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            stage,
            config_hash: config_hash.into(),
            generator,
            discriminator,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<checkpoint>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        ckpt.generator.check_shapes()?;
        ckpt.discriminator.check_shapes()?;
        Ok(ckpt)
    }

    /// SHA-256 over the serialized parameters.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(self.to_json()?.as_bytes()))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tensor;
    use crate::gnn::GnnConfig;
    use crate::graphcore::symmetrize_clamp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_forward_is_bitwise_identical() {
        let cfg = GnnConfig {
            n_rois: 6,
            hidden: 5,
            disc_hidden: 3,
            ..GnnConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = Generator::new(cfg.clone(), &mut rng);
        gen.norms[0].running_mean[2] = 0.123456789012345678;
        let disc = Discriminator::new(cfg, &mut rng);
        let ckpt = Checkpoint::new(2, "abc", gen, disc);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);

        let raw = Tensor::matrix(6, 6, (0..36).map(|_| rng.gen()).collect()).unwrap();
        let x = symmetrize_clamp(&raw).unwrap();
        let a = ckpt.generator.predict(&x).unwrap();
        let b = back.generator.predict(&x).unwrap();
        assert!(a
            .weights()
            .iter()
            .zip(b.weights())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(
            ckpt.discriminator.score(&x, &a).unwrap().to_bits(),
            back.discriminator.score(&x, &b).unwrap().to_bits()
        );
    }

    #[test]
    fn rejects_unknown_version() {
        let cfg = GnnConfig {
            n_rois: 3,
            hidden: 2,
            disc_hidden: 2,
            ..GnnConfig::default()
        };
        let mut ckpt = Checkpoint::new(
            1,
            "h",
            Generator::zeroed(cfg.clone()),
            Discriminator::zeroed(cfg),
        );
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
