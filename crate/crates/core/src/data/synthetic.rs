use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::graphcore::{symmetrize_clamp, ConnectivityMatrix, LongitudinalSample, DEFAULT_ROIS};

/// Population-level longitudinal drift on random baselines.
///
/// Each transition `t_{k-1} → t_k` draws one sparse signed drift pattern
/// shared by every subject (a `sparsity` fraction of edges moves by
/// `±drift_scale`), then adds per-subject symmetric Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub timepoints: usize,
    pub drift_scale: f64,
    pub noise_scale: f64,
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 30,
            n_rois: DEFAULT_ROIS,
            timepoints: 3,
            drift_scale: 0.05,
            noise_scale: 0.01,
            sparsity: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("at least one subject is required".into()));
        }
        if self.n_rois < 2 {
            return Err(Error::DegenerateGraph(self.n_rois));
        }
        if self.timepoints < 2 {
            return Err(Error::Config("at least two timepoints are required".into()));
        }
        let scales_ok = [self.drift_scale, self.noise_scale]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0);
        if !scales_ok || !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "drift_scale and noise_scale must be >= 0 and sparsity in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<LongitudinalSample>> {
    cfg.validate()?;
    let n = cfg.n_rois;
    let upper: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();

    let mut pattern_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patterns: Vec<Vec<f64>> = (1..cfg.timepoints)
        .map(|_| {
            upper
                .iter()
                .map(|_| {
                    if pattern_rng.gen::<f64>() < cfg.sparsity {
                        if pattern_rng.gen::<bool>() {
                            cfg.drift_scale
                        } else {
                            -cfg.drift_scale
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let noise = (cfg.noise_scale > 0.0).then(|| Normal::new(0.0, cfg.noise_scale).unwrap());
    let width = cfg.n_subjects.saturating_sub(1).to_string().len().max(3);
    (0..cfg.n_subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64 + 1);
            let raw = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen()).collect())?;
            let mut x = symmetrize_clamp(&raw)?;
            let mut graphs = vec![x.clone()];
            for pattern in &patterns {
                let mut w = x.weights().to_vec();
                for (&(i, j), &d) in upper.iter().zip(pattern) {
                    let eps = noise.map_or(0.0, |dist| dist.sample(&mut rng));
                    let v = (w[i * n + j] + d + eps).clamp(0.0, 1.0);
                    w[i * n + j] = v;
                    w[j * n + i] = v;
                }
                x = ConnectivityMatrix::new(n, w)?;
                graphs.push(x.clone());
            }
            LongitudinalSample::new(format!("sub-{s:0width$}"), graphs)
        })
        .collect()
}
