use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ecc::{ecc_forward, EccLayer, EccVars};
use super::GnnConfig;
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::ConnectivityMatrix;

/// Two-layer ECC network scoring how real a graph looks given a reference.
///
/// Node features are the concatenated rows of the conditioning graph and the
/// judged graph; messages travel along the judged graph's edges. The readout
/// is the sigmoid of the mean node output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: GnnConfig,
    pub layers: Vec<EccLayer>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub layers: Vec<EccVars>,
}

impl DiscriminatorVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            layers: vars
                .chunks(EccLayer::PARAMS)
                .map(EccVars::from_slice)
                .collect(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.all()).collect()
    }
}

impl Discriminator {
    pub fn new(config: GnnConfig, rng: &mut impl Rng) -> Self {
        let dims = config.discriminator_dims();
        let layers = dims
            .windows(2)
            .map(|w| EccLayer::new(w[0], w[1], rng))
            .collect();
        Self { config, layers }
    }

    pub fn zeroed(config: GnnConfig) -> Self {
        let dims = config.discriminator_dims();
        let layers = dims
            .windows(2)
            .map(|w| EccLayer::zeroed(w[0], w[1]))
            .collect();
        Self { config, layers }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscriminatorVars {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        DiscriminatorVars::from_slice(&vars)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let dims = self.config.discriminator_dims();
        if self.layers.len() != 2 {
            return Err(Error::Dimension(
                "discriminator needs exactly 2 layers".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check_shapes()?;
            if l.d_in != dims[i] || l.d_out != dims[i + 1] {
                return Err(Error::Dimension(format!(
                    "discriminator layer {i} dims mismatch"
                )));
            }
        }
        Ok(())
    }

    /// Realness score in `(0, 1)` as a scalar node.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &DiscriminatorVars,
        cond: Var,
        judged: Var,
    ) -> Result<Var> {
        let n = self.config.n_rois;
        for v in [cond, judged] {
            if g.value(v).shape() != [n, n] {
                return Err(Error::Dimension(format!(
                    "discriminator for {n} ROIs given a graph of shape {:?}",
                    g.value(v).shape()
                )));
            }
        }
        let x = g.concat(cond, judged, 1)?;
        let h = ecc_forward(g, &self.layers[0], &vars.layers[0], judged, x)?;
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let h = ecc_forward(g, &self.layers[1], &vars.layers[1], judged, h)?;
        let logit = g.mean(h);
        Ok(g.sigmoid(logit))
    }

    pub fn score(&self, cond: &ConnectivityMatrix, judged: &ConnectivityMatrix) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let c = g.constant(cond.to_tensor());
        let j = g.constant(judged.to_tensor());
        let s = self.forward(&mut g, &vars, c, j)?;
        Ok(g.scalar(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::gradcheck;
    use crate::graphcore::symmetrize_clamp;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize) -> GnnConfig {
        GnnConfig {
            n_rois: n,
            hidden: 4,
            disc_hidden: 4,
            ..GnnConfig::default()
        }
    }

    fn random_graph(n: usize, seed: u64) -> ConnectivityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen()).collect()).unwrap();
        symmetrize_clamp(&raw).unwrap()
    }

    #[test]
    fn zero_network_scores_one_half() {
        let d = Discriminator::zeroed(cfg(4));
        let s = d.score(&random_graph(4, 1), &random_graph(4, 2)).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn rejects_size_mismatch() {
        let d = Discriminator::zeroed(cfg(4));
        assert!(d.score(&random_graph(4, 1), &random_graph(5, 2)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = Discriminator::new(cfg(n), &mut rng);
        let (c, j) = (random_graph(n, 22), random_graph(n, 23));
        let params: Vec<Tensor> = d.params().into_iter().cloned().collect();
        let report = gradcheck(
            |g, p| {
                let vars = DiscriminatorVars::from_slice(p);
                let cv = g.constant(c.to_tensor());
                let jv = g.constant(j.to_tensor());
                let s = d.forward(g, &vars, cv, jv)?;
                g.log(s)
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn score_in_open_unit_interval(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Discriminator::new(cfg(5), &mut rng);
            let s = d.score(&random_graph(5, seed ^ 7), &random_graph(5, seed ^ 9)).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
