use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ecc::{ecc_forward, EccLayer, EccVars};
use super::{GnnConfig, Mode, NormInference};
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::{symmetrize_clamp_var, ConnectivityMatrix};

/// Per-feature normalisation across the nodes of a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[1, d], 1.0),
            beta: Tensor::zeros(&[1, d]),
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        }
    }

    /// Folds one graph's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Column statistics observed by a batch-norm layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

fn batch_norm(
    g: &mut Graph,
    bn: &BatchNorm,
    gamma: Var,
    beta: Var,
    x: Var,
    eps: f64,
    use_batch: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let (n, d) = g.value(x).dims2()?;
    let (centered, std, stats) = if use_batch {
        let colsum = g.sum_axis(x, 0)?;
        let mean = g.scalar_mul(colsum, 1.0 / n as f64);
        let mean_wide = g.repeat_rows(mean, n)?;
        let centered = g.sub(x, mean_wide)?;
        let sq = g.mul(centered, centered)?;
        let ss = g.sum_axis(sq, 0)?;
        let var = g.scalar_mul(ss, 1.0 / n as f64);
        let stats = BatchStats {
            mean: g.value(mean).data().to_vec(),
            unbiased_var: g
                .value(ss)
                .data()
                .iter()
                .map(|s| s / (n.max(2) - 1) as f64)
                .collect(),
        };
        let var = g.add_scalar(var, eps);
        let std = g.sqrt(var)?;
        (centered, std, Some(stats))
    } else {
        let mean = g.constant(Tensor::matrix(1, d, bn.running_mean.clone())?);
        let mean_wide = g.repeat_rows(mean, n)?;
        let centered = g.sub(x, mean_wide)?;
        let std = bn.running_var.iter().map(|v| (v + eps).sqrt()).collect();
        let std = g.constant(Tensor::matrix(1, d, std)?);
        (centered, std, None)
    };
    let std_wide = g.repeat_rows(std, n)?;
    let normed = g.div(centered, std_wide)?;
    let gamma = g.repeat_rows(gamma, n)?;
    let beta = g.repeat_rows(beta, n)?;
    let scaled = g.mul(normed, gamma)?;
    Ok((g.add(scaled, beta)?, stats))
}

/// Three-layer ECC encoder-decoder mapping a graph at `t_{i-1}` to `t_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub config: GnnConfig,
    pub layers: Vec<EccLayer>,
    pub norms: Vec<BatchNorm>,
}

/// Graph handles for all generator parameters, in [`Generator::params`] order.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub layers: Vec<EccVars>,
    pub norms: Vec<(Var, Var)>,
}

impl GeneratorVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        let per = EccLayer::PARAMS + 2;
        let chunks: Vec<&[Var]> = vars.chunks(per).collect();
        Self {
            layers: chunks.iter().map(|c| EccVars::from_slice(c)).collect(),
            norms: chunks.iter().map(|c| (c[3], c[4])).collect(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .zip(&self.norms)
            .flat_map(|(l, &(gamma, beta))| {
                let [a, b, c] = l.all();
                [a, b, c, gamma, beta]
            })
            .collect()
    }
}

pub struct GeneratorOutput {
    pub graph: Var,
    /// One entry per layer in training mode, empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
}

impl Generator {
    pub fn new(config: GnnConfig, rng: &mut impl Rng) -> Self {
        let dims = config.generator_dims();
        let layers = dims
            .windows(2)
            .map(|w| EccLayer::new(w[0], w[1], rng))
            .collect();
        let norms = dims[1..].iter().map(|&d| BatchNorm::new(d)).collect();
        Self {
            config,
            layers,
            norms,
        }
    }

    /// All weights and biases zero, batch-norm at identity: the output reduces
    /// to the skip path.
    pub fn zeroed(config: GnnConfig) -> Self {
        let dims = config.generator_dims();
        let layers = dims
            .windows(2)
            .map(|w| EccLayer::zeroed(w[0], w[1]))
            .collect();
        let norms = dims[1..].iter().map(|&d| BatchNorm::new(d)).collect();
        Self {
            config,
            layers,
            norms,
        }
    }

    pub fn n_rois(&self) -> usize {
        self.config.n_rois
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .zip(&self.norms)
            .flat_map(|(l, bn)| {
                let [a, b, c] = l.params();
                [a, b, c, &bn.gamma, &bn.beta]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(l, bn)| {
                let [a, b, c] = l.params_mut();
                [a, b, c, &mut bn.gamma, &mut bn.beta]
            })
            .collect()
    }

    /// Records every parameter as a leaf; `trainable` controls whether they receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        GeneratorVars::from_slice(&vars)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let dims = self.config.generator_dims();
        if self.layers.len() != 3 || self.norms.len() != 3 {
            return Err(Error::Dimension("generator needs exactly 3 layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check_shapes()?;
            if l.d_in != dims[i] || l.d_out != dims[i + 1] {
                return Err(Error::Dimension(format!(
                    "generator layer {i} dims mismatch"
                )));
            }
        }
        Ok(())
    }

    /// Predicts the next graph from `input` (an `n×n` adjacency node).
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &GeneratorVars,
        input: Var,
        mut mode: Mode<'_>,
    ) -> Result<GeneratorOutput> {
        let (n, c) = g.value(input).dims2()?;
        if n != c || n != self.n_rois() {
            return Err(Error::Dimension(format!(
                "generator for {} ROIs given a {n}×{c} graph",
                self.n_rois()
            )));
        }
        let cfg = &self.config;
        let graph_stats = mode.is_train() || cfg.norm_inference == NormInference::Graph;
        let mut h = input;
        let mut batch_stats = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = ecc_forward(g, layer, &vars.layers[l], input, h)?;
            let (gamma, beta) = vars.norms[l];
            let (normed, stats) =
                batch_norm(g, &self.norms[l], gamma, beta, h, cfg.bn_eps, graph_stats)?;
            h = normed;
            if mode.is_train() {
                batch_stats.extend(stats);
            }
            if l < last {
                h = g.leaky_relu(h, cfg.leaky_slope);
                if let Some(rng) = mode.dropout_rng() {
                    h = dropout(g, h, cfg.dropout, rng)?;
                }
            }
        }
        if cfg.skip {
            h = g.add(h, input)?;
        }
        let graph = symmetrize_clamp_var(g, h)?;
        Ok(GeneratorOutput { graph, batch_stats })
    }

    /// Eval-mode prediction outside any training graph.
    pub fn predict(&self, input: &ConnectivityMatrix) -> Result<ConnectivityMatrix> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.to_tensor());
        let out = self.forward(&mut g, &vars, x, Mode::Eval)?;
        ConnectivityMatrix::from_tensor(g.value(out.graph))
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let momentum = self.config.bn_momentum;
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            bn.update_running(s, momentum);
        }
    }
}

/// Inverted dropout with a fixed mask drawn from `rng`.
fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = g.value(x).map(|_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let mask = g.constant(mask);
    g.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::gradcheck;
    use crate::graphcore::symmetrize_clamp;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn small_config(n: usize) -> GnnConfig {
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
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::new(small_config(6), &mut rng);
        let x = random_graph(6, 2);
        assert_eq!(gen.predict(&x).unwrap(), gen.predict(&x).unwrap());
    }

    #[test]
    fn zeroed_generator_is_skip_only() {
        let gen = Generator::zeroed(small_config(5));
        let x = random_graph(5, 3);
        assert_eq!(gen.predict(&x).unwrap(), x);

        let mut g = Graph::new();
        let vars = gen.bind(&mut g, true);
        let input = g.constant(x.to_tensor());
        let out = gen
            .forward(&mut g, &vars, input, Mode::Train { dropout: None })
            .unwrap();
        assert_eq!(g.value(out.graph).data(), x.weights());
    }

    #[test]
    fn rejects_wrong_size_input() {
        let gen = Generator::zeroed(small_config(5));
        assert!(matches!(
            gen.predict(&random_graph(4, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn training_mode_reports_stats_and_dropout_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = Generator::new(small_config(6), &mut rng);
        let x = random_graph(6, 4);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let vars = gen.bind(&mut g, true);
            let input = g.constant(x.to_tensor());
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let out = gen
                .forward(
                    &mut g,
                    &vars,
                    input,
                    Mode::Train {
                        dropout: Some(&mut drng),
                    },
                )
                .unwrap();
            assert_eq!(out.batch_stats.len(), 3);
            g.value(out.graph).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gen = Generator::new(small_config(n), &mut rng);
        let x = random_graph(n, 12);
        let target = random_graph(n, 13).to_tensor();
        let params: Vec<Tensor> = gen.params().into_iter().cloned().collect();
        let report = gradcheck(
            |g, p| {
                let vars = GeneratorVars::from_slice(p);
                let input = g.constant(x.to_tensor());
                let out = gen.forward(g, &vars, input, Mode::Train { dropout: None })?;
                let t = g.constant(target.clone());
                let d = g.sub(out.graph, t)?;
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    fn train_prediction(
        gen: &Generator,
        x: &ConnectivityMatrix,
    ) -> (ConnectivityMatrix, Vec<BatchStats>) {
        let mut g = Graph::new();
        let vars = gen.bind(&mut g, false);
        let input = g.constant(x.to_tensor());
        let out = gen
            .forward(&mut g, &vars, input, Mode::Train { dropout: None })
            .unwrap();
        (
            ConnectivityMatrix::from_tensor(g.value(out.graph)).unwrap(),
            out.batch_stats,
        )
    }

    #[test]
    fn graph_inference_matches_train_mode_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gen = Generator::new(small_config(6), &mut rng);
        let x = random_graph(6, 22);
        let (train, _) = train_prediction(&gen, &x);
        assert_eq!(gen.predict(&x).unwrap(), train);
    }

    #[test]
    fn running_inference_uses_collected_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = GnnConfig {
            norm_inference: NormInference::Running,
            ..small_config(6)
        };
        let mut gen = Generator::new(cfg, &mut rng);
        let x = random_graph(6, 24);
        let before = gen.predict(&x).unwrap();
        let (_, stats) = train_prediction(&gen, &x);
        assert_eq!(stats.len(), 3);
        gen.update_running_stats(&stats);
        let after = gen.predict(&x).unwrap();
        assert_ne!(before, after);
        assert!(after.first_violation(0.0).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn output_is_valid_for_any_parameters(seed in 0u64..10_000, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gen = Generator::new(small_config(6), &mut rng);
            for p in gen.params_mut() {
                for v in p.data_mut() {
                    *v *= scale;
                }
            }
            let out = gen.predict(&random_graph(6, seed + 1)).unwrap();
            prop_assert!(out.first_violation(0.0).is_none());
        }
    }
}
