//! Training objective: adversarial, l1, per-node Gaussian KL and the
//! node-strength topology term, plus their weighted combination.
//!
//! Each differentiable term has a plain `f64` form and a recorded `*_var` form
//! that builds the same expression on a [`Graph`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::{
    node_strength, node_strength_var, node_weight_stats, node_weight_stats_var, ConnectivityMatrix,
    SIGMA_FLOOR,
};

/// Scores are clamped into `[ADV_EPS, 1 - ADV_EPS]` before taking logs.
pub const ADV_EPS: f64 = 1e-7;

/// Which distribution-alignment term accompanies the adversarial and l1 losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Adversarial + l1 + KL.
    Full,
    /// Adversarial + l1.
    NoKl,
    /// Adversarial + l1 + node-strength distance (weighted by `lambda3`).
    NoKlPlusTopology,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoKl, Variant::NoKlPlusTopology, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKl => "no_kl",
            Variant::NoKlPlusTopology => "no_kl_plus_topology",
        }
    }

    /// Row label used in tabular reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Full => "EvoGraphNet",
            Variant::NoKl => "Base EvoGraphNet (w/o KL)",
            Variant::NoKlPlusTopology => "EvoGraphNet (w/o KL) + Topology",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_kl" => Ok(Variant::NoKl),
            "no_kl_plus_topology" | "no_kl_topology" => Ok(Variant::NoKlPlusTopology),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no_kl or no_kl_plus_topology)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub variant: Variant,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 2.0,
            lambda3: 0.001,
            variant: Variant::Full,
        }
    }
}

impl LossWeights {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(ADV_EPS, 1.0 - ADV_EPS)
}

/// Discriminator loss `-log D(real) - log(1 - D(fake))`.
pub fn adversarial_loss_d(score_real: f64, score_fake: f64) -> f64 {
    -clamp_score(score_real).ln() - (1.0 - clamp_score(score_fake)).ln()
}

/// Non-saturating generator loss `-log D(fake)`.
pub fn adversarial_loss_g(score_fake: f64) -> f64 {
    -clamp_score(score_fake).ln()
}

pub fn adversarial_loss_d_var(g: &mut Graph, score_real: Var, score_fake: Var) -> Result<Var> {
    let r = g.clamp(score_real, ADV_EPS, 1.0 - ADV_EPS);
    let lr = g.log(r)?;
    let f = g.clamp(score_fake, ADV_EPS, 1.0 - ADV_EPS);
    let one_minus = g.scalar_mul(f, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let lf = g.log(one_minus)?;
    let s = g.add(lr, lf)?;
    Ok(g.neg(s))
}

pub fn adversarial_loss_g_var(g: &mut Graph, score_fake: Var) -> Result<Var> {
    let f = g.clamp(score_fake, ADV_EPS, 1.0 - ADV_EPS);
    let lf = g.log(f)?;
    Ok(g.neg(lf))
}

fn same_size(a: &ConnectivityMatrix, b: &ConnectivityMatrix) -> Result<()> {
    if a.n_rois() != b.n_rois() {
        return Err(Error::Dimension(format!(
            "graphs of {} and {} ROIs",
            a.n_rois(),
            b.n_rois()
        )));
    }
    Ok(())
}

/// Entrywise l1 distance over the full matrix (each edge counted twice).
pub fn l1_loss(predicted: &ConnectivityMatrix, target: &ConnectivityMatrix) -> Result<f64> {
    same_size(predicted, target)?;
    Ok(predicted
        .weights()
        .iter()
        .zip(target.weights())
        .map(|(p, t)| (p - t).abs())
        .sum())
}

pub fn l1_loss_var(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    let d = g.sub(predicted, target)?;
    let a = g.abs(d);
    Ok(g.sum(a))
}

/// Closed-form `KL(N(mu_p, sigma_p) || N(mu_q, sigma_q))`.
pub fn kl_gaussian(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64) -> Result<f64> {
    for s in [sigma_p, sigma_q] {
        if !(s >= SIGMA_FLOOR) {
            return Err(Error::Contract(format!(
                "standard deviation {s} is below the floor {SIGMA_FLOOR}"
            )));
        }
    }
    Ok(kl_closed_form(mu_p, sigma_p, mu_q, sigma_q))
}

fn kl_closed_form(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64) -> f64 {
    let d = mu_p - mu_q;
    (sigma_q / sigma_p).ln() + (sigma_p * sigma_p + d * d) / (2.0 * sigma_q * sigma_q) - 0.5
}

/// Sum over nodes of `KL(p_k || q_k)` with `p` fitted on `predicted`, `q` on `target`.
pub fn kl_loss(
    predicted: &ConnectivityMatrix,
    target: &ConnectivityMatrix,
    sigma_floor: f64,
) -> Result<f64> {
    same_size(predicted, target)?;
    let p = node_weight_stats(predicted, sigma_floor)?;
    let q = node_weight_stats(target, sigma_floor)?;
    Ok((0..p.mu.len())
        .map(|k| kl_closed_form(p.mu[k], p.sigma[k], q.mu[k], q.sigma[k]))
        .sum())
}

/// Recorded [`kl_loss`]; gradients flow into `predicted` only.
pub fn kl_loss_var(
    g: &mut Graph,
    predicted: Var,
    target: &ConnectivityMatrix,
    sigma_floor: f64,
) -> Result<Var> {
    let n = target.n_rois();
    if g.value(predicted).shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "predicted {:?} vs target {n}×{n}",
            g.value(predicted).shape()
        )));
    }
    let q = node_weight_stats(target, sigma_floor)?;
    let (mu_p, sigma_p) = node_weight_stats_var(g, predicted, sigma_floor)?;

    let mu_q = g.constant(Tensor::matrix(n, 1, q.mu.clone())?);
    let log_sq = g.constant(Tensor::matrix(
        n,
        1,
        q.sigma.iter().map(|s| s.ln()).collect(),
    )?);
    let inv_two_var_q = g.constant(Tensor::matrix(
        n,
        1,
        q.sigma.iter().map(|s| 1.0 / (2.0 * s * s)).collect(),
    )?);

    let log_sp = g.log(sigma_p)?;
    let log_ratio = g.sub(log_sq, log_sp)?;
    let var_p = g.mul(sigma_p, sigma_p)?;
    let d = g.sub(mu_p, mu_q)?;
    let d2 = g.mul(d, d)?;
    let num = g.add(var_p, d2)?;
    let quad = g.mul(num, inv_two_var_q)?;
    let per_node = g.add(log_ratio, quad)?;
    let total = g.sum(per_node);
    Ok(g.add_scalar(total, -0.5 * n as f64))
}

/// Euclidean distance between node-strength vectors.
pub fn topology_loss(predicted: &ConnectivityMatrix, target: &ConnectivityMatrix) -> Result<f64> {
    same_size(predicted, target)?;
    let sp = node_strength(predicted);
    let st = node_strength(target);
    Ok(sp
        .iter()
        .zip(&st)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn topology_loss_var(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    let sp = node_strength_var(g, predicted)?;
    let st = node_strength_var(g, target)?;
    let d = g.sub(sp, st)?;
    let d2 = g.mul(d, d)?;
    let ss = g.sum(d2);
    if g.scalar(ss) == 0.0 {
        // zero subgradient at the minimum instead of sqrt's infinite slope
        return Ok(ss);
    }
    g.sqrt(ss)
}

/// Per-timepoint generator loss components for every training subject.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimepointLosses {
    /// Adversarial term (already averaged over subjects).
    pub adversarial: f64,
    pub l1: Vec<f64>,
    /// KL or topology values, one per subject, according to the variant.
    pub regularizer: Vec<f64>,
}

/// `Σ_i ( λ1·adv_i + (λ2/n_s)·Σ l1 + (λ3/n_s)·Σ reg )`.
///
/// The regulariser term is dropped for [`Variant::NoKl`].
pub fn full_loss(
    terms: &[TimepointLosses],
    weights: &LossWeights,
    n_s: usize,
    m: usize,
) -> Result<f64> {
    if terms.len() != m {
        return Err(Error::Contract(format!(
            "{} timepoint terms supplied for m = {m}",
            terms.len()
        )));
    }
    if n_s == 0 {
        return Err(Error::Contract("no subjects".into()));
    }
    let ns = n_s as f64;
    let mut total = 0.0;
    for (i, t) in terms.iter().enumerate() {
        let reg_needed = weights.variant != Variant::NoKl;
        if t.l1.len() != n_s || (reg_needed && t.regularizer.len() != n_s) {
            return Err(Error::Contract(format!(
                "timepoint {} carries {} l1 / {} regulariser terms for {n_s} subjects",
                i + 1,
                t.l1.len(),
                t.regularizer.len()
            )));
        }
        let mut stage =
            weights.lambda1 * t.adversarial + weights.lambda2 / ns * t.l1.iter().sum::<f64>();
        if reg_needed {
            stage += weights.lambda3 / ns * t.regularizer.iter().sum::<f64>();
        }
        total += stage;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::gradcheck;
    use crate::graphcore::symmetrize_clamp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[Vec<f64>]) -> ConnectivityMatrix {
        ConnectivityMatrix::from_rows(rows).unwrap()
    }

    fn constant(n: usize, w: f64) -> ConnectivityMatrix {
        let mut rows = vec![vec![w; n]; n];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        cm(&rows)
    }

    fn random_graph(n: usize, seed: u64) -> ConnectivityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::matrix(
            n,
            n,
            (0..n * n).map(|_| rng.gen_range(0.05..0.95)).collect(),
        )
        .unwrap();
        symmetrize_clamp(&raw).unwrap()
    }

    #[test]
    fn adversarial_values() {
        assert_relative_eq!(
            adversarial_loss_d(0.5, 0.5),
            2.0 * 2f64.ln(),
            epsilon = 1e-15
        );
        assert!(adversarial_loss_d(1.0 - ADV_EPS, ADV_EPS) < 1e-6);
        assert!(adversarial_loss_d(1.0, 0.0).is_finite());
        assert_relative_eq!(
            adversarial_loss_d(0.8, 0.3),
            0.579_818_495_252_942,
            epsilon = 1e-12
        );
        assert_relative_eq!(adversarial_loss_g(0.5), 2f64.ln(), epsilon = 1e-15);
        assert!(adversarial_loss_g(1.0 - ADV_EPS) < 1e-6);
        assert_relative_eq!(
            adversarial_loss_g(0.25),
            1.386_294_361_119_890_6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn recorded_adversarial_matches_direct() {
        let mut g = Graph::new();
        let r = g.param(Tensor::scalar(0.8));
        let f = g.param(Tensor::scalar(0.3));
        let d = adversarial_loss_d_var(&mut g, r, f).unwrap();
        assert_relative_eq!(g.scalar(d), adversarial_loss_d(0.8, 0.3), epsilon = 1e-15);
        let gl = adversarial_loss_g_var(&mut g, f).unwrap();
        assert_relative_eq!(g.scalar(gl), adversarial_loss_g(0.3), epsilon = 1e-15);
    }

    #[test]
    fn l1_values() {
        let a = constant(3, 0.4);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let p = cm(&[vec![0.0, 0.2], vec![0.2, 0.0]]);
        let t = cm(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
        assert!((l1_loss(&p, &t).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(
            l1_loss(&ConnectivityMatrix::zeros(3), &constant(3, 1.0)).unwrap(),
            6.0
        );
        assert!(l1_loss(&p, &ConnectivityMatrix::zeros(3)).is_err());
    }

    #[test]
    fn kl_gaussian_values() {
        assert_eq!(kl_gaussian(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            kl_gaussian(1.0, 1.0, 0.0, 1.0).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            kl_gaussian(0.0, 2.0, 0.0, 1.0).unwrap(),
            0.5f64.ln() + 1.5,
            epsilon = 1e-15
        );
        assert!(matches!(
            kl_gaussian(0.0, 0.0, 0.0, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_loss_values() {
        let g = random_graph(6, 1);
        assert_eq!(kl_loss(&g, &g, SIGMA_FLOOR).unwrap(), 0.0);

        let p = constant(3, 0.5);
        let t = constant(3, 0.3);
        let expected = 3.0 * kl_gaussian(0.5, SIGMA_FLOOR, 0.3, SIGMA_FLOOR).unwrap();
        assert_relative_eq!(
            kl_loss(&p, &t, SIGMA_FLOOR).unwrap(),
            expected,
            max_relative = 1e-12
        );

        let perm = [3, 0, 5, 1, 4, 2];
        let (a, b) = (random_graph(6, 2), random_graph(6, 3));
        assert_relative_eq!(
            kl_loss(&a, &b, SIGMA_FLOOR).unwrap(),
            kl_loss(&a.permuted(&perm), &b.permuted(&perm), SIGMA_FLOOR).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn recorded_kl_matches_direct() {
        let (a, b) = (random_graph(7, 4), random_graph(7, 5));
        let mut g = Graph::new();
        let x = g.constant(a.to_tensor());
        let k = kl_loss_var(&mut g, x, &b, SIGMA_FLOOR).unwrap();
        assert_relative_eq!(
            g.scalar(k),
            kl_loss(&a, &b, SIGMA_FLOOR).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn topology_values() {
        let a = random_graph(5, 6);
        assert_eq!(topology_loss(&a, &a).unwrap(), 0.0);
        let p = cm(&[vec![0.0, 0.2], vec![0.2, 0.0]]);
        let t = cm(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
        assert!((topology_loss(&p, &t).unwrap() - (2.0f64 * 0.09).sqrt()).abs() < 1e-12);
        let perm = [4, 2, 0, 1, 3];
        let b = random_graph(5, 7);
        assert_relative_eq!(
            topology_loss(&a, &b).unwrap(),
            topology_loss(&a.permuted(&perm), &b.permuted(&perm)).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn topology_var_zero_distance_has_zero_gradient() {
        let a = random_graph(4, 8);
        let mut g = Graph::new();
        let x = g.param(a.to_tensor());
        let t = g.constant(a.to_tensor());
        let l = topology_loss_var(&mut g, x, t).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_loss_fixture() {
        let terms = [TimepointLosses {
            adversarial: 1.0,
            l1: vec![0.6, 0.6],
            regularizer: vec![0.0, 0.0],
        }];
        let w = LossWeights::default();
        assert_eq!(full_loss(&terms, &w, 2, 1).unwrap(), 3.2);

        let zero = [TimepointLosses {
            adversarial: 0.0,
            l1: vec![0.0; 2],
            regularizer: vec![0.0; 2],
        }];
        assert_eq!(full_loss(&zero, &w, 2, 1).unwrap(), 0.0);
        assert!(matches!(
            full_loss(&terms, &w, 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn doubling_lambda2_doubles_only_l1_part() {
        let terms = [
            TimepointLosses {
                adversarial: 0.7,
                l1: vec![1.5, 2.5, 0.5],
                regularizer: vec![3.0, 1.0, 2.0],
            },
            TimepointLosses {
                adversarial: 0.9,
                l1: vec![2.0, 1.0, 3.0],
                regularizer: vec![0.5, 0.5, 4.0],
            },
        ];
        let w = LossWeights::default();
        let base = full_loss(&terms, &w, 3, 2).unwrap();
        let no_l1 = full_loss(&terms, &LossWeights { lambda2: 0.0, ..w }, 3, 2).unwrap();
        let doubled = full_loss(&terms, &LossWeights { lambda2: 4.0, ..w }, 3, 2).unwrap();
        assert_relative_eq!(doubled - no_l1, 2.0 * (base - no_l1), max_relative = 1e-12);
    }

    #[test]
    fn variants_select_regulariser() {
        let terms = [TimepointLosses {
            adversarial: 1.0,
            l1: vec![1.0],
            regularizer: vec![100.0],
        }];
        let full = full_loss(&terms, &LossWeights::for_variant(Variant::Full), 1, 1).unwrap();
        let nokl = full_loss(&terms, &LossWeights::for_variant(Variant::NoKl), 1, 1).unwrap();
        let topo = full_loss(
            &terms,
            &LossWeights::for_variant(Variant::NoKlPlusTopology),
            1,
            1,
        )
        .unwrap();
        assert_relative_eq!(nokl, 4.0);
        assert_relative_eq!(full, 4.1, epsilon = 1e-12);
        assert_eq!(full, topo);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("wgan".parse::<Variant>().is_err());
    }

    fn interior_pair(n: usize, seed: u64) -> (Tensor, ConnectivityMatrix) {
        (
            random_graph(n, seed).to_tensor(),
            random_graph(n, seed + 100),
        )
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (p, t) = interior_pair(5, 30);
        let tt = t.to_tensor();
        let l1 = gradcheck(
            |g, v| {
                let tv = g.constant(tt.clone());
                l1_loss_var(g, v[0], tv)
            },
            &[p.clone()],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(l1.passed(), "l1 {}", l1.max_rel_error());

        let kl = gradcheck(
            |g, v| kl_loss_var(g, v[0], &t, SIGMA_FLOOR),
            &[p.clone()],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(kl.passed(), "kl {}", kl.max_rel_error());

        let topo = gradcheck(
            |g, v| {
                let tv = g.constant(tt.clone());
                topology_loss_var(g, v[0], tv)
            },
            &[p],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(topo.passed(), "topology {}", topo.max_rel_error());

        let adv = gradcheck(
            |g, v| {
                let d = adversarial_loss_d_var(g, v[0], v[1])?;
                let gl = adversarial_loss_g_var(g, v[1])?;
                g.add(d, gl)
            },
            &[Tensor::scalar(0.73), Tensor::scalar(0.41)],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(adv.passed(), "adversarial {}", adv.max_rel_error());
    }
}
