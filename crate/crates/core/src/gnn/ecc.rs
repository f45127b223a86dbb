//! Edge-conditioned graph convolution.
//!
//! For node `k` with neighbourhood `N(k) = {k' : w[k'][k] > 0} ∪ {k}`:
//!
//! ```text
//! Y(k) = 1/|N(k)| · Σ_{k' ∈ N(k)} Θ(k', k) · Y_prev(k') + b
//! Θ(k', k) = reshape(F(L(k', k)))      F(l) = l · ω + β_F
//! ```
//!
//! The label `L(k', k)` is the edge weight and the self loop carries label 0.
//! Because `F` is affine in the label, the sum splits into two dense products,
//! `(L ⊙ mask) · Y · Aᵀ + mask · Y · Bᵀ`, where `A` and `B` are `ω` and `β_F`
//! viewed as `d_out × d_in` matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Filter-network weight, `(d_in·d_out) × 1`.
    pub filter_weight: Tensor,
    /// Filter-network bias, `d_in·d_out`.
    pub filter_bias: Tensor,
    /// Output bias, `1 × d_out`.
    pub bias: Tensor,
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct EccVars {
    pub filter_weight: Var,
    pub filter_bias: Var,
    pub bias: Var,
}

impl EccVars {
    pub fn all(&self) -> [Var; 3] {
        [self.filter_weight, self.filter_bias, self.bias]
    }
}

impl EccLayer {
    pub const PARAMS: usize = 3;

    /// Uniform initialisation in `±1/√d_in`.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut draw =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let dd = d_in * d_out;
        Self {
            d_in,
            d_out,
            filter_weight: Tensor::matrix(dd, 1, draw(dd)).unwrap(),
            filter_bias: Tensor::vector(draw(dd)).unwrap(),
            bias: Tensor::matrix(1, d_out, draw(d_out)).unwrap(),
        }
    }

    pub fn zeroed(d_in: usize, d_out: usize) -> Self {
        let dd = d_in * d_out;
        Self {
            d_in,
            d_out,
            filter_weight: Tensor::zeros(&[dd, 1]),
            filter_bias: Tensor::zeros(&[dd]),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.filter_weight, &self.filter_bias, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [
            &mut self.filter_weight,
            &mut self.filter_bias,
            &mut self.bias,
        ]
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let dd = self.d_in * self.d_out;
        if self.filter_weight.shape() != [dd, 1]
            || self.filter_bias.shape() != [dd]
            || self.bias.shape() != [1, self.d_out]
        {
            return Err(Error::Dimension(format!(
                "ECC layer {}→{} has inconsistent parameter shapes",
                self.d_in, self.d_out
            )));
        }
        Ok(())
    }
}

impl EccVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            filter_weight: vars[0],
            filter_bias: vars[1],
            bias: vars[2],
        }
    }
}

/// Neighbourhood masks derived from an adjacency value.
///
/// Returns `(labels_mask, mask, inv_degree)` where `mask[k][k'] = 1` iff
/// `k' ∈ N(k)`, `labels_mask` additionally zeroes the self loop, and
/// `inv_degree[k] = 1/|N(k)|`.
fn neighbourhood(adj: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = adj.shape()[0];
    let mut mask = Tensor::zeros(&[n, n]);
    let mut labels = Tensor::zeros(&[n, n]);
    let mut inv_deg = Vec::with_capacity(n);
    for k in 0..n {
        let mut deg = 0usize;
        for kp in 0..n {
            if kp == k || adj.at(kp, k) > 0.0 {
                mask.set(k, kp, 1.0);
                deg += 1;
                if kp != k {
                    labels.set(k, kp, 1.0);
                }
            }
        }
        inv_deg.push(1.0 / deg as f64);
    }
    (labels, mask, Tensor::matrix(n, 1, inv_deg).unwrap())
}

/// One edge-conditioned convolution over the graph whose weighted adjacency is `adj`.
///
/// `adj` may itself carry gradient (edge labels are differentiable); the
/// neighbourhood structure is read from its current value.
pub fn ecc_forward(
    g: &mut Graph,
    layer: &EccLayer,
    vars: &EccVars,
    adj: Var,
    features: Var,
) -> Result<Var> {
    let (n, n2) = g.value(adj).dims2()?;
    let (rows, d_in) = g.value(features).dims2()?;
    if n != n2 || rows != n || d_in != layer.d_in {
        return Err(Error::Dimension(format!(
            "ECC layer {}→{} given adjacency {:?} and features {:?}",
            layer.d_in,
            layer.d_out,
            g.value(adj).shape(),
            g.value(features).shape()
        )));
    }
    let d_out = layer.d_out;
    let (labels_mask, mask, inv_deg) = neighbourhood(g.value(adj));

    // labels[k][k'] = L(k', k) on neighbour pairs
    let adj_t = g.transpose(adj)?;
    let labels_mask = g.constant(labels_mask);
    let labels = g.mul(adj_t, labels_mask)?;
    let mask = g.constant(mask);

    let a = g.reshape(vars.filter_weight, &[d_out, d_in])?;
    let a_t = g.transpose(a)?;
    let b = g.reshape(vars.filter_bias, &[d_out, d_in])?;
    let b_t = g.transpose(b)?;

    let weighted = g.matmul(labels, features)?;
    let weighted = g.matmul(weighted, a_t)?;
    let plain = g.matmul(mask, features)?;
    let plain = g.matmul(plain, b_t)?;
    let agg = g.add(weighted, plain)?;

    let inv_deg = g.constant(inv_deg);
    let inv_deg = g.repeat_cols(inv_deg, d_out)?;
    let agg = g.mul(agg, inv_deg)?;
    let bias = g.repeat_rows(vars.bias, n)?;
    g.add(agg, bias)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graphcore::symmetrize_clamp;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-edge evaluation straight from the defining sum, used as an oracle.
    pub(crate) fn ecc_reference(layer: &EccLayer, adj: &Tensor, y: &Tensor) -> Tensor {
        let n = adj.shape()[0];
        let (d_in, d_out) = (layer.d_in, layer.d_out);
        let mut out = Tensor::zeros(&[n, d_out]);
        for k in 0..n {
            let nbrs: Vec<usize> = (0..n)
                .filter(|&kp| kp == k || adj.at(kp, k) > 0.0)
                .collect();
            for o in 0..d_out {
                let mut acc = 0.0;
                for &kp in &nbrs {
                    let label = if kp == k { 0.0 } else { adj.at(kp, k) };
                    for i in 0..d_in {
                        let idx = o * d_in + i;
                        let theta =
                            label * layer.filter_weight.data()[idx] + layer.filter_bias.data()[idx];
                        acc += theta * y.at(kp, i);
                    }
                }
                out.set(k, o, acc / nbrs.len() as f64 + layer.bias.data()[o]);
            }
        }
        out
    }

    fn run(layer: &EccLayer, adj: &Tensor, y: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let v: Vec<Var> = layer
            .params()
            .iter()
            .map(|p| g.constant((*p).clone()))
            .collect();
        let vars = EccVars::from_slice(&v);
        let a = g.constant(adj.clone());
        let f = g.constant(y.clone());
        let out = ecc_forward(&mut g, layer, &vars, a, f).unwrap();
        g.value(out).clone()
    }

    /// Layer whose filter network emits the identity for every label.
    fn identity_filter(d: usize) -> EccLayer {
        let mut layer = EccLayer::zeroed(d, d);
        for i in 0..d {
            layer.filter_bias.data_mut()[i * d + i] = 1.0;
        }
        layer
    }

    #[test]
    fn identity_filter_averages_neighbourhood() {
        let adj = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let y = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(run(&identity_filter(1), &adj, &y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_filter_emits_bias() {
        let mut layer = EccLayer::zeroed(2, 1);
        layer.bias.data_mut()[0] = 0.7;
        let adj = Tensor::from_rows(&[
            vec![0.0, 0.4, 0.0],
            vec![0.4, 0.0, 0.9],
            vec![0.0, 0.9, 0.0],
        ])
        .unwrap();
        let y = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.0, 0.5, 8.0, 1.0]).unwrap();
        assert_eq!(run(&layer, &adj, &y).data(), &[0.7; 3]);
    }

    #[test]
    fn isolated_nodes_keep_their_features() {
        let adj = Tensor::zeros(&[3, 3]);
        let y = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(run(&identity_filter(2), &adj, &y), y);
    }

    #[test]
    fn rejects_mismatched_features() {
        let layer = EccLayer::zeroed(3, 2);
        let mut g = Graph::new();
        let v: Vec<Var> = layer
            .params()
            .iter()
            .map(|p| g.constant((*p).clone()))
            .collect();
        let a = g.constant(Tensor::zeros(&[4, 4]));
        let f = g.constant(Tensor::zeros(&[4, 2]));
        let err = ecc_forward(&mut g, &layer, &EccVars::from_slice(&v), a, f);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    fn random_case(seed: u64, n: usize, d_in: usize, d_out: usize) -> (EccLayer, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = EccLayer::new(d_in, d_out, &mut rng);
        // roughly a third of the edges absent
        let raw: Vec<f64> = (0..n * n)
            .map(|_| rng.gen_range(-0.5..1.0f64).max(0.0))
            .collect();
        let adj = symmetrize_clamp(&Tensor::matrix(n, n, raw).unwrap())
            .unwrap()
            .to_tensor();
        let y = Tensor::matrix(
            n,
            d_in,
            (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (layer, adj, y)
    }

    #[test]
    fn matches_per_edge_reference() {
        for seed in 0..5 {
            let (layer, adj, y) = random_case(seed, 6, 4, 3);
            let fast = run(&layer, &adj, &y);
            let slow = ecc_reference(&layer, &adj, &y);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn permutation_equivariant(
            seed in 0u64..1000,
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (layer, adj, y) = random_case(seed, 5, 3, 2);
            let out = run(&layer, &adj, &y);

            let mut padj = Tensor::zeros(&[5, 5]);
            let mut py = Tensor::zeros(&[5, 3]);
            for i in 0..5 {
                for j in 0..5 {
                    padj.set(i, j, adj.at(perm[i], perm[j]));
                }
                for f in 0..3 {
                    py.set(i, f, y.at(perm[i], f));
                }
            }
            let pout = run(&layer, &padj, &py);
            for i in 0..5 {
                for f in 0..2 {
                    prop_assert!((pout.at(i, f) - out.at(perm[i], f)).abs() < 1e-12);
                }
            }
        }
    }
}
