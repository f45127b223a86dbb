//! Connectivity matrices, longitudinal samples and per-node edge statistics.

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Regions per hemisphere in the Desikan-Killiany parcellation.
pub const DEFAULT_ROIS: usize = 35;

/// Lower bound applied to every per-node standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Weighted undirected brain graph: symmetric, zero diagonal, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ConnectivityMatrix {
    n: usize,
    weights: Vec<f64>,
}

impl ConnectivityMatrix {
    /// Validates `weights` (row-major `n×n`) exactly against the matrix invariants.
    pub fn new(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n || n == 0 {
            return Err(Error::Dimension(format!(
                "{} weights do not form a square {n}×{n} matrix",
                weights.len()
            )));
        }
        let m = Self { n, weights };
        if let Some((i, j, why)) = m.first_violation(0.0) {
            return Err(Error::Data(format!("entry ({i}, {j}) {why}")));
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(
                "connectivity rows must form a square matrix".into(),
            ));
        }
        Self::new(n, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::Dimension(format!("non-square matrix {r}×{c}")));
        }
        Self::new(r, t.data().to_vec())
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
        }
    }

    /// First entry breaking an invariant, allowing `tol` slack on symmetry.
    pub fn first_violation(&self, tol: f64) -> Option<(usize, usize, String)> {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let w = self.weights[i * n + j];
                if !w.is_finite() {
                    return Some((i, j, format!("is not finite ({w})")));
                }
                if !(0.0..=1.0).contains(&w) {
                    return Some((i, j, format!("= {w} lies outside [0, 1]")));
                }
                if i == j && w != 0.0 {
                    return Some((i, j, format!("= {w} on the diagonal (must be 0)")));
                }
                if (w - self.weights[j * n + i]).abs() > tol {
                    return Some((i, j, format!("= {w} breaks symmetry")));
                }
            }
        }
        None
    }

    pub fn n_rois(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.n, self.weights.clone()).expect("square by construction")
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = self.weights[perm[i] * n + perm[j]];
            }
        }
        Self { n, weights: w }
    }
}

impl TryFrom<Vec<Vec<f64>>> for ConnectivityMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ConnectivityMatrix> for Vec<Vec<f64>> {
    fn from(m: ConnectivityMatrix) -> Self {
        m.to_rows()
    }
}

/// One subject's graphs at timepoints `t_0 … t_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    pub subject_id: String,
    graphs: Vec<ConnectivityMatrix>,
}

impl LongitudinalSample {
    pub fn new(subject_id: impl Into<String>, graphs: Vec<ConnectivityMatrix>) -> Result<Self> {
        let subject_id = subject_id.into();
        if graphs.len() < 2 {
            return Err(Error::Data(format!(
                "subject {subject_id} has {} timepoints (need at least 2)",
                graphs.len()
            )));
        }
        let n = graphs[0].n_rois();
        if graphs.iter().any(|g| g.n_rois() != n) {
            return Err(Error::Data(format!(
                "subject {subject_id} mixes graphs of different sizes"
            )));
        }
        Ok(Self { subject_id, graphs })
    }

    pub fn graphs(&self) -> &[ConnectivityMatrix] {
        &self.graphs
    }

    pub fn timepoints(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_rois(&self) -> usize {
        self.graphs[0].n_rois()
    }

    pub fn baseline(&self) -> &ConnectivityMatrix {
        &self.graphs[0]
    }
}

/// Per-node Gaussian fit of the edge weights incident to each node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeightDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Mean and population standard deviation of each row's off-diagonal entries.
pub fn node_weight_stats(
    g: &ConnectivityMatrix,
    sigma_floor: f64,
) -> Result<NodeWeightDistribution> {
    let n = g.n_rois();
    if n < 2 {
        return Err(Error::DegenerateGraph(n));
    }
    let denom = (n - 1) as f64;
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for k in 0..n {
        let off = || {
            g.row(k)
                .iter()
                .enumerate()
                .filter(move |&(j, _)| j != k)
                .map(|(_, &w)| w)
        };
        let m = off().sum::<f64>() / denom;
        let var = off().map(|w| (w - m) * (w - m)).sum::<f64>() / denom;
        mu.push(m);
        sigma.push(var.sqrt().max(sigma_floor));
    }
    Ok(NodeWeightDistribution { mu, sigma })
}

/// Recorded counterpart of [`node_weight_stats`]; returns `(mu, sigma)` as `n×1` columns.
pub fn node_weight_stats_var(g: &mut Graph, x: Var, sigma_floor: f64) -> Result<(Var, Var)> {
    let (n, c) = g.value(x).dims2()?;
    if n != c {
        return Err(Error::Dimension(format!("non-square matrix {n}×{c}")));
    }
    if n < 2 {
        return Err(Error::DegenerateGraph(n));
    }
    let inv = 1.0 / (n - 1) as f64;
    let mask = g.constant(off_diagonal_mask(n));
    let xm = g.mul(x, mask)?;
    let rows = g.sum_axis(xm, 1)?;
    let mu = g.scalar_mul(rows, inv);
    let mu_wide = g.repeat_cols(mu, n)?;
    let dev = g.sub(x, mu_wide)?;
    let dev = g.mul(dev, mask)?;
    let sq = g.mul(dev, dev)?;
    let ss = g.sum_axis(sq, 1)?;
    let var = g.scalar_mul(ss, inv);
    let var = g.clamp(var, sigma_floor * sigma_floor, f64::INFINITY);
    let sd = g.sqrt(var)?;
    let sigma = g.clamp(sd, sigma_floor, f64::INFINITY);
    Ok((mu, sigma))
}

/// Sum of each node's incident edge weights (row sums).
pub fn node_strength(g: &ConnectivityMatrix) -> Vec<f64> {
    (0..g.n_rois()).map(|k| g.row(k).iter().sum()).collect()
}

/// Recorded counterpart of [`node_strength`]; returns an `n×1` column.
pub fn node_strength_var(g: &mut Graph, x: Var) -> Result<Var> {
    g.sum_axis(x, 1)
}

/// Maps an arbitrary square matrix onto the connectivity invariants:
/// average with its transpose, clamp into `[0, 1]`, zero the diagonal.
pub fn symmetrize_clamp(raw: &Tensor) -> Result<ConnectivityMatrix> {
    let (n, c) = raw.dims2()?;
    if n != c {
        return Err(Error::Dimension(format!(
            "symmetrize_clamp of non-square {n}×{c}"
        )));
    }
    let d = raw.data();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i * n + j] = ((d[i * n + j] + d[j * n + i]) * 0.5).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ConnectivityMatrix { n, weights: w })
}

/// Recorded counterpart of [`symmetrize_clamp`], bitwise identical in value.
pub fn symmetrize_clamp_var(g: &mut Graph, raw: Var) -> Result<Var> {
    let (n, c) = g.value(raw).dims2()?;
    if n != c {
        return Err(Error::Dimension(format!(
            "symmetrize_clamp of non-square {n}×{c}"
        )));
    }
    let t = g.transpose(raw)?;
    let s = g.add(raw, t)?;
    let s = g.scalar_mul(s, 0.5);
    let s = g.clamp(s, 0.0, 1.0);
    let mask = g.constant(off_diagonal_mask(n));
    g.mul(s, mask)
}

pub(crate) fn off_diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::filled(&[n, n], 1.0);
    for i in 0..n {
        m.set(i, i, 0.0);
    }
    m
}
