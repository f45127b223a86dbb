//! Finite-difference verification of recorded gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest magnitude used when turning an absolute error into a relative one.
///
/// Gradient entries far below this are compared on an absolute scale, which
/// keeps round-off in the central difference from dominating near-zero slopes.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// False when two evaluations at the same point disagreed.
    pub deterministic: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.deterministic && self.max_rel_error() < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract(
            "gradcheck function must return a scalar".into(),
        ));
    }
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` records its computation on the supplied graph, reading parameters from
/// the given leaf handles (one per entry of `params`, in order).
pub fn gradcheck<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar(out);
    if g.requires_grad(out) {
        g.backward(out)?;
    }
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let again = evaluate(&f, params)?;
    let deterministic = again.to_bits() == base.to_bits();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index,
            shape: params[index].shape().to_vec(),
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for k in 0..params[index].len() {
            let orig = params[index].data()[k];
            work[index].data_mut()[k] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[index].data_mut()[k] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[index].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        checks.push(check);
    }

    Ok(GradcheckReport {
        params: checks,
        tol,
        deterministic,
    })
}
