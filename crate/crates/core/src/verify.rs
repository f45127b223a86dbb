//! Finite-difference verification of every trainable component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffengine::{gradcheck, GradcheckReport, Tensor, Var};
use crate::error::Result;
use crate::gnn::{
    ecc_forward, Discriminator, DiscriminatorVars, EccLayer, EccVars, Generator, GeneratorVars,
    GnnConfig, Mode,
};
use crate::graphcore::{symmetrize_clamp, ConnectivityMatrix, SIGMA_FLOOR};
use crate::losses::{
    adversarial_loss_d_var, adversarial_loss_g_var, kl_loss_var, l1_loss_var, topology_loss_var,
    LossWeights,
};

/// Tolerance for components that are linear in their parameters.
pub const LINEAR_TOL: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_H: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub tol: f64,
    pub deterministic: bool,
    pub passed: bool,
}

impl ComponentCheck {
    fn from_report(component: &'static str, r: &GradcheckReport) -> Self {
        Self {
            component,
            max_rel_error: r.max_rel_error(),
            tol: r.tol,
            deterministic: r.deterministic,
            passed: r.passed(),
        }
    }
}

fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> ConnectivityMatrix {
    let raw = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen()).collect()).unwrap();
    symmetrize_clamp(&raw).unwrap()
}

/// A target at least `gap` away from every off-diagonal entry of `x`, so
/// `|x - target|` stays differentiable under perturbations smaller than `gap`.
fn shifted(x: &ConnectivityMatrix, gap: f64, rng: &mut ChaCha8Rng) -> ConnectivityMatrix {
    let n = x.n_rois();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let a = x.get(i, j);
            let d = gap + rng.gen::<f64>() * 0.2;
            let v = if a + d <= 1.0 { a + d } else { a - d };
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    ConnectivityMatrix::new(n, w).unwrap()
}

/// Runs every check at step `h`. `tol` overrides the per-component tolerances.
pub fn gradcheck_suite(seed: u64, h: f64, tol: Option<f64>) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |default: f64| tol.unwrap_or(default);
    let n = 5;
    let cfg = GnnConfig {
        n_rois: n,
        hidden: 4,
        disc_hidden: 3,
        ..GnnConfig::default()
    };
    let x = random_graph(n, &mut rng);
    let y = random_graph(n, &mut rng);
    let far = shifted(&x, 0.05, &mut rng);
    let mut out = Vec::new();

    // the readout weights make the scalar objective linear in the layer output
    let layer = EccLayer::new(n, 3, &mut rng);
    let readout = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let ecc_params: Vec<Tensor> = layer.params().into_iter().cloned().collect();
    let r = gradcheck(
        |g, p| {
            let vars = EccVars::from_slice(p);
            let adj = g.constant(x.to_tensor());
            let h = ecc_forward(g, &layer, &vars, adj, adj)?;
            let w = g.constant(readout.clone());
            let prod = g.mul(h, w)?;
            Ok(g.sum(prod))
        },
        &ecc_params,
        h,
        pick(LINEAR_TOL),
    )?;
    out.push(ComponentCheck::from_report("ecc_layer", &r));

    let gen = Generator::new(cfg.clone(), &mut rng);
    let gen_params: Vec<Tensor> = gen.params().into_iter().cloned().collect();
    let r = gradcheck(
        |g, p| {
            let vars = GeneratorVars::from_slice(p);
            let input = g.constant(x.to_tensor());
            let o = gen.forward(g, &vars, input, Mode::Train { dropout: None })?;
            let t = g.constant(y.to_tensor());
            let d = g.sub(o.graph, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        },
        &gen_params,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("generator", &r));

    let disc = Discriminator::new(cfg.clone(), &mut rng);
    let disc_params: Vec<Tensor> = disc.params().into_iter().cloned().collect();
    let r = gradcheck(
        |g, p| {
            let vars = DiscriminatorVars::from_slice(p);
            let c = g.constant(x.to_tensor());
            let j = g.constant(y.to_tensor());
            disc.forward(g, &vars, c, j)
        },
        &disc_params,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("discriminator", &r));

    let scores = [Tensor::scalar(0.73), Tensor::scalar(0.41)];
    let r = gradcheck(
        |g, v| adversarial_loss_d_var(g, v[0], v[1]),
        &scores,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("adversarial_d", &r));
    let r = gradcheck(
        |g, v| adversarial_loss_g_var(g, v[1]),
        &scores,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("adversarial_g", &r));

    let pred = [x.to_tensor()];
    let far_t = far.to_tensor();
    let r = gradcheck(
        |g, v| {
            let t = g.constant(far_t.clone());
            l1_loss_var(g, v[0], t)
        },
        &pred,
        h,
        pick(LINEAR_TOL),
    )?;
    out.push(ComponentCheck::from_report("l1", &r));

    let r = gradcheck(
        |g, v| kl_loss_var(g, v[0], &y, SIGMA_FLOOR),
        &pred,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("kl", &r));

    let y_t = y.to_tensor();
    let r = gradcheck(
        |g, v| {
            let t = g.constant(y_t.clone());
            topology_loss_var(g, v[0], t)
        },
        &pred,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("topology", &r));

    // one stage of the full objective for two subjects, differentiated with
    // respect to the predicted graphs
    let w = LossWeights::default();
    let second = random_graph(n, &mut rng);
    let targets = [far.clone(), shifted(&second, 0.05, &mut rng)];
    let preds = [x.to_tensor(), second.to_tensor()];
    let r = gradcheck(
        |g, v| {
            let dvars = disc.bind(g, false);
            let mut total: Option<Var> = None;
            for (p, t) in v.iter().zip(&targets) {
                let tv = g.constant(t.to_tensor());
                let score = disc.forward(g, &dvars, tv, *p)?;
                let adv = adversarial_loss_g_var(g, score)?;
                let l1 = l1_loss_var(g, *p, tv)?;
                let kl = kl_loss_var(g, *p, t, SIGMA_FLOOR)?;
                let a = g.scalar_mul(adv, w.lambda1);
                let b = g.scalar_mul(l1, w.lambda2);
                let c = g.scalar_mul(kl, w.lambda3);
                let ab = g.add(a, b)?;
                let s = g.add(ab, c)?;
                let s = g.scalar_mul(s, 0.5);
                total = Some(match total {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            Ok(total.unwrap())
        },
        &preds,
        h,
        pick(DEFAULT_TOL),
    )?;
    out.push(ComponentCheck::from_report("full_loss", &r));
    Ok(out)
}
