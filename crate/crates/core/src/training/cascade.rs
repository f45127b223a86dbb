use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kfold_split, AdamW, FoldSplit, TrainConfig};
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, map_indexed_mut};
use crate::gnn::{
    BatchStats, Checkpoint, Discriminator, Generator, GeneratorVars, GnnConfig, Mode,
};
use crate::graphcore::{ConnectivityMatrix, LongitudinalSample};
use crate::losses::{
    adversarial_loss_d_var, adversarial_loss_g_var, kl_loss_var, l1_loss_var, topology_loss_var,
    Variant,
};

/// The chain `G_1 … G_m` with one discriminator per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub generators: Vec<Generator>,
    pub discriminators: Vec<Discriminator>,
}

impl Cascade {
    /// Initialises `G_1, D_1, G_2, D_2, …` in that order from `rng`.
    pub fn new(config: &GnnConfig, m: usize, rng: &mut impl Rng) -> Self {
        let mut generators = Vec::with_capacity(m);
        let mut discriminators = Vec::with_capacity(m);
        for _ in 0..m {
            generators.push(Generator::new(config.clone(), rng));
            discriminators.push(Discriminator::new(config.clone(), rng));
        }
        Self {
            generators,
            discriminators,
        }
    }

    pub fn stages(&self) -> usize {
        self.generators.len()
    }

    pub fn n_rois(&self) -> usize {
        self.generators[0].n_rois()
    }

    /// Eval-mode predictions for `t_1 … t_m` starting from `baseline`.
    pub fn rollout(&self, baseline: &ConnectivityMatrix) -> Result<Vec<ConnectivityMatrix>> {
        let mut out = Vec::with_capacity(self.stages());
        let mut x = baseline.clone();
        for gen in &self.generators {
            x = gen.predict(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn to_checkpoints(&self, config_hash: &str) -> Vec<Checkpoint> {
        self.generators
            .iter()
            .zip(&self.discriminators)
            .enumerate()
            .map(|(i, (g, d))| Checkpoint::new(i + 1, config_hash, g.clone(), d.clone()))
            .collect()
    }

    /// Reassembles a cascade from per-stage checkpoints in any order.
    pub fn from_checkpoints(mut ckpts: Vec<Checkpoint>) -> Result<Self> {
        if ckpts.is_empty() {
            return Err(Error::Data("no checkpoints".into()));
        }
        ckpts.sort_by_key(|c| c.stage);
        for (i, c) in ckpts.iter().enumerate() {
            if c.stage != i + 1 {
                return Err(Error::Data(format!(
                    "missing checkpoint for stage {}",
                    i + 1
                )));
            }
            if c.generator.config != ckpts[0].generator.config {
                return Err(Error::Data(format!(
                    "stage {} has a different architecture",
                    c.stage
                )));
            }
        }
        let (generators, discriminators) = ckpts
            .into_iter()
            .map(|c| (c.generator, c.discriminator))
            .unzip();
        Ok(Self {
            generators,
            discriminators,
        })
    }
}

/// Subject-averaged losses for one stage at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_kl_or_topo: f64,
    /// This stage's contribution to the full generator objective.
    pub g_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub const CSV_HEADER: &'static str = "epoch,stage,d_loss,g_adv,g_l1,g_kl_or_topo,g_total";

    pub fn epochs(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.epoch == epoch)
    }

    /// Stage-averaged generator l1 term at `epoch`.
    pub fn mean_l1(&self, epoch: usize) -> f64 {
        let (sum, n) = self
            .epoch(epoch)
            .fold((0.0, 0usize), |(s, n), r| (s + r.g_l1, n + 1));
        sum / n as f64
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| {
            [r.d_loss, r.g_adv, r.g_l1, r.g_kl_or_topo, r.g_total]
                .iter()
                .all(|v| v.is_finite())
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.stage, r.d_loss, r.g_adv, r.g_l1, r.g_kl_or_topo, r.g_total
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub cascade: Cascade,
    pub history: LossHistory,
    pub config_hash: String,
    pub disc_updates: usize,
    pub gen_updates: usize,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub outcome: TrainOutcome,
}

/// Trains a fresh cascade on `samples` with parameters drawn from `cfg.seed`.
pub fn train_cascade(samples: &[LongitudinalSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(samples, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cascade = Cascade::new(&cfg.gnn, cfg.m, &mut rng);
    let mut trainer = Trainer::new(cascade, cfg);
    for epoch in 1..=cfg.epochs {
        trainer.epoch(samples, epoch)?;
        if epoch == 1 || epoch % 50 == 0 || epoch == cfg.epochs {
            debug!(
                "epoch {epoch}: mean l1 {:.4}",
                trainer.history.mean_l1(epoch)
            );
        }
    }
    Ok(TrainOutcome {
        cascade: trainer.cascade,
        history: trainer.history,
        config_hash: cfg.config_hash(),
        disc_updates: trainer.disc_updates,
        gen_updates: trainer.gen_updates,
    })
}

/// k-fold cross-validation; fold `k` trains with seed `cfg.seed + k`.
pub fn cross_validate(
    samples: &[LongitudinalSample],
    cfg: &TrainConfig,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let splits = kfold_split(samples.len(), cfg.folds, cfg.seed)?;
    map_indexed(cfg.execution, &splits, |_, split| {
        let train: Vec<LongitudinalSample> =
            split.train.iter().map(|&i| samples[i].clone()).collect();
        let outcome = train_cascade(&train, &cfg.for_fold(split.fold))?;
        Ok(FoldOutcome {
            split: split.clone(),
            outcome,
        })
    })
    .into_iter()
    .collect()
}

fn check_samples(samples: &[LongitudinalSample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no training subjects".into()));
    }
    for s in samples {
        if s.timepoints() < cfg.m + 1 {
            return Err(Error::Data(format!(
                "subject {} has {} timepoints, training needs {}",
                s.subject_id,
                s.timepoints(),
                cfg.m + 1
            )));
        }
        if s.n_rois() != cfg.gnn.n_rois {
            return Err(Error::Data(format!(
                "subject {} has {} ROIs, the network expects {}",
                s.subject_id,
                s.n_rois(),
                cfg.gnn.n_rois
            )));
        }
    }
    Ok(())
}

/// One subject's recorded generator chain.
struct SubjectTape {
    g: Graph,
    gvars: Vec<GeneratorVars>,
    /// Ground truth at `t_1 … t_m`.
    targets: Vec<Var>,
    outputs: Vec<Var>,
    stats: Vec<Vec<BatchStats>>,
}

struct DiscPass {
    grads: Vec<Vec<Tensor>>,
    losses: Vec<f64>,
    /// Gradients that leak into the generators; inspected by tests only.
    #[cfg_attr(not(test), allow(dead_code))]
    generator_grads: Vec<Vec<Tensor>>,
}

struct GenPass {
    grads: Vec<Vec<Tensor>>,
    /// `(adv, l1, reg)` per stage.
    terms: Vec<[f64; 3]>,
    #[cfg_attr(not(test), allow(dead_code))]
    discriminator_grads: Vec<Vec<Tensor>>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    cascade: Cascade,
    gen_opt: Vec<AdamW>,
    disc_opt: Vec<AdamW>,
    history: LossHistory,
    disc_updates: usize,
    gen_updates: usize,
    passes: u64,
}

impl<'a> Trainer<'a> {
    fn new(cascade: Cascade, cfg: &'a TrainConfig) -> Self {
        let gen_opt = cascade
            .generators
            .iter()
            .map(|g| AdamW::new(cfg.generator_optim, &g.params()))
            .collect();
        let disc_opt = cascade
            .discriminators
            .iter()
            .map(|d| AdamW::new(cfg.discriminator_optim, &d.params()))
            .collect();
        Self {
            cfg,
            cascade,
            gen_opt,
            disc_opt,
            history: LossHistory::default(),
            disc_updates: 0,
            gen_updates: 0,
            passes: 0,
        }
    }

    /// Records every subject's chain; dropout masks come from a stream keyed
    /// by (pass, subject) so the result does not depend on scheduling.
    fn forward_all(
        &mut self,
        samples: &[LongitudinalSample],
        epoch: usize,
    ) -> Result<Vec<SubjectTape>> {
        self.passes += 1;
        let (cfg, cascade, pass) = (self.cfg, &self.cascade, self.passes);
        map_indexed(cfg.execution, samples, |s, sample| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((pass << 32) | s as u64);
            forward_tape(cascade, sample, cfg.chain_backprop, Some(&mut rng)).map_err(|e| match e {
                Error::NonFinite { what, stage, .. } => Error::NonFinite { what, epoch, stage },
                e => e,
            })
        })
        .into_iter()
        .collect()
    }

    fn epoch(&mut self, samples: &[LongitudinalSample], epoch: usize) -> Result<()> {
        let n_s = samples.len() as f64;
        let m = self.cfg.m;
        let mut tapes = self.forward_all(samples, epoch)?;

        let mut d_losses = vec![0.0; m];
        for _ in 0..self.cfg.d_steps {
            let discs = &self.cascade.discriminators;
            let passes = map_indexed_mut(self.cfg.execution, &mut tapes, |_, tape| {
                discriminator_pass(tape, discs, n_s)
            });
            let passes: Vec<DiscPass> = passes.into_iter().collect::<Result<_>>()?;
            d_losses = mean_over_subjects(passes.iter().map(|p| &p.losses), m);
            if let Some(i) = d_losses.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFinite {
                    what: "discriminator loss",
                    epoch,
                    stage: i + 1,
                });
            }
            let grads = reduce_grads(passes.into_iter().map(|p| p.grads));
            for (i, ((d, opt), grad)) in self
                .cascade
                .discriminators
                .iter_mut()
                .zip(&mut self.disc_opt)
                .zip(&grads)
                .enumerate()
            {
                opt.step(&mut d.params_mut(), grad)?;
                check_finite(d.params(), "discriminator parameters", epoch, i + 1)?;
            }
            self.disc_updates += m;
        }

        let include = vec![true; m];
        let mut means = vec![[0.0; 3]; m];
        for step in 0..self.cfg.g_steps {
            if step > 0 {
                tapes = self.forward_all(samples, epoch)?;
            }
            let (cfg, discs) = (self.cfg, &self.cascade.discriminators);
            let passes = map_indexed_mut(cfg.execution, &mut tapes, |s, tape| {
                generator_pass(tape, discs, &samples[s], cfg, n_s, &include)
            });
            let passes: Vec<GenPass> = passes.into_iter().collect::<Result<_>>()?;
            means = vec![[0.0; 3]; m];
            for p in &passes {
                for (mean, t) in means.iter_mut().zip(&p.terms) {
                    for k in 0..3 {
                        mean[k] += t[k] / n_s;
                    }
                }
            }
            if let Some(i) = means.iter().position(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    what: "generator loss",
                    epoch,
                    stage: i + 1,
                });
            }
            let grads = reduce_grads(passes.into_iter().map(|p| p.grads));
            for (i, ((gen, opt), grad)) in self
                .cascade
                .generators
                .iter_mut()
                .zip(&mut self.gen_opt)
                .zip(&grads)
                .enumerate()
            {
                opt.step(&mut gen.params_mut(), grad)?;
                check_finite(gen.params(), "generator parameters", epoch, i + 1)?;
            }
            for tape in &tapes {
                for (gen, stats) in self.cascade.generators.iter_mut().zip(&tape.stats) {
                    gen.update_running_stats(stats);
                }
            }
            self.gen_updates += 1;
        }

        let w = &self.cfg.loss;
        for (i, &[adv, l1, reg]) in means.iter().enumerate() {
            let mut total = w.lambda1 * adv + w.lambda2 * l1;
            if w.variant != Variant::NoKl {
                total += w.lambda3 * reg;
            }
            self.history.records.push(EpochRecord {
                epoch,
                stage: i + 1,
                d_loss: d_losses[i],
                g_adv: adv,
                g_l1: l1,
                g_kl_or_topo: reg,
                g_total: total,
            });
        }
        Ok(())
    }
}

fn check_finite(
    params: Vec<&Tensor>,
    what: &'static str,
    epoch: usize,
    stage: usize,
) -> Result<()> {
    if params
        .iter()
        .all(|p| p.data().iter().all(|v| v.is_finite()))
    {
        Ok(())
    } else {
        Err(Error::NonFinite { what, epoch, stage })
    }
}

fn forward_tape(
    cascade: &Cascade,
    sample: &LongitudinalSample,
    chain_backprop: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SubjectTape> {
    let mut g = Graph::new();
    let gvars: Vec<GeneratorVars> = cascade
        .generators
        .iter()
        .map(|gen| gen.bind(&mut g, true))
        .collect();
    let targets: Vec<Var> = sample.graphs()[1..=cascade.stages()]
        .iter()
        .map(|x| g.constant(x.to_tensor()))
        .collect();
    let mut x = g.constant(sample.baseline().to_tensor());
    let mut outputs = Vec::with_capacity(cascade.stages());
    let mut stats = Vec::with_capacity(cascade.stages());
    for (i, gen) in cascade.generators.iter().enumerate() {
        let input = if i > 0 && !chain_backprop {
            g.detach(x)
        } else {
            x
        };
        let mode = Mode::Train {
            dropout: rng.as_deref_mut(),
        };
        // overflowing activations surface as domain errors inside the tape;
        // the epoch is filled in by the caller
        let out = gen
            .forward(&mut g, &gvars[i], input, mode)
            .map_err(|e| match e {
                Error::Domain(_) => Error::NonFinite {
                    what: "generator activations",
                    epoch: 0,
                    stage: i + 1,
                },
                e => e,
            })?;
        x = out.graph;
        outputs.push(out.graph);
        stats.push(out.batch_stats);
    }
    Ok(SubjectTape {
        g,
        gvars,
        targets,
        outputs,
        stats,
    })
}

/// `D_i` scores the real pair `(X_{t_i}, X_{t_i})` and the fake pair
/// `(X_{t_i}, detach(X̂_{t_i}))`.
fn discriminator_pass(
    tape: &mut SubjectTape,
    discs: &[Discriminator],
    n_s: f64,
) -> Result<DiscPass> {
    let g = &mut tape.g;
    let dvars: Vec<_> = discs.iter().map(|d| d.bind(g, true)).collect();
    let mut losses = Vec::with_capacity(discs.len());
    let mut total: Option<Var> = None;
    for (i, d) in discs.iter().enumerate() {
        let target = tape.targets[i];
        let fake_in = g.detach(tape.outputs[i]);
        let real = d.forward(g, &dvars[i], target, target)?;
        let fake = d.forward(g, &dvars[i], target, fake_in)?;
        let loss = adversarial_loss_d_var(g, real, fake)?;
        losses.push(g.scalar(loss));
        let scaled = g.scalar_mul(loss, 1.0 / n_s);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    g.backward(total.expect("at least one stage"))?;
    let grads = dvars
        .iter()
        .zip(discs)
        .map(|(v, d)| collect_grads(g, &v.all(), &d.params()))
        .collect();
    let generator_grads = tape.gvars.iter().map(|v| var_grads(g, v)).collect();
    Ok(DiscPass {
        grads,
        losses,
        generator_grads,
    })
}

/// One subject's share of the joint generator objective, scaled by `1/n_s`,
/// with the discriminators frozen.
///
/// `include[i]` selects which stages' loss terms enter the objective.
fn generator_pass(
    tape: &mut SubjectTape,
    discs: &[Discriminator],
    sample: &LongitudinalSample,
    cfg: &TrainConfig,
    n_s: f64,
    include: &[bool],
) -> Result<GenPass> {
    let g = &mut tape.g;
    let w = &cfg.loss;
    let dvars: Vec<_> = discs.iter().map(|d| d.bind(g, false)).collect();
    let mut terms = Vec::with_capacity(discs.len());
    let mut total: Option<Var> = None;
    for (i, d) in discs.iter().enumerate() {
        let (pred, target) = (tape.outputs[i], tape.targets[i]);
        let score = d.forward(g, &dvars[i], target, pred)?;
        let adv = adversarial_loss_g_var(g, score)?;
        let l1 = l1_loss_var(g, pred, target)?;
        let reg = match w.variant {
            Variant::Full => Some(kl_loss_var(
                g,
                pred,
                &sample.graphs()[i + 1],
                cfg.sigma_floor,
            )?),
            Variant::NoKlPlusTopology => Some(topology_loss_var(g, pred, target)?),
            Variant::NoKl => None,
        };
        terms.push([
            g.scalar(adv),
            g.scalar(l1),
            reg.map_or(0.0, |r| g.scalar(r)),
        ]);
        if !include[i] {
            continue;
        }

        let a = g.scalar_mul(adv, w.lambda1);
        let b = g.scalar_mul(l1, w.lambda2);
        let mut obj = g.add(a, b)?;
        if let Some(r) = reg {
            let c = g.scalar_mul(r, w.lambda3);
            obj = g.add(obj, c)?;
        }
        let scaled = g.scalar_mul(obj, 1.0 / n_s);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no stage selected".into()))?;
    g.backward(total)?;
    let grads = tape.gvars.iter().map(|v| var_grads(g, v)).collect();
    let discriminator_grads = dvars
        .iter()
        .zip(discs)
        .map(|(v, d)| collect_grads(g, &v.all(), &d.params()))
        .collect();
    Ok(GenPass {
        grads,
        terms,
        discriminator_grads,
    })
}

fn var_grads(g: &Graph, vars: &GeneratorVars) -> Vec<Tensor> {
    let vars = vars.all();
    let values: Vec<&Tensor> = vars.iter().map(|&x| g.value(x)).collect();
    collect_grads(g, &vars, &values)
}

/// Gradient of each var, or zeros shaped like the matching parameter.
fn collect_grads(g: &Graph, vars: &[Var], params: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Sums per-subject gradients in subject order.
fn reduce_grads(per_subject: impl Iterator<Item = Vec<Vec<Tensor>>>) -> Vec<Vec<Tensor>> {
    let mut acc: Option<Vec<Vec<Tensor>>> = None;
    for grads in per_subject {
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => {
                for (a_net, g_net) in acc.iter_mut().zip(grads) {
                    for (a, g) in a_net.iter_mut().zip(g_net) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    acc.unwrap_or_default()
}

fn mean_over_subjects<'v>(per_subject: impl Iterator<Item = &'v Vec<f64>>, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    let mut n = 0usize;
    for vals in per_subject {
        for (o, v) in out.iter_mut().zip(vals) {
            *o += v;
        }
        n += 1;
    }
    out.iter().map(|v| v / n as f64).collect()
}
