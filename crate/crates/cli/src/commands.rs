use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evograph_core::data::{
    generate_synthetic, load_dataset_from, read_matrix_csv, save_dataset, write_matrix_csv,
    DatasetManifest, SyntheticConfig,
};
use evograph_core::eval::{emit_report, evaluate_fold, EvalReport, FoldMae, ReportFormat};
use evograph_core::gnn::{Checkpoint, GnnConfig};
use evograph_core::graphcore::LongitudinalSample;
use evograph_core::losses::LossWeights;
use evograph_core::training::{cross_validate, Cascade, TrainConfig};
use evograph_core::verify::gradcheck_suite;
use evograph_core::{Error, Execution};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{EvaluateArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs};
use crate::layout::{
    fold_dir, manifest_path, report_file, stage_file, RunConfig, SplitFile, HISTORY_FILE,
    SPLIT_FILE,
};
use crate::Failure;

pub fn gen_data(args: &GenDataArgs, out_root: &Path) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| out_root.join("data"));
    let cfg = SyntheticConfig {
        n_subjects: args.subjects,
        n_rois: args.rois,
        timepoints: args.timepoints,
        drift_scale: args.drift,
        noise_scale: args.noise,
        sparsity: args.sparsity,
        seed: args.seed,
    };
    cfg.validate()?;
    let mut run = RunConfig::new("gen-data", &out);
    run.synthetic = Some(cfg.clone());
    run.write()?;
    let samples = generate_synthetic(&cfg)?;
    let manifest = save_dataset(&out, &samples)?;
    info!(
        "{} subjects × {} timepoints of {}×{} graphs",
        manifest.subjects.len(),
        manifest.timepoints,
        manifest.n_rois,
        manifest.n_rois
    );
    println!("{}", manifest_path(&out).display());
    Ok(())
}

fn train_config(args: &TrainArgs, n_rois: usize, m: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: args.epochs,
        m,
        seed: args.seed,
        folds: args.folds,
        sigma_floor: args.sigma_floor,
        chain_backprop: args.chain_backprop,
        gnn: GnnConfig {
            n_rois,
            hidden: args.hidden.unwrap_or(n_rois),
            disc_hidden: args.disc_hidden.unwrap_or(n_rois),
            dropout: args.dropout,
            norm_inference: args.norm_inference.into(),
            ..GnnConfig::default()
        },
        loss: LossWeights {
            lambda1: args.lambda1,
            lambda2: args.lambda2,
            lambda3: args.lambda3,
            ..LossWeights::default()
        },
        execution: if args.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        ..TrainConfig::default()
    };
    cfg.generator_optim.lr = args.lr_g;
    cfg.generator_optim.weight_decay = args.weight_decay;
    cfg.discriminator_optim.lr = args.lr_d;
    cfg.discriminator_optim.weight_decay = args.weight_decay;
    cfg
}

pub fn train(args: &TrainArgs, out_root: &Path) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| out_root.join("run"));
    let manifest = manifest_path(&args.data);
    let header = DatasetManifest::load(&manifest)?;
    let m = args.m.unwrap_or(header.timepoints.saturating_sub(1));
    let base = train_config(args, header.n_rois, m);
    base.validate()?;
    let variants = unique(&args.variant);
    if variants.is_empty() {
        return Err(Failure::Usage("no variant given".into()).into());
    }

    let mut run = RunConfig::new("train", &out);
    run.train = Some(base.clone());
    run.variants = variants.clone();
    run.data = Some(manifest.clone());
    run.write()?;

    let samples = load_dataset_from(&manifest)?;
    for &variant in &variants {
        let cfg = TrainConfig {
            loss: LossWeights {
                variant,
                ..base.loss
            },
            ..base.clone()
        };
        info!(
            "training {variant}: {} folds × {} epochs",
            cfg.folds, cfg.epochs
        );
        let folds = cross_validate(&samples, &cfg)?;
        for f in folds {
            let dir = fold_dir(&out, variant, f.split.fold);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let ids = |idx: &[usize]| -> Vec<String> {
                idx.iter().map(|&i| samples[i].subject_id.clone()).collect()
            };
            let split = SplitFile {
                fold: f.split.fold,
                train: ids(&f.split.train),
                test: ids(&f.split.test),
            };
            write_json(&dir.join(SPLIT_FILE), &split)?;
            f.outcome.history.write_csv(&dir.join(HISTORY_FILE))?;
            for ckpt in f.outcome.cascade.to_checkpoints(&f.outcome.config_hash) {
                ckpt.save(&stage_file(&dir, ckpt.stage))?;
            }
            let last = f.outcome.history.epochs();
            info!(
                "{variant} fold {}: final mean l1 {:.4}",
                f.split.fold,
                f.outcome.history.mean_l1(last)
            );
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn unique<T: PartialEq + Copy>(items: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(items.len());
    for &x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn load_cascade(dir: &Path, m: usize, label: &str) -> Result<Cascade> {
    let mut ckpts = Vec::with_capacity(m);
    for stage in 1..=m {
        let path = stage_file(dir, stage);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{label}: missing checkpoint for stage {stage} ({})",
                path.display()
            ))
            .into());
        }
        ckpts.push(Checkpoint::load(&path)?);
    }
    Ok(Cascade::from_checkpoints(ckpts)?)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let trained = RunConfig::load(&args.run.join(RunConfig::file_name("train")))?;
    let Some(train) = trained.train.clone() else {
        bail!(Error::Data(format!(
            "{}: no training config",
            args.run.display()
        )));
    };
    let data = match (&args.data, &trained.data) {
        (Some(d), _) => manifest_path(d),
        (None, Some(d)) => d.clone(),
        (None, None) => return Err(Failure::Usage("--data is required".into()).into()),
    };
    let variants = if args.variant.is_empty() {
        trained.variants.clone()
    } else {
        unique(&args.variant)
    };
    let formats = unique(&args.format);

    let mut run = RunConfig::new("evaluate", &out);
    run.train = Some(train.clone());
    run.variants = variants.clone();
    run.data = Some(data.clone());
    run.run = Some(args.run.clone());
    run.formats = formats.clone();
    run.untrained = args.untrained;
    run.write()?;

    let samples = load_dataset_from(&data)?;
    let by_id: HashMap<&str, &LongitudinalSample> =
        samples.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let mut rows = Vec::new();
    for &variant in &variants {
        for fold in 0..train.folds {
            let dir = fold_dir(&args.run, variant, fold);
            let label = format!("{variant} fold {fold}");
            let split_path = dir.join(SPLIT_FILE);
            let text = fs::read_to_string(&split_path).map_err(|e| {
                Error::Data(format!(
                    "{label}: cannot read {}: {e}",
                    split_path.display()
                ))
            })?;
            let split: SplitFile = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", split_path.display()))?;
            let test = split
                .test
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| {
                        Error::Data(format!(
                            "{label}: subject {id} is not in {}",
                            data.display()
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let model = if args.untrained {
                let mut rng = ChaCha8Rng::seed_from_u64(train.for_fold(fold).seed);
                Cascade::new(&train.gnn, train.m, &mut rng)
            } else {
                load_cascade(&dir, train.m, &label)?
            };
            let maes = evaluate_fold(&model, &test, train.m)?;
            for (t, mae) in maes.into_iter().enumerate() {
                rows.push(FoldMae {
                    variant,
                    timepoint: t + 1,
                    fold,
                    mae,
                });
            }
        }
    }
    let report = EvalReport::new(train.config_hash(), train.seed, rows);
    for &format in &formats {
        let text = emit_report(&report, format)?;
        let path = report_file(&out, format);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        if format == ReportFormat::Table {
            print!("{text}");
        }
        info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.h > 0.0) {
        return Err(Failure::Usage(format!("--h must be positive, got {}", args.h)).into());
    }
    let checks = gradcheck_suite(args.seed, args.h, args.tol)?;
    println!(
        "{:<16} {:>14} {:>10}  result",
        "component", "max rel error", "tol"
    );
    for c in &checks {
        println!(
            "{:<16} {:>14.3e} {:>10.1e}  {}",
            c.component,
            c.max_rel_error,
            c.tol,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.component)
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Numeric(format!("gradcheck failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn predict(args: &PredictArgs, out_root: &Path) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| out_root.join("predict"));
    let mut stages: Vec<(usize, PathBuf)> = Vec::new();
    let entries = fs::read_dir(&args.checkpoints)
        .map_err(|e| Error::Data(format!("{}: {e}", args.checkpoints.display())))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(k) = name
            .strip_prefix("stage")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|k| k.parse().ok())
        {
            stages.push((k, path));
        }
    }
    stages.sort();
    let label = args.checkpoints.display().to_string();
    let cascade = load_cascade(&args.checkpoints, stages.len(), &label)?;
    let baseline = read_matrix_csv(&args.input)?;

    let mut run = RunConfig::new("predict", &out);
    run.checkpoints = Some(args.checkpoints.clone());
    run.input = Some(args.input.clone());
    run.write()?;

    for (i, g) in cascade.rollout(&baseline)?.iter().enumerate() {
        let path = out.join(format!("t{}.csv", i + 1));
        write_matrix_csv(&path, g)?;
        println!("{}", path.display());
    }
    Ok(())
}
