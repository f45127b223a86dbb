//! Held-out MAE, fold aggregation and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::graphcore::{ConnectivityMatrix, LongitudinalSample};
use crate::losses::Variant;
use crate::training::Cascade;

/// Mean absolute difference over all `n²` entries.
pub fn mae(predicted: &ConnectivityMatrix, target: &ConnectivityMatrix) -> Result<f64> {
    if predicted.n_rois() != target.n_rois() {
        return Err(Error::Dimension(format!(
            "mae between {0}×{0} and {1}×{1} graphs",
            predicted.n_rois(),
            target.n_rois()
        )));
    }
    let sum: f64 = predicted
        .weights()
        .iter()
        .zip(target.weights())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / predicted.weights().len() as f64)
}

/// Anything that maps a baseline graph to predictions at `t_1 … t_m`.
pub trait Predictor: Sync {
    fn stages(&self) -> usize;
    fn rollout(&self, baseline: &ConnectivityMatrix) -> Result<Vec<ConnectivityMatrix>>;
}

impl Predictor for Cascade {
    fn stages(&self) -> usize {
        Cascade::stages(self)
    }

    fn rollout(&self, baseline: &ConnectivityMatrix) -> Result<Vec<ConnectivityMatrix>> {
        Cascade::rollout(self, baseline)
    }
}

/// Subject-averaged MAE at each of `t_1 … t_m`, rolling out from ground-truth `t_0`.
pub fn evaluate_fold<P: Predictor + ?Sized>(
    model: &P,
    test: &[LongitudinalSample],
    m: usize,
) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Report("empty test set".into()));
    }
    if m == 0 || m > model.stages() {
        return Err(Error::Contract(format!(
            "cannot evaluate {m} timepoints with a {}-stage model",
            model.stages()
        )));
    }
    if let Some(s) = test.iter().find(|s| s.timepoints() < m + 1) {
        return Err(Error::Data(format!(
            "subject {} has {} timepoints, evaluation needs {}",
            s.subject_id,
            s.timepoints(),
            m + 1
        )));
    }
    let per_subject = map_indexed(Execution::default(), test, |_, s| {
        let preds = model.rollout(s.baseline())?;
        (0..m)
            .map(|i| mae(&preds[i], &s.graphs()[i + 1]))
            .collect::<Result<Vec<f64>>>()
    });
    let mut totals = vec![0.0; m];
    for row in per_subject {
        for (t, v) in totals.iter_mut().zip(row?) {
            *t += v;
        }
    }
    Ok(totals.iter().map(|t| t / test.len() as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMae {
    pub variant: Variant,
    /// 1-based timepoint index.
    pub timepoint: usize,
    pub fold: usize,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub timepoint: usize,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
    /// Smallest fold MAE.
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldMae>,
}

impl EvalReport {
    pub fn new(config_hash: impl Into<String>, seed: u64, folds: Vec<FoldMae>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            folds,
        }
    }

    /// One entry per (variant, timepoint), in table order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        aggregate(&self.folds)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut vs: Vec<Variant> = Vec::new();
        for f in &self.folds {
            if !vs.contains(&f.variant) {
                vs.push(f.variant);
            }
        }
        vs.sort_by_key(|v| variant_rank(*v));
        vs
    }

    pub fn timepoints(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.folds.iter().map(|f| f.timepoint).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL
        .iter()
        .position(|&x| x == v)
        .unwrap_or(usize::MAX)
}

pub fn aggregate(rows: &[FoldMae]) -> Vec<Aggregate> {
    let mut keys: Vec<(Variant, usize)> = rows.iter().map(|r| (r.variant, r.timepoint)).collect();
    keys.sort_by_key(|&(v, t)| (variant_rank(v), t));
    keys.dedup();
    keys.into_iter()
        .map(|(variant, timepoint)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant && r.timepoint == timepoint)
                .map(|r| r.mae)
                .collect();
            let n = vals.len() as f64;
            let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
            // offsets from the minimum are non-negative, so mean >= best exactly
            let mean = best + vals.iter().map(|v| v - best).sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Aggregate {
                variant,
                timepoint,
                mean,
                std: var.sqrt(),
                best,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Table => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (expected table, csv or json)"
            ))),
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "variant,timepoint,fold,mae";

/// Renders `report`; output depends only on its contents.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    if report.folds.is_empty() {
        warn!("report has no variants; writing headers only");
    }
    match format {
        ReportFormat::Csv => Ok(render_csv(&report.folds)),
        ReportFormat::Json => render_json(report),
        ReportFormat::Table => Ok(render_table(report)),
    }
}

fn render_csv(rows: &[FoldMae]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{}",
            r.variant.as_str(),
            r.timepoint,
            r.fold,
            r.mae
        )
        .unwrap();
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<FoldMae>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_CSV_HEADER) {
        return Err(Error::Report(format!(
            "report CSV must start with {REPORT_CSV_HEADER:?}"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Report(format!("line {}: {what} in {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(FoldMae {
                variant: f[0].parse().map_err(|_| bad("unknown variant"))?,
                timepoint: f[1].parse().map_err(|_| bad("bad timepoint"))?,
                fold: f[2].parse().map_err(|_| bad("bad fold"))?,
                mae: f[3].parse().map_err(|_| bad("bad mae"))?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config_hash: &'a str,
    seed: u64,
    aggregates: Vec<Aggregate>,
    folds: &'a [FoldMae],
}

fn render_json(report: &EvalReport) -> Result<String> {
    let doc = JsonReport {
        config_hash: &report.config_hash,
        seed: report.seed,
        aggregates: report.aggregates(),
        folds: &report.folds,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::json("<report>", e))?;
    s.push('\n');
    Ok(s)
}

/// Rows are variants; each timepoint contributes a "mean ± std" and a "best" column.
fn render_table(report: &EvalReport) -> String {
    let aggs = report.aggregates();
    let timepoints = report.timepoints();
    let mut header = vec!["Method".to_string()];
    for t in &timepoints {
        header.push(format!("t{t} MAE (mean ± std)"));
        header.push(format!("t{t} best MAE"));
    }
    let mut rows = vec![header];
    for v in report.variants() {
        let mut row = vec![v.display_name().to_string()];
        for &t in &timepoints {
            match aggs.iter().find(|a| a.variant == v && a.timepoint == t) {
                Some(a) => {
                    row.push(format!("{:.5} ± {:.5}", a.mean, a.std));
                    row.push(format!("{:.5}", a.best));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::gnn::{Generator, GnnConfig};
    use proptest::prelude::*;

    fn cm(rows: &[Vec<f64>]) -> ConnectivityMatrix {
        ConnectivityMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn mae_fixtures() {
        let a = cm(&[vec![0.0, 0.2], vec![0.2, 0.0]]);
        let b = cm(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
        assert!((mae(&a, &b).unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        assert!(matches!(
            mae(&a, &ConnectivityMatrix::zeros(3)),
            Err(Error::Dimension(_))
        ));
    }

    /// Returns each subject's own future, looked up by baseline.
    struct Oracle<'a>(&'a [LongitudinalSample]);

    impl Predictor for Oracle<'_> {
        fn stages(&self) -> usize {
            self.0[0].timepoints() - 1
        }

        fn rollout(&self, baseline: &ConnectivityMatrix) -> Result<Vec<ConnectivityMatrix>> {
            let s = self.0.iter().find(|s| s.baseline() == baseline).unwrap();
            Ok(s.graphs()[1..].to_vec())
        }
    }

    #[test]
    fn oracle_scores_zero() {
        let data = generate_synthetic(&SyntheticConfig {
            n_subjects: 4,
            n_rois: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(
            evaluate_fold(&Oracle(&data), &data, 2).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn identity_cascade_on_frozen_data_scores_zero() {
        let data = generate_synthetic(&SyntheticConfig {
            n_subjects: 3,
            n_rois: 6,
            drift_scale: 0.0,
            noise_scale: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = GnnConfig {
            n_rois: 6,
            hidden: 4,
            disc_hidden: 4,
            ..GnnConfig::default()
        };
        let mut rng = rand::thread_rng();
        let mut cascade = Cascade::new(&cfg, 2, &mut rng);
        cascade.generators = vec![Generator::zeroed(cfg.clone()), Generator::zeroed(cfg)];
        assert_eq!(evaluate_fold(&cascade, &data, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_test_set_is_report_error() {
        let data = generate_synthetic(&SyntheticConfig {
            n_subjects: 1,
            n_rois: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert!(matches!(
            evaluate_fold(&Oracle(&data), &[], 2),
            Err(Error::Report(_))
        ));
    }

    fn sample_report() -> EvalReport {
        let mut folds = Vec::new();
        for (vi, v) in Variant::ALL.iter().enumerate() {
            for t in 1..=2 {
                for f in 0..3 {
                    let mae = 0.01 * (t as f64) + 0.001 * (f as f64) + 1e-4 * vi as f64 + 1.0 / 3e5;
                    folds.push(FoldMae {
                        variant: *v,
                        timepoint: t,
                        fold: f,
                        mae,
                    });
                }
            }
        }
        EvalReport::new("abc", 7, folds)
    }

    #[test]
    fn csv_round_trip_and_aggregates_recompute_exactly() {
        let r = sample_report();
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        let back = parse_report_csv(&csv).unwrap();
        assert_eq!(back, r.folds);
        assert_eq!(aggregate(&back), r.aggregates());
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = EvalReport::new("h", 0, vec![]);
        assert_eq!(
            emit_report(&r, ReportFormat::Csv).unwrap(),
            format!("{REPORT_CSV_HEADER}\n")
        );
        let table = emit_report(&r, ReportFormat::Table).unwrap();
        assert_eq!(table.lines().count(), 2);
        assert!(emit_report(&r, ReportFormat::Json)
            .unwrap()
            .contains("\"aggregates\": []"));
    }

    #[test]
    fn table_shape() {
        let table = emit_report(&sample_report(), ReportFormat::Table).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2 + 3);
        for row in &lines[2..] {
            assert_eq!(row.split(" | ").count(), 1 + 4);
        }
        assert!(lines[2].starts_with(Variant::NoKl.display_name()));
    }

    #[test]
    fn json_has_aggregates() {
        let json = emit_report(&sample_report(), ReportFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["aggregates"].as_array().unwrap().len(), 6);
        assert_eq!(v["seed"], 7);
    }

    #[test]
    fn unknown_format_rejected() {
        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }

    proptest! {
        #[test]
        fn mean_is_never_below_best(vals in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let rows: Vec<FoldMae> = vals
                .iter()
                .enumerate()
                .map(|(f, &mae)| FoldMae { variant: Variant::Full, timepoint: 1, fold: f, mae })
                .collect();
            let a = aggregate(&rows)[0];
            prop_assert!(a.mean >= a.best);
            prop_assert!(a.std >= 0.0);
        }

        #[test]
        fn identical_folds_have_zero_spread(v in 0.0f64..1.0, n in 1usize..6) {
            let rows: Vec<FoldMae> = (0..n)
                .map(|f| FoldMae { variant: Variant::NoKl, timepoint: 2, fold: f, mae: v })
                .collect();
            let a = aggregate(&rows)[0];
            prop_assert_eq!(a.mean, v);
            prop_assert_eq!(a.best, v);
            prop_assert_eq!(a.std, 0.0);
        }
    }
}
