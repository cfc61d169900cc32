//! Multi-seed, multi-configuration comparison on the locked test quarters.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baseline::{logistic_baseline, LogisticConfig};
use super::metrics::{metric_report, percentile, MetricReport};
use super::split::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{predict, train, Ablation, Dataset, Prediction, TrainConfig, TrainedModel};
use crate::netrecon::ReconSettings;
use crate::panel::{InstitutionQuarter, MacroState};

/// Row label of the logistic-regression anchor.
pub const BASELINE_CONFIG: &str = "LOGISTIC";

pub const RESULTS_HEADER: &str =
    "config,seed,auroc,auprc,f1,mcc,auroc_ci_low,auroc_ci_high,n_test,n_positive";
pub const AGGREGATE_HEADER: &str = "config,n_seeds,auroc_mean,auroc_std,auprc_mean,auprc_std,\
f1_mean,f1_std,mcc_mean,mcc_std,auroc_ci_low_median,auroc_ci_high_median,delta_auprc_vs_full";

/// Builds every quarter's snapshot and standardizes the macro inputs on the training
/// quarters. Without an explicit split the reference split is scaled to the panel.
pub fn prepare_dataset(
    records: &[InstitutionQuarter],
    macro_states: &[MacroState],
    settings: &ReconSettings,
    split: Option<SplitSpec>,
) -> Result<(Dataset, SplitSpec)> {
    let mut data = Dataset::build(records, macro_states, settings)?;
    let split = match split {
        Some(s) => s,
        None => SplitSpec::proportional(data.len())?,
    };
    split.validate()?;
    if split.test.end > data.len() {
        return Err(Error::InvalidArgument(format!(
            "split needs {} quarters, panel has {}",
            split.test.end,
            data.len()
        )));
    }
    data.standardize_macro(split.train.clone())?;
    Ok((data, split))
}

/// One trained and evaluated (config, seed) cell.
#[derive(Debug, Clone)]
pub struct Cell {
    pub config: String,
    pub seed: u64,
    pub report: MetricReport,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// Absent for the logistic anchor.
    pub model: Option<TrainedModel>,
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub n_seeds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub mcc_mean: f64,
    pub mcc_std: f64,
    /// Per-bound median across seeds.
    pub auroc_ci_low: f64,
    pub auroc_ci_high: f64,
    /// Mean AUPRC minus that of FULL; absent when FULL was not run.
    pub delta_auprc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub cells: Vec<Cell>,
    pub aggregate: Vec<AggregateRow>,
}

/// Sample mean and standard deviation (n - 1 denominator; zero for one value).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

enum Job {
    Model(Ablation, u64),
    Baseline(u64),
}

/// Trains and tests every (config, seed) cell, plus the logistic anchor per seed when
/// `with_baseline` is set. Cells run in parallel; output order is configs then seeds
/// as given, with the anchor last.
pub fn run_comparison(
    data: &Dataset,
    split: &SplitSpec,
    base: &TrainConfig,
    configs: &[Ablation],
    seeds: &[u64],
    with_baseline: bool,
) -> Result<Comparison> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "comparison needs at least one config and one seed".into(),
        ));
    }
    let mut jobs: Vec<Job> = configs
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| Job::Model(a, s)))
        .collect();
    if with_baseline {
        jobs.extend(seeds.iter().map(|&s| Job::Baseline(s)));
    }
    let test: Vec<usize> = split.test.clone().collect();
    let cells = crate::par::try_map(&jobs, |job| -> Result<Cell> {
        match *job {
            Job::Model(ablation, seed) => {
                let cfg = TrainConfig {
                    ablation,
                    ..base.clone()
                };
                let model = train(data, split, &cfg, seed)?;
                let prediction = predict(&model, data, &test)?;
                let (scores, labels) = prediction.pooled();
                let report = metric_report(&scores, &labels, seed)?;
                log::info!(
                    "{ablation} seed {seed}: test AUPRC {:.4} AUROC {:.4}",
                    report.auprc,
                    report.auroc
                );
                Ok(Cell {
                    config: ablation.to_string(),
                    seed,
                    report,
                    scores,
                    labels,
                    model: Some(model),
                    prediction: Some(prediction),
                })
            }
            Job::Baseline(seed) => {
                let (scores, labels) = logistic_baseline(
                    data,
                    split.train.clone(),
                    split.test.clone(),
                    &LogisticConfig::default(),
                )?;
                let report = metric_report(&scores, &labels, seed)?;
                Ok(Cell {
                    config: BASELINE_CONFIG.to_string(),
                    seed,
                    report,
                    scores,
                    labels,
                    model: None,
                    prediction: None,
                })
            }
        }
    })?;
    let aggregate = aggregate(&cells);
    Ok(Comparison { cells, aggregate })
}

/// Mean and standard deviation per config, in first-appearance order.
pub fn aggregate(cells: &[Cell]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for c in cells {
        if !order.contains(&c.config.as_str()) {
            order.push(&c.config);
        }
    }
    let mut rows: Vec<AggregateRow> = order
        .iter()
        .map(|&name| {
            let rs: Vec<&MetricReport> = cells
                .iter()
                .filter(|c| c.config == name)
                .map(|c| &c.report)
                .collect();
            let col = |f: fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (auroc_mean, auroc_std) = mean_std(&col(|r| r.auroc));
            let (auprc_mean, auprc_std) = mean_std(&col(|r| r.auprc));
            let (f1_mean, f1_std) = mean_std(&col(|r| r.f1));
            let (mcc_mean, mcc_std) = mean_std(&col(|r| r.mcc));
            AggregateRow {
                config: name.to_string(),
                n_seeds: rs.len(),
                auroc_mean,
                auroc_std,
                auprc_mean,
                auprc_std,
                f1_mean,
                f1_std,
                mcc_mean,
                mcc_std,
                auroc_ci_low: median(col(|r| r.auroc_ci_low)),
                auroc_ci_high: median(col(|r| r.auroc_ci_high)),
                delta_auprc: None,
            }
        })
        .collect();
    let full = Ablation::Full.to_string();
    if let Some(reference) = rows.iter().find(|r| r.config == full).map(|r| r.auprc_mean) {
        for r in &mut rows {
            r.delta_auprc = Some(r.auprc_mean - reference);
        }
    }
    rows
}

pub fn write_results(path: &Path, cells: &[Cell]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{RESULTS_HEADER}")?;
    for c in cells {
        let r = &c.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            c.config,
            c.seed,
            r.auroc,
            r.auprc,
            r.f1,
            r.mcc,
            r.auroc_ci_low,
            r.auroc_ci_high,
            r.n,
            r.n_positive
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        let delta = r.delta_auprc.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.n_seeds,
            r.auroc_mean,
            r.auroc_std,
            r.auprc_mean,
            r.auprc_std,
            r.f1_mean,
            r.f1_std,
            r.mcc_mean,
            r.mcc_std,
            r.auroc_ci_low,
            r.auroc_ci_high,
            delta
        )?;
    }
    w.flush()?;
    Ok(())
}
