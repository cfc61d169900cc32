use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::netrecon::{permute_edges, reconstruct_network, EdgeList, ReconSettings};
use crate::panel::{
    impute, label, FeatureScaler, InstitutionQuarter, MacroState, QuarterTag, NUM_FEATURES,
    NUM_MACRO,
};

/// Largest number of institutions entering one quarter's graph.
pub const GRAPH_SIZE: usize = 200;

/// One quarter of model input. `edges` are the pruned LGD weights before macro
/// conditioning; the multiplier is learned and applied in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub quarter: QuarterTag,
    pub certs: Vec<String>,
    /// n x 13 standardized features.
    pub x: Tensor,
    pub edges: EdgeList,
    /// Macro state as ingested.
    pub z_raw: [f64; NUM_MACRO],
    /// Macro state fed to the model (standardized with training-quarter statistics).
    pub z: [f64; NUM_MACRO],
    pub labels: Vec<bool>,
}

impl GraphSnapshot {
    pub fn n(&self) -> usize {
        self.certs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n > GRAPH_SIZE || self.x.shape() != [n, NUM_FEATURES] || self.labels.len() != n {
            return Err(Error::Invariant(format!(
                "snapshot {} has {n} certs, x {:?}, {} labels",
                self.quarter,
                self.x.shape(),
                self.labels.len()
            )));
        }
        if self.edges.n != n || self.edges.edges.iter().any(|e| e.src >= n || e.dst >= n) {
            return Err(Error::Invariant(format!(
                "snapshot {} edge endpoint out of range",
                self.quarter
            )));
        }
        Ok(())
    }
}

/// Per-quarter reconstruction diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconLog {
    pub quarter: QuarterTag,
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
    pub iterations: usize,
    pub residual: f64,
    pub column_scale: f64,
}

/// Chronological snapshot series with the cross-quarter membership index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub snapshots: Vec<GraphSnapshot>,
    pub recon: Vec<ReconLog>,
    row_of: Vec<HashMap<String, usize>>,
}

/// Top-`GRAPH_SIZE` institutions by total assets, ties by cert.
fn graph_subsample(records: &[InstitutionQuarter]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .total_assets
            .total_cmp(&records[a].total_assets)
            .then_with(|| records[a].cert.cmp(&records[b].cert))
    });
    order.truncate(GRAPH_SIZE);
    order
}

/// Builds one snapshot from all of a quarter's records: impute over the full quarter,
/// keep the top institutions, standardize within them, reconstruct their network.
pub fn build_snapshot(
    records: &[InstitutionQuarter],
    z: &MacroState,
    settings: &ReconSettings,
) -> Result<(GraphSnapshot, ReconLog)> {
    let quarter = z.quarter;
    let keep = graph_subsample(records);
    let raw: Vec<InstitutionQuarter> = keep.iter().map(|&i| records[i].clone()).collect();
    if let Some(r) = raw.iter().find(|r| !(r.tier1_capital > 0.0)) {
        return Err(Error::Data(format!(
            "cert {} in {quarter} has non-positive tier1_capital {}",
            r.cert, r.tier1_capital
        )));
    }
    let filled = impute(records)?;
    let sub: Vec<InstitutionQuarter> = keep.iter().map(|&i| filled[i].clone()).collect();
    let scaler = FeatureScaler::fit(&sub)?;
    let mut x = Vec::with_capacity(sub.len() * NUM_FEATURES);
    for r in &sub {
        x.extend(scaler.transform(&r.features.map(|v| v.expect("imputed"))));
    }
    let assets: Vec<f64> = raw.iter().map(|r| r.interbank_assets).collect();
    let liabilities: Vec<f64> = raw.iter().map(|r| r.interbank_liabilities).collect();
    let tier1: Vec<f64> = raw.iter().map(|r| r.tier1_capital).collect();
    let rec =
        reconstruct_network(&assets, &liabilities, &tier1, settings).map_err(|e| match e {
            Error::NonConvergence { .. } => {
                log::error!("RAS did not converge in {quarter}");
                e
            }
            other => other,
        })?;
    let log = ReconLog {
        quarter,
        nodes: raw.len(),
        edges: rec.edges.len(),
        density: rec.edges.density(),
        iterations: rec.iterations,
        residual: rec.residual,
        column_scale: rec.column_scale,
    };
    let snap = GraphSnapshot {
        quarter,
        certs: raw.iter().map(|r| r.cert.clone()).collect(),
        x: Tensor::new(raw.len(), NUM_FEATURES, x)?,
        edges: rec.edges,
        z_raw: z.z,
        z: z.z,
        labels: raw.iter().map(|r| label(r).distressed()).collect(),
    };
    Ok((snap, log))
}

impl Dataset {
    /// Groups records by quarter and builds every quarter covered by `macro_states`
    /// that has panel records. Quarters are processed in parallel.
    pub fn build(
        records: &[InstitutionQuarter],
        macro_states: &[MacroState],
        settings: &ReconSettings,
    ) -> Result<Self> {
        let mut by_q: BTreeMap<QuarterTag, Vec<InstitutionQuarter>> = BTreeMap::new();
        for r in records {
            by_q.entry(r.quarter).or_default().push(r.clone());
        }
        let macro_of: HashMap<QuarterTag, &MacroState> =
            macro_states.iter().map(|m| (m.quarter, m)).collect();
        if let Some(q) = by_q.keys().find(|q| !macro_of.contains_key(q)) {
            return Err(Error::Data(format!("no macro state for panel quarter {q}")));
        }
        let quarters: Vec<(QuarterTag, Vec<InstitutionQuarter>)> = by_q.into_iter().collect();
        for w in quarters.windows(2) {
            if w[1].0.ordinal() != w[0].0.ordinal() + 1 {
                return Err(Error::Data(format!(
                    "panel skips from {} to {}",
                    w[0].0, w[1].0
                )));
            }
        }
        let built = crate::par::try_map(&quarters, |(q, recs)| {
            build_snapshot(recs, macro_of[q], settings)
        })?;
        let (snapshots, recon) = built.into_iter().unzip();
        Ok(Self::from_snapshots_with_log(snapshots, recon))
    }

    pub fn from_snapshots(snapshots: Vec<GraphSnapshot>) -> Self {
        Self::from_snapshots_with_log(snapshots, Vec::new())
    }

    fn from_snapshots_with_log(snapshots: Vec<GraphSnapshot>, recon: Vec<ReconLog>) -> Self {
        let row_of = snapshots
            .iter()
            .map(|s| {
                s.certs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.clone(), i))
                    .collect()
            })
            .collect();
        Self {
            snapshots,
            recon,
            row_of,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn row(&self, t: usize, cert: &str) -> Option<usize> {
        self.row_of[t].get(cert).copied()
    }

    /// Row indices of node `i` of quarter `t` in quarters `t-L+1..=t`, oldest first,
    /// where the history stops at the first quarter the institution is absent from
    /// the graph and is capped at `window`.
    pub fn history(&self, t: usize, i: usize, window: usize) -> Vec<usize> {
        let cert = &self.snapshots[t].certs[i];
        let mut rows = vec![i];
        let mut tau = t;
        while rows.len() < window && tau > 0 {
            tau -= 1;
            match self.row(tau, cert) {
                Some(r) => rows.push(r),
                None => break,
            }
        }
        rows.reverse();
        rows
    }

    /// Standardizes the macro input of every snapshot with the mean and population
    /// standard deviation of `fit_quarters`. Constant series map to zero.
    pub fn standardize_macro(&mut self, fit_quarters: std::ops::Range<usize>) -> Result<()> {
        if fit_quarters.is_empty() || fit_quarters.end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "macro fit range {fit_quarters:?} invalid for {} quarters",
                self.len()
            )));
        }
        let n = fit_quarters.len() as f64;
        let mut mean = [0.0; NUM_MACRO];
        let mut std = [0.0; NUM_MACRO];
        for k in 0..NUM_MACRO {
            let vals: Vec<f64> = fit_quarters
                .clone()
                .map(|t| self.snapshots[t].z_raw[k])
                .collect();
            mean[k] = vals.iter().sum::<f64>() / n;
            std[k] = (vals.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
        }
        for s in &mut self.snapshots {
            for k in 0..NUM_MACRO {
                s.z[k] = if std[k] > 1e-12 * mean[k].abs().max(1.0) {
                    (s.z_raw[k] - mean[k]) / std[k]
                } else {
                    0.0
                };
            }
        }
        Ok(())
    }

    /// Copy with every quarter's edges reassigned to random node pairs.
    pub fn with_permuted_edges(&self, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        for (t, s) in out.snapshots.iter_mut().enumerate() {
            let qseed = seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            s.edges = permute_edges(&s.edges, qseed)?;
        }
        Ok(out)
    }

    /// Copy with column `feature` of every snapshot in `quarters` replaced.
    pub fn with_feature_column(
        &self,
        feature: usize,
        quarters: &[usize],
        values: &[Vec<f64>],
    ) -> Result<Self> {
        let mut out = self.clone();
        for (&t, col) in quarters.iter().zip(values) {
            let s = &mut out.snapshots[t];
            if col.len() != s.n() {
                return Err(Error::shape(
                    "with_feature_column",
                    format!("{} values for {} rows", col.len(), s.n()),
                ));
            }
            for (i, v) in col.iter().enumerate() {
                s.x.set(i, feature, *v);
            }
        }
        Ok(out)
    }

    pub fn positives(&self, quarters: std::ops::Range<usize>) -> usize {
        quarters
            .map(|t| self.snapshots[t].labels.iter().filter(|&&l| l).count())
            .sum()
    }
}
