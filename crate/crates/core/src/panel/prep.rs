use super::{InstitutionQuarter, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Asset-size decile (0..10) of each record: rank by `total_assets` ascending, ties
/// broken by `cert`, then `floor(rank * 10 / n)`.
pub fn decile_assignment(records: &[InstitutionQuarter]) -> Vec<usize> {
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .total_assets
            .total_cmp(&records[b].total_assets)
            .then_with(|| records[a].cert.cmp(&records[b].cert))
    });
    let mut decile = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        decile[i] = rank * 10 / n;
    }
    decile
}

/// Fills missing features with the median of the same asset-size decile within the
/// quarter, falling back to the quarter-wide median when the decile has no values.
pub fn impute(records: &[InstitutionQuarter]) -> Result<Vec<InstitutionQuarter>> {
    let deciles = decile_assignment(records);
    let mut out = records.to_vec();
    for f in 0..NUM_FEATURES {
        if records.iter().all(|r| r.features[f].is_some()) {
            continue;
        }
        let all: Vec<f64> = records.iter().filter_map(|r| r.features[f]).collect();
        let quarter_median = median(&all).ok_or_else(|| {
            let q = records
                .first()
                .map(|r| r.quarter.to_string())
                .unwrap_or_default();
            Error::Data(format!(
                "feature `{}` is missing for every institution in {q}",
                FEATURE_NAMES[f]
            ))
        })?;
        let mut by_decile: [Vec<f64>; 10] = Default::default();
        for (r, &d) in records.iter().zip(&deciles) {
            if let Some(v) = r.features[f] {
                by_decile[d].push(v);
            }
        }
        let fill: Vec<f64> = by_decile
            .iter()
            .map(|vals| median(vals).unwrap_or(quarter_median))
            .collect();
        for (r, &d) in out.iter_mut().zip(&deciles) {
            if r.features[f].is_none() {
                r.features[f] = Some(fill[d]);
            }
        }
    }
    Ok(out)
}

/// Per-feature population mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl FeatureScaler {
    /// Statistics over the observed (non-missing) values of each feature.
    pub fn fit(records: &[InstitutionQuarter]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Data(format!(
                "standardisation needs at least 2 records in a quarter, got {}",
                records.len()
            )));
        }
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for f in 0..NUM_FEATURES {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.features[f]).collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[f] = m;
            std[f] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    /// Zero-variance features map to zero.
    pub fn transform(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for f in 0..NUM_FEATURES {
            // Relative cutoff so rounding noise on a constant column does not blow up.
            if self.std[f] > 1e-12 * self.mean[f].abs().max(1.0) {
                out[f] = (x[f] - self.mean[f]) / self.std[f];
            }
        }
        out
    }
}

/// Standardised, imputed feature matrix of one quarter's records (row order preserved).
pub fn standardize_quarter(records: &[InstitutionQuarter]) -> Result<Vec<[f64; NUM_FEATURES]>> {
    let scaler = FeatureScaler::fit(records)?;
    let filled = impute(records)?;
    Ok(filled
        .iter()
        .map(|r| {
            let raw = r.features.map(|v| v.expect("imputed"));
            scaler.transform(&raw)
        })
        .collect())
}
