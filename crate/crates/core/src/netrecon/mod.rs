//! Interbank network reconstruction from balance-sheet marginals.

mod edges;
mod ras;

pub use edges::{
    condition_edges, macro_multiplier, macro_multiplier_on_tape, normalize_edges, permute_edges,
    write_edges, Edge, EdgeList, MacroMlp, MACRO_HIDDEN, PRUNE_THRESHOLD,
};
pub use ras::{balance_columns, ras_reconstruct, ExposureMatrix, RasOutcome};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ReconSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub prune_threshold: f64,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            prune_threshold: PRUNE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub edges: EdgeList,
    pub iterations: usize,
    pub residual: f64,
    pub column_scale: f64,
}

/// Full per-quarter pipeline: balance totals, RAS, LGD normalization and pruning.
pub fn reconstruct_network(
    interbank_assets: &[f64],
    interbank_liabilities: &[f64],
    tier1: &[f64],
    settings: &ReconSettings,
) -> Result<Reconstruction> {
    let (cols, column_scale) = balance_columns(interbank_assets, interbank_liabilities);
    let out = ras_reconstruct(interbank_assets, &cols, settings.tol, settings.max_iter)?;
    let edges = normalize_edges(&out.matrix, tier1, settings.prune_threshold)?;
    Ok(Reconstruction {
        edges,
        iterations: out.iterations,
        residual: out.residual,
        column_scale,
    })
}
