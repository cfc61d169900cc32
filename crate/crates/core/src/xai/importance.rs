use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::model::{history_range, predict, Dataset, TrainedModel};
use crate::panel::{FEATURE_NAMES, NUM_FEATURES};

pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    /// Baseline AUROC minus mean AUROC with the feature shuffled.
    pub delta_auroc: f64,
}

/// All node features ranked by AUROC loss, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub run_id: String,
    pub baseline_auroc: f64,
    pub entries: Vec<ImportanceEntry>,
    pub n_repeats: usize,
    pub seed: u64,
}

impl FeatureImportance {
    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.feature == feature).map(|p| p + 1)
    }
}

/// Shuffles one standardized feature column across institutions within every quarter
/// the scored quarters read (their full history windows), re-predicts and records the
/// AUROC drop. Repeat `r` of feature `f` draws from ChaCha8 stream `(f << 32) | r`.
/// Features run in parallel; `data` is not modified.
pub fn permutation_importance(
    model: &TrainedModel,
    data: &Dataset,
    quarters: &[usize],
    n_repeats: usize,
    seed: u64,
) -> Result<FeatureImportance> {
    if n_repeats == 0 || quarters.is_empty() {
        return Err(Error::InvalidArgument("permutation importance needs repeats and quarters".into()));
    }
    let score = |d: &Dataset| -> Result<f64> {
        let (s, y) = predict(model, d, quarters)?.pooled();
        auroc(&s, &y)
    };
    let baseline = score(data)?;
    let mut fed: Vec<usize> = quarters
        .iter()
        .flat_map(|&t| history_range(t, &model.config))
        .collect();
    fed.sort_unstable();
    fed.dedup();
    let features: Vec<usize> = (0..NUM_FEATURES).collect();
    let deltas = crate::par::try_map(&features, |&f| -> Result<f64> {
        let mut total = 0.0;
        for r in 0..n_repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((f as u64) << 32) | r as u64);
            let columns: Vec<Vec<f64>> = fed
                .iter()
                .map(|&t| {
                    let x = &data.snapshots[t].x;
                    let mut order: Vec<usize> = (0..x.rows()).collect();
                    order.shuffle(&mut rng);
                    order.into_iter().map(|i| x.get(i, f)).collect()
                })
                .collect();
            total += score(&data.with_feature_column(f, &fed, &columns)?)?;
        }
        Ok(baseline - total / n_repeats as f64)
    })?;
    let mut entries: Vec<ImportanceEntry> = FEATURE_NAMES
        .iter()
        .zip(deltas)
        .map(|(name, delta_auroc)| ImportanceEntry { feature: name.to_string(), delta_auroc })
        .collect();
    entries.sort_by(|a, b| b.delta_auroc.total_cmp(&a.delta_auroc));
    Ok(FeatureImportance {
        run_id: model.run_id()?,
        baseline_auroc: baseline,
        entries,
        n_repeats,
        seed,
    })
}

pub const IMPORTANCE_HEADER: &str = "feature,delta_auroc,rank";

pub fn write_importance(path: &Path, imp: &FeatureImportance) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{IMPORTANCE_HEADER}")?;
    for (k, e) in imp.entries.iter().enumerate() {
        writeln!(w, "{},{},{}", e.feature, e.delta_auroc, k + 1)?;
    }
    w.flush()?;
    Ok(())
}
