//! Run configuration: a TOML file, then command-line flags on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surveil_core::model::{Ablation, TrainConfig};
use surveil_core::netrecon::ReconSettings;
use surveil_core::panel::SynthConfig;

use crate::CliError;

/// Calendar split bounds, each inclusive (`2013Q4`). Absent means the reference
/// Last quarter of each split segment, as `YYYYQn`. Without it the split is
/// proportional to the panel length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBounds {
    pub train_end: String,
    pub val_end: String,
    pub test_end: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    #[serde(rename = "macro")]
    pub macro_path: Option<PathBuf>,
    pub out: PathBuf,
    /// Seed for synthesis and for single-seed commands.
    pub seed: u64,
    pub split: Option<SplitBounds>,
    pub train: TrainConfig,
    pub recon: ReconSettings,
    pub synth: SynthConfig,
    /// Permutation repeats for `explain` and `report`.
    pub importance_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            macro_path: None,
            out: PathBuf::from("out"),
            seed: 42,
            split: None,
            train: TrainConfig::default(),
            recon: ReconSettings::default(),
            synth: SynthConfig::default(),
            importance_repeats: surveil_core::xai::DEFAULT_REPEATS,
        }
    }
}

/// Flag values that override the file. `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub panel: Option<PathBuf>,
    pub macro_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub ablation: Option<Ablation>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub prune: Option<f64>,
    pub history_window: Option<usize>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {}", p.display(), e.message())))?
            }
            None => RunConfig::default(),
        };
        if o.seed.is_some() && o.seeds.is_some() {
            return Err(CliError::usage("--seed and --seeds conflict; give one".into()));
        }
        if let Some(v) = &o.panel {
            cfg.panel = Some(v.clone());
        }
        if let Some(v) = &o.macro_path {
            cfg.macro_path = Some(v.clone());
        }
        if let Some(v) = &o.out {
            cfg.out = v.clone();
        }
        if let Some(v) = o.seed {
            cfg.seed = v;
            cfg.train.seeds = vec![v];
        }
        if let Some(v) = &o.seeds {
            cfg.train.seeds = v.clone();
        }
        if let Some(v) = o.ablation {
            cfg.train.ablation = v;
        }
        if let Some(v) = o.tol {
            cfg.recon.tol = v;
        }
        if let Some(v) = o.max_iter {
            cfg.recon.max_iter = v;
        }
        if let Some(v) = o.prune {
            cfg.recon.prune_threshold = v;
        }
        if let Some(v) = o.history_window {
            cfg.train.history_window = v;
        }
        if let Some(v) = o.epochs {
            cfg.train.max_epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.train.seeds.is_empty() {
            return Err(CliError::usage("seed list is empty".into()));
        }
        if !(self.recon.tol > 0.0) || self.recon.max_iter == 0 || !(self.recon.prune_threshold >= 0.0) {
            return Err(CliError::usage("tol must be positive, max-iter at least 1, prune non-negative".into()));
        }
        if self.importance_repeats == 0 {
            return Err(CliError::usage("importance_repeats must be at least 1".into()));
        }
        self.train.validate().map_err(|e| CliError::usage(e.to_string()))
    }

    /// Paths of both input files, which must exist.
    pub fn inputs(&self) -> Result<(PathBuf, PathBuf), CliError> {
        let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf, CliError> {
            let p = p
                .clone()
                .ok_or_else(|| CliError::usage(format!("{flag} is required (flag or config file)")))?;
            if !p.is_file() {
                return Err(CliError::usage(format!("cannot read {flag} file {}", p.display())));
            }
            Ok(p)
        };
        Ok((need(&self.panel, "--panel")?, need(&self.macro_path, "--macro")?))
    }
}
