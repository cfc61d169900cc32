//! Spatial-temporal graph attention risk model.

mod data;
mod forward;
mod params;
mod train;


pub use data::{build_snapshot, Dataset, GraphSnapshot, ReconLog, GRAPH_SIZE};
pub use forward::{
    focal_loss, focal_loss_value, gat_layer, risk_head, score_quarter, spatial_encode,
    temporal_encode, Binding, EdgeIndex, GatOutput, QuarterForward, SpatialOutput, TemporalOutput,
};
pub use params::init_params;
pub use train::{
    history_range,
    predict, quarter_loss, train, EpochLog, NodeScore, Prediction, QuarterPrediction, RunMetadata, TrainedModel,
    CHECKPOINT_BN_MEAN, CHECKPOINT_BN_VAR,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "NO_MACRO")]
    NoMacro,
    #[serde(rename = "NO_TEMPORAL")]
    NoTemporal,
    #[serde(rename = "NO_ATTENTION")]
    NoAttention,
    #[serde(rename = "PERM_EDGE")]
    PermEdge,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoMacro,
        Ablation::NoTemporal,
        Ablation::NoAttention,
        Ablation::PermEdge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "FULL",
            Ablation::NoMacro => "NO_MACRO",
            Ablation::NoTemporal => "NO_TEMPORAL",
            Ablation::NoAttention => "NO_ATTENTION",
            Ablation::PermEdge => "PERM_EDGE",
        }
    }

    pub fn uses_macro(self) -> bool {
        self != Ablation::NoMacro
    }

    pub fn uses_lstm(self) -> bool {
        self != Ablation::NoTemporal
    }

    pub fn uses_temporal_attention(self) -> bool {
        !matches!(self, Ablation::NoTemporal | Ablation::NoAttention)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation `{s}` (expected FULL, NO_MACRO, NO_TEMPORAL, NO_ATTENTION or PERM_EDGE)"
                ))
            })
    }
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub heads: usize,
    pub head_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            heads: 8,
            head_dim: 8,
            lstm_hidden: 64,
            lstm_layers: 2,
            attn_dim: 64,
            head_hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn spatial_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Width of the per-quarter temporal state (both directions).
    pub fn temporal_dim(&self) -> usize {
        2 * self.lstm_hidden
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dropout: f64,
    pub history_window: usize,
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            patience: 8,
            max_epochs: 200,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dropout: 0.3,
            history_window: 8,
            seeds: vec![42, 123, 456, 789, 1024],
            ablation: Ablation::Full,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.history_window < 1 {
            return bad("history_window must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad(format!(
                "invalid lr {} / weight_decay {}",
                self.lr, self.weight_decay
            ));
        }
        let d = &self.dims;
        if d.heads == 0
            || d.head_dim == 0
            || d.lstm_hidden == 0
            || d.lstm_layers == 0
            || d.attn_dim == 0
            || d.head_hidden == 0
        {
            return bad(format!("model dimensions must be positive: {d:?}"));
        }
        Ok(())
    }
}
