//! Institution-quarter panel: records, composite distress label, imputation,
//! standardisation and the synthetic panel generator.

mod io;
mod prep;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    ingest_macro, ingest_panel, write_macro, write_panel, PanelIngest, MACRO_HEADER, PANEL_HEADER,
};
pub use prep::{decile_assignment, impute, median, standardize_quarter, FeatureScaler};
pub use synth::{synthesize_panel, SynthConfig};

pub const NUM_FEATURES: usize = 13;
pub const NUM_MACRO: usize = 7;

/// Node feature order; every feature vector uses these slots.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "tier1_capital_ratio",
    "total_capital_ratio",
    "leverage_ratio",
    "npl_ratio",
    "provision_coverage_ratio",
    "cre_concentration_ratio",
    "liquidity_stress_ratio",
    "uninsured_deposit_share",
    "wholesale_funding_ratio",
    "loan_to_deposit_ratio",
    "roa",
    "net_interest_margin",
    "fair_value_loss_ratio",
];

pub const TIER1: usize = 0;
pub const NPL: usize = 3;
pub const ROA: usize = 10;

pub const MACRO_NAMES: [&str; NUM_MACRO] = [
    "vix",
    "yield_spread_10y2y",
    "fed_funds_rate",
    "gdp_growth",
    "m2_growth",
    "credit_spread",
    "unemployment_rate",
];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|f| *f == name)
}

/// Calendar quarter, formatted `YYYYQn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuarterTag {
    pub year: i32,
    pub q: u8,
}

impl QuarterTag {
    pub fn new(year: i32, q: u8) -> Result<Self> {
        if !(1..=4).contains(&q) {
            return Err(Error::InvalidArgument(format!("quarter {q} outside 1..=4")));
        }
        Ok(Self { year, q })
    }

    pub fn ordinal(self) -> i64 {
        self.year as i64 * 4 + (self.q as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(4) as i32,
            q: (ord.rem_euclid(4) + 1) as u8,
        }
    }

    pub fn offset(self, quarters: i64) -> Self {
        Self::from_ordinal(self.ordinal() + quarters)
    }
}

impl fmt::Display for QuarterTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.q)
    }
}

impl FromStr for QuarterTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("`{s}` is not a YYYYQn quarter"));
        let (y, q) = s.trim().split_once(['Q', 'q']).ok_or_else(bad)?;
        if y.len() != 4 || q.len() != 1 {
            return Err(bad());
        }
        let year = y.parse::<i32>().map_err(|_| bad())?;
        let q = q.parse::<u8>().map_err(|_| bad())?;
        Self::new(year, q).map_err(|_| bad())
    }
}

/// One bank-quarter record. Feature slots follow [`FEATURE_NAMES`]; `None` is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct InstitutionQuarter {
    pub cert: String,
    pub quarter: QuarterTag,
    pub features: [Option<f64>; NUM_FEATURES],
    pub total_assets: f64,
    pub interbank_assets: f64,
    pub interbank_liabilities: f64,
    pub tier1_capital: f64,
    pub failed_within_4q: bool,
}

impl InstitutionQuarter {
    pub fn feature(&self, i: usize) -> Option<f64> {
        self.features[i]
    }
}

/// Macro state vector for one quarter, slots in [`MACRO_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub quarter: QuarterTag,
    pub z: [f64; NUM_MACRO],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Trigger {
    Failed,
    Tier1Lt6,
    NplGt5,
    RoaLtNeg1,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistressLabel {
    pub triggers: BTreeSet<Trigger>,
}

impl DistressLabel {
    pub fn distressed(&self) -> bool {
        !self.triggers.is_empty()
    }
}

pub const TIER1_THRESHOLD: f64 = 6.0;
pub const NPL_THRESHOLD: f64 = 5.0;
pub const ROA_THRESHOLD: f64 = -1.0;

/// Composite distress label on raw ratios. All ratio triggers are strict; a missing
/// component cannot fire.
pub fn label(rec: &InstitutionQuarter) -> DistressLabel {
    let mut triggers = BTreeSet::new();
    if rec.failed_within_4q {
        triggers.insert(Trigger::Failed);
    }
    if rec.features[TIER1].is_some_and(|v| v < TIER1_THRESHOLD) {
        triggers.insert(Trigger::Tier1Lt6);
    }
    if rec.features[NPL].is_some_and(|v| v > NPL_THRESHOLD) {
        triggers.insert(Trigger::NplGt5);
    }
    if rec.features[ROA].is_some_and(|v| v < ROA_THRESHOLD) {
        triggers.insert(Trigger::RoaLtNeg1);
    }
    DistressLabel { triggers }
}
