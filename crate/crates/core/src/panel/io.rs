use std::collections::HashSet;
use std::path::Path;

use super::{
    InstitutionQuarter, MacroState, QuarterTag, FEATURE_NAMES, MACRO_NAMES, NUM_FEATURES, NUM_MACRO,
};
use crate::error::{Error, Result};

pub const PANEL_HEADER: [&str; 20] = [
    "cert",
    "quarter",
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
    "total_assets",
    "interbank_assets",
    "interbank_liabilities",
    "tier1_capital",
    "failed_within_4q",
];

pub const MACRO_HEADER: [&str; 8] = [
    "quarter",
    "vix",
    "yield_spread_10y2y",
    "fed_funds_rate",
    "gdp_growth",
    "m2_growth",
    "credit_spread",
    "unemployment_rate",
];

/// Result of reading a panel file.
#[derive(Debug, Clone)]
pub struct PanelIngest {
    pub records: Vec<InstitutionQuarter>,
    /// Rows dropped because `total_assets <= 0`.
    pub rejected_nonpositive_assets: usize,
}

struct RowCtx<'a> {
    source: &'a str,
    row: usize,
}

impl RowCtx<'_> {
    fn err(&self, column: &str, message: impl Into<String>) -> Error {
        Error::Malformed {
            source_name: self.source.to_string(),
            row: self.row,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn optional(&self, column: &str, cell: &str) -> Result<Option<f64>> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Ok(None);
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(self.err(column, format!("`{cell}` is not a finite number"))),
        }
    }

    fn required(&self, column: &str, cell: &str) -> Result<f64> {
        self.optional(column, cell)?
            .ok_or_else(|| self.err(column, "value is required"))
    }
}

fn check_header(source: &str, got: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Malformed {
            source_name: source.to_string(),
            row: 1,
            column: "header".to_string(),
            message: format!("expected `{}`, got `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?)
}

/// Reads a panel CSV. Empty feature cells become `None`; rows with non-positive
/// `total_assets` are dropped and counted.
pub fn ingest_panel(path: &Path) -> Result<PanelIngest> {
    let source = path.display().to_string();
    let mut rdr = reader(path)?;
    check_header(&source, rdr.headers()?, &PANEL_HEADER)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut rejected = 0;
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let ctx = RowCtx {
            source: &source,
            row: row.position().map_or(k + 2, |p| p.line() as usize),
        };
        if row.len() != PANEL_HEADER.len() {
            return Err(ctx.err(
                "*",
                format!(
                    "expected {} fields, found {}",
                    PANEL_HEADER.len(),
                    row.len()
                ),
            ));
        }
        let cert = row[0].trim().to_string();
        if cert.is_empty() {
            return Err(ctx.err("cert", "empty identifier"));
        }
        let quarter: QuarterTag = row[1]
            .parse()
            .map_err(|_| ctx.err("quarter", format!("`{}` is not YYYYQn", &row[1])))?;
        let mut features = [None; NUM_FEATURES];
        for (i, slot) in features.iter_mut().enumerate() {
            *slot = ctx.optional(FEATURE_NAMES[i], &row[2 + i])?;
        }
        let total_assets = ctx.required("total_assets", &row[15])?;
        let interbank_assets = ctx.required("interbank_assets", &row[16])?;
        let interbank_liabilities = ctx.required("interbank_liabilities", &row[17])?;
        let tier1_capital = ctx.required("tier1_capital", &row[18])?;
        if interbank_assets < 0.0 {
            return Err(ctx.err("interbank_assets", "must be non-negative"));
        }
        if interbank_liabilities < 0.0 {
            return Err(ctx.err("interbank_liabilities", "must be non-negative"));
        }
        let failed_within_4q = match row[19].trim() {
            "" | "0" => false,
            "1" => true,
            other => return Err(ctx.err("failed_within_4q", format!("`{other}` is not 0 or 1"))),
        };
        if !seen.insert((cert.clone(), quarter)) {
            return Err(Error::DuplicateKey {
                cert,
                quarter: quarter.to_string(),
            });
        }
        if total_assets <= 0.0 {
            rejected += 1;
            continue;
        }
        records.push(InstitutionQuarter {
            cert,
            quarter,
            features,
            total_assets,
            interbank_assets,
            interbank_liabilities,
            tier1_capital,
            failed_within_4q,
        });
    }
    if rejected > 0 {
        log::warn!("{source}: rejected {rejected} rows with non-positive total_assets");
    }
    Ok(PanelIngest {
        records,
        rejected_nonpositive_assets: rejected,
    })
}

/// Reads a macro CSV with one row per consecutive quarter; gaps are forward-filled.
pub fn ingest_macro(path: &Path) -> Result<Vec<MacroState>> {
    let source = path.display().to_string();
    let mut rdr = reader(path)?;
    check_header(&source, rdr.headers()?, &MACRO_HEADER)?;
    let mut out: Vec<MacroState> = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let ctx = RowCtx {
            source: &source,
            row: row.position().map_or(k + 2, |p| p.line() as usize),
        };
        if row.len() != MACRO_HEADER.len() {
            return Err(ctx.err(
                "*",
                format!(
                    "expected {} fields, found {}",
                    MACRO_HEADER.len(),
                    row.len()
                ),
            ));
        }
        let quarter: QuarterTag = row[0]
            .parse()
            .map_err(|_| ctx.err("quarter", format!("`{}` is not YYYYQn", &row[0])))?;
        if let Some(prev) = out.last() {
            if quarter.ordinal() != prev.quarter.ordinal() + 1 {
                return Err(ctx.err(
                    "quarter",
                    format!("{quarter} does not follow {} consecutively", prev.quarter),
                ));
            }
        }
        let mut z = [0.0; NUM_MACRO];
        for (i, slot) in z.iter_mut().enumerate() {
            *slot = match ctx.optional(MACRO_NAMES[i], &row[1 + i])? {
                Some(v) => v,
                None => match out.last() {
                    Some(prev) => prev.z[i],
                    None => {
                        return Err(ctx.err(
                            MACRO_NAMES[i],
                            "missing in the first quarter; nothing to carry forward",
                        ))
                    }
                },
            };
        }
        out.push(MacroState { quarter, z });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_panel(path: &Path, records: &[InstitutionQuarter]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PANEL_HEADER)?;
    for r in records {
        let mut row = Vec::with_capacity(PANEL_HEADER.len());
        row.push(r.cert.clone());
        row.push(r.quarter.to_string());
        row.extend(r.features.iter().map(|f| fmt_opt(*f)));
        row.push(r.total_assets.to_string());
        row.push(r.interbank_assets.to_string());
        row.push(r.interbank_liabilities.to_string());
        row.push(r.tier1_capital.to_string());
        row.push(if r.failed_within_4q { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_macro(path: &Path, states: &[MacroState]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MACRO_HEADER)?;
    for s in states {
        let mut row = vec![s.quarter.to_string()];
        row.extend(s.z.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
