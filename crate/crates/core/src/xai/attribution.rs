use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::panel::QuarterTag;

/// Temporal attention of one scored institution-quarter, oldest history quarter first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttribution {
    pub cert: String,
    pub quarter: QuarterTag,
    pub weights: Vec<(QuarterTag, f64)>,
}

/// The β weights exactly as the forward pass produced them.
pub fn extract_temporal_attention(
    pred: &Prediction,
    cert: &str,
    quarter: QuarterTag,
) -> Result<TemporalAttribution> {
    let node = pred
        .get(cert, quarter)
        .ok_or_else(|| Error::InvalidArgument(format!("cert {cert} was not scored in {quarter}")))?;
    let beta = node.beta.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "run {} has no temporal attention (ablated)",
            pred.run_id
        ))
    })?;
    if beta.len() != node.history.len() {
        return Err(Error::Invariant(format!(
            "cert {cert} in {quarter}: {} weights for {} history quarters",
            beta.len(),
            node.history.len()
        )));
    }
    Ok(TemporalAttribution {
        cert: cert.to_string(),
        quarter,
        weights: node.history.iter().copied().zip(beta.iter().copied()).collect(),
    })
}

pub const ATTRIBUTION_HEADER: &str = "cert,quarter,history_quarter,position,beta";

/// Long-format β table; `position` counts back from the scored quarter (0 = current).
/// Writes only the header when the run has no temporal attention.
pub fn write_attributions(path: &Path, pred: &Prediction) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{ATTRIBUTION_HEADER}")?;
    for q in &pred.quarters {
        for n in &q.nodes {
            let Some(beta) = &n.beta else { continue };
            let l = beta.len();
            for (k, (h, b)) in n.history.iter().zip(beta).enumerate() {
                writeln!(w, "{},{},{},{},{}", n.cert, q.quarter, h, l - 1 - k, b)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
