use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::importance::FeatureImportance;
use crate::error::{Error, Result};
use crate::eval::{alert_tier, AlertTier};
use crate::model::Prediction;
use crate::panel::QuarterTag;

/// β columns in the report; the last one is the scored quarter itself.
pub const REPORT_BETA_SLOTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cert: String,
    pub quarter: QuarterTag,
    pub risk_score: f64,
    pub alert_tier: AlertTier,
    pub label: bool,
    pub top_features: [String; 2],
    /// Oldest first, as produced by the model.
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCount {
    pub quarter: QuarterTag,
    /// Indexed like [`AlertTier::ALL`].
    pub counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub run_id: String,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<TierCount>,
    /// Kept for the precision-recall plot data.
    scores: Vec<(f64, bool)>,
}

/// Rows sorted by quarter, then descending score (cert breaks ties), one tier summary
/// per quarter. Both inputs must come from the same model run.
pub fn risk_report(pred: &Prediction, importance: &FeatureImportance) -> Result<RiskReport> {
    if pred.run_id != importance.run_id {
        return Err(Error::InvalidArgument(format!(
            "predictions from run `{}` but importances from run `{}`",
            pred.run_id, importance.run_id
        )));
    }
    let top = |k: usize| importance.entries.get(k).map(|e| e.feature.clone()).unwrap_or_default();
    let top_features = [top(0), top(1)];
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut scores = Vec::new();
    for q in &pred.quarters {
        let mut counts = [0usize; 4];
        for n in &q.nodes {
            let tier = alert_tier(n.score)?;
            counts[AlertTier::ALL.iter().position(|t| *t == tier).expect("known tier")] += 1;
            scores.push((n.score, n.label));
            rows.push(ReportRow {
                cert: n.cert.clone(),
                quarter: q.quarter,
                risk_score: n.score,
                alert_tier: tier,
                label: n.label,
                top_features: top_features.clone(),
                beta: n.beta.clone(),
            });
        }
        summary.push(TierCount { quarter: q.quarter, counts });
    }
    rows.sort_by(|a, b| {
        a.quarter
            .cmp(&b.quarter)
            .then(b.risk_score.total_cmp(&a.risk_score))
            .then_with(|| a.cert.cmp(&b.cert))
    });
    summary.sort_by_key(|s| s.quarter);
    Ok(RiskReport { run_id: pred.run_id.clone(), rows, summary, scores })
}

impl RiskReport {
    pub fn beta_slots(&self) -> usize {
        self.rows
            .iter()
            .filter_map(|r| r.beta.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0)
            .max(REPORT_BETA_SLOTS)
    }

    pub fn header(&self) -> String {
        let mut h = String::from("cert,quarter,risk_score,alert_tier,label,top_feature_1,top_feature_2");
        for k in 1..=self.beta_slots() {
            h.push_str(&format!(",beta_q{k}"));
        }
        h
    }

    /// β right-aligned so the last column is the scored quarter; missing slots empty.
    pub fn write_rows(&self, path: &Path) -> Result<()> {
        let slots = self.beta_slots();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", self.header())?;
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                r.cert,
                r.quarter,
                r.risk_score,
                r.alert_tier,
                u8::from(r.label),
                r.top_features[0],
                r.top_features[1]
            )?;
            let beta = r.beta.as_deref().unwrap_or(&[]);
            for _ in beta.len()..slots {
                write!(w, ",")?;
            }
            for b in beta {
                write!(w, ",{b}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let names: Vec<&str> = AlertTier::ALL.iter().map(|t| t.as_str()).collect();
        writeln!(w, "quarter,{},total", names.join(","))?;
        for s in &self.summary {
            let c = s.counts;
            writeln!(w, "{},{},{},{},{},{}", s.quarter, c[0], c[1], c[2], c[3], c.iter().sum::<usize>())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Data behind the risk-trajectory, β-decay and precision-recall plots. No image
    /// backend is built in, so these are CSV files and a warning says so.
    pub fn write_plot_data(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        log::warn!("no plotting backend available; writing plot data as CSV only");
        let traj = dir.join("plot_risk_trajectories.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&traj)?);
        writeln!(w, "cert,quarter,risk_score")?;
        let mut by_cert: Vec<&ReportRow> = self.rows.iter().collect();
        by_cert.sort_by(|a, b| a.cert.cmp(&b.cert).then(a.quarter.cmp(&b.quarter)));
        for r in by_cert {
            writeln!(w, "{},{},{}", r.cert, r.quarter, r.risk_score)?;
        }
        w.flush()?;

        // Mean β by position back from the scored quarter, over full-length histories.
        let decay = dir.join("plot_beta_decay.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&decay)?);
        writeln!(w, "lag,mean_beta,n")?;
        let full = self.beta_slots();
        let mut sums = vec![0.0; full];
        let mut n = 0usize;
        for b in self.rows.iter().filter_map(|r| r.beta.as_ref()).filter(|b| b.len() == full) {
            for (s, v) in sums.iter_mut().zip(b.iter().rev()) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            for (lag, s) in sums.iter().enumerate() {
                writeln!(w, "{lag},{},{n}", s / n as f64)?;
            }
        }
        w.flush()?;

        let pr = dir.join("plot_pr_curve.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&pr)?);
        writeln!(w, "threshold,precision,recall")?;
        let mut sorted = self.scores.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let positives = sorted.iter().filter(|s| s.1).count();
        if positives > 0 {
            let mut tp = 0usize;
            for (k, (score, label)) in sorted.iter().enumerate() {
                tp += usize::from(*label);
                let last_of_tie = sorted.get(k + 1).map_or(true, |n| n.0 != *score);
                if last_of_tie {
                    writeln!(w, "{score},{},{}", tp as f64 / (k + 1) as f64, tp as f64 / positives as f64)?;
                }
            }
        }
        w.flush()?;
        Ok(vec![traj, decay, pr])
    }

    /// `report.csv`, `tier_summary.csv` and the plot data files in `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let rows = dir.join("report.csv");
        self.write_rows(&rows)?;
        let summary = dir.join("tier_summary.csv");
        self.write_summary(&summary)?;
        let mut out = vec![rows, summary];
        out.extend(self.write_plot_data(dir)?);
        Ok(out)
    }
}
