use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{op}: non-finite score {s}"
        )));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties counting one
/// half, via the Mann-Whitney rank sum. Tie groups get their average rank; doubled
/// ranks keep the statistic in integers until the final division.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths("auroc", scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "auroc needs both classes, got {p} positive and {n} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_x2: u64 = 0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        // Ranks k+1..=end share the doubled average rank k+1+end.
        let doubled = (k + 1 + end) as u64;
        let pos = order[k..end].iter().filter(|&&i| labels[i]).count() as u64;
        rank_sum_x2 += doubled * pos;
        k = end;
    }
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

/// Average precision: mean over positives of the precision at the positive's rank,
/// ranking by descending score. Within a tie group positives are placed after
/// negatives, so ties never help.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths("auprc", scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return Err(Error::InvalidArgument(
            "auprc needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(labels[a].cmp(&labels[b]))
    });
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts at `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (
            self.tp as f64,
            self.fp as f64,
            self.fn_ as f64,
            self.tn as f64,
        );
        let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if d == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / d.sqrt()
        }
    }
}

pub fn f1_mcc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    check_lengths("f1_mcc", scores, labels)?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("f1_mcc on an empty set".into()));
    }
    let c = Confusion::at(scores, labels, threshold);
    Ok((c.f1(), c.mcc()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn compute(self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
        }
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const REDRAW_ATTEMPTS: usize = 10;

/// Linear-interpolated percentile of sorted values, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile interval of `metric` over i.i.d. resamples of the instances.
///
/// Resample `b` draws from its own ChaCha8 stream of `seed`, so the interval does
/// not depend on how resamples are scheduled. A single-class resample is redrawn up
/// to 10 times and then skipped; more than half skipped is an error.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    metric: Metric,
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_lengths("bootstrap_ci", scores, labels)?;
    let n = scores.len();
    if n == 0 || n_resamples == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap needs instances and resamples".into(),
        ));
    }
    let draws = crate::par::map_range(n_resamples, |b| -> Result<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut s = vec![0.0; n];
        let mut l = vec![false; n];
        for _ in 0..REDRAW_ATTEMPTS {
            for k in 0..n {
                let i = rng.gen_range(0..n);
                s[k] = scores[i];
                l[k] = labels[i];
            }
            let pos = l.iter().filter(|&&v| v).count();
            if pos > 0 && pos < n {
                return metric.compute(&s, &l).map(Some);
            }
        }
        Ok(None)
    });
    let mut values = Vec::with_capacity(n_resamples);
    let mut skipped = 0;
    for d in draws {
        match d? {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if 2 * skipped > n_resamples || values.is_empty() {
        return Err(Error::Data(format!(
            "{skipped} of {n_resamples} bootstrap resamples were single-class"
        )));
    }
    if skipped > 0 {
        log::warn!("bootstrap skipped {skipped} single-class resamples");
    }
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 2.5), percentile(&values, 97.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertTier {
    #[serde(rename = "NORMAL")]
    Normal,
    #[serde(rename = "ELEVATED")]
    Elevated,
    #[serde(rename = "HIGH_ALERT")]
    HighAlert,
    #[serde(rename = "CRITICAL")]
    Critical,
}

impl AlertTier {
    pub const ALL: [AlertTier; 4] = [
        AlertTier::Normal,
        AlertTier::Elevated,
        AlertTier::HighAlert,
        AlertTier::Critical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlertTier::Normal => "NORMAL",
            AlertTier::Elevated => "ELEVATED",
            AlertTier::HighAlert => "HIGH_ALERT",
            AlertTier::Critical => "CRITICAL",
        }
    }
}

impl fmt::Display for AlertTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supervisory tier of a risk score: boundaries at 0.30, 0.50 and 0.65, each
/// belonging to the higher tier.
pub fn alert_tier(r: f64) -> Result<AlertTier> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "risk score {r} outside [0, 1]"
        )));
    }
    Ok(if r >= 0.65 {
        AlertTier::Critical
    } else if r >= 0.50 {
        AlertTier::HighAlert
    } else if r >= 0.30 {
        AlertTier::Elevated
    } else {
        AlertTier::Normal
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auroc_ci_low: f64,
    pub auroc_ci_high: f64,
    pub n: usize,
    pub n_positive: usize,
    pub threshold: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// All test metrics of one scored set, with a bootstrap AUROC interval.
pub fn metric_report(scores: &[f64], labels: &[bool], seed: u64) -> Result<MetricReport> {
    let auroc_v = auroc(scores, labels)?;
    let auprc_v = auprc(scores, labels)?;
    let (f1, mcc) = f1_mcc(scores, labels, DEFAULT_THRESHOLD)?;
    let (lo, hi) = bootstrap_ci(scores, labels, Metric::Auroc, BOOTSTRAP_RESAMPLES, seed)?;
    Ok(MetricReport {
        auroc: auroc_v,
        auprc: auprc_v,
        f1,
        mcc,
        auroc_ci_low: lo.min(auroc_v),
        auroc_ci_high: hi.max(auroc_v),
        n: scores.len(),
        n_positive: labels.iter().filter(|&&l| l).count(),
        threshold: DEFAULT_THRESHOLD,
    })
}
