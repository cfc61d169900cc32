use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    label, InstitutionQuarter, MacroState, QuarterTag, NPL, NUM_FEATURES, NUM_MACRO, ROA, TIER1,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_institutions: usize,
    pub n_quarters: usize,
    /// Target share of distressed institution-quarters.
    pub target_distress_rate: f64,
    pub start_quarter: QuarterTag,
    /// Probability that a non-label feature cell is missing.
    pub missing_rate: f64,
    /// Probability that a distress episode ends in failure rather than recovery.
    pub failure_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_institutions: 200,
            n_quarters: 20,
            target_distress_rate: 0.09,
            start_quarter: QuarterTag { year: 2010, q: 1 },
            missing_rate: 0.01,
            failure_share: 0.35,
        }
    }
}

const BURN_IN: usize = 12;
const AR_COEF: f64 = 0.7;
/// Damage-to-ratio loadings: a fully damaged bank loses 1.9pp of ROA and gains 2.6pp of NPL.
/// Baselines vary widely, so a strong bank can fail without breaching either threshold;
/// only the decline against its own history gives it away.
const ROA_LOADING: f64 = 2.2;
const NPL_LOADING: f64 = 3.0;
/// Severity ranges of episodes that end in failure and of those that recover.
const FAIL_SEVERITY: (f64, f64) = (0.9, 1.3);
const RECOVER_SEVERITY: (f64, f64) = (0.1, 0.35);

/// (low, high) of each feature's bank-level baseline and the AR shock scale.
const FEATURE_PROFILE: [(f64, f64, f64); NUM_FEATURES] = [
    (9.0, 16.0, 0.25),   // tier1_capital_ratio
    (11.0, 18.0, 0.25),  // total_capital_ratio
    (7.0, 11.0, 0.15),   // leverage_ratio
    (0.2, 4.0, 0.15),    // npl_ratio
    (60.0, 160.0, 4.0),  // provision_coverage_ratio
    (100.0, 350.0, 8.0), // cre_concentration_ratio
    (5.0, 30.0, 1.0),    // liquidity_stress_ratio
    (15.0, 55.0, 1.5),   // uninsured_deposit_share
    (5.0, 30.0, 1.0),    // wholesale_funding_ratio
    (60.0, 100.0, 1.5),  // loan_to_deposit_ratio
    (-0.5, 3.0, 0.12),   // roa
    (2.5, 4.0, 0.08),    // net_interest_margin
    (0.0, 8.0, 0.3),     // fair_value_loss_ratio
];

const MACRO_PROFILE: [(f64, f64); NUM_MACRO] = [
    (18.0, 0.3), // vix
    (1.0, 0.05), // yield_spread_10y2y
    (2.0, 0.05), // fed_funds_rate
    (2.0, 0.15), // gdp_growth
    (5.0, 0.2),  // m2_growth
    (1.5, 0.05), // credit_spread
    (5.0, 0.05), // unemployment_rate
];

#[derive(Clone)]
struct Profile {
    base: [f64; NUM_FEATURES],
    log_assets: f64,
    risk_weight: f64,
    ib_asset_share: f64,
    ib_liab_share: f64,
}

impl Profile {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut base = [0.0; NUM_FEATURES];
        for (b, (lo, hi, _)) in base.iter_mut().zip(FEATURE_PROFILE) {
            *b = rng.gen_range(lo..hi);
        }
        let z: f64 = StandardNormal.sample(rng);
        Self {
            base,
            log_assets: (2.0e9f64).ln() + 1.5 * z,
            risk_weight: rng.gen_range(0.55..0.8),
            ib_asset_share: rng.gen_range(0.02..0.06),
            ib_liab_share: rng.gen_range(0.02..0.06),
        }
    }
}

/// Random draws for one slot-quarter, taken in a fixed order whatever the hazard so
/// that calibration sees the same randomness at every trial hazard.
struct QuarterDraws {
    onset: f64,
    decline: usize,
    plateau: usize,
    recovery: usize,
    /// Uniform draw mapped onto the severity range of the episode's outcome.
    severity: f64,
    fails: f64,
    shocks: [f64; NUM_FEATURES],
    missing: [f64; NUM_FEATURES],
    size_shock: f64,
    replacement: Profile,
}

impl QuarterDraws {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let onset = rng.gen();
        let decline = rng.gen_range(3..=5);
        let plateau = rng.gen_range(1..=3);
        let recovery = rng.gen_range(2..=4);
        let severity = rng.gen();
        let fails = rng.gen();
        let mut shocks = [0.0; NUM_FEATURES];
        for s in &mut shocks {
            *s = StandardNormal.sample(rng);
        }
        let mut missing = [0.0; NUM_FEATURES];
        for m in &mut missing {
            *m = rng.gen();
        }
        let size_shock = StandardNormal.sample(rng);
        let replacement = Profile::draw(rng);
        Self {
            onset,
            decline,
            plateau,
            recovery,
            severity,
            fails,
            shocks,
            missing,
            size_shock,
            replacement,
        }
    }
}

struct Slot {
    initial: Profile,
    draws: Vec<QuarterDraws>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl Slot {
    /// Simulates one institution slot; a failed bank is replaced by a new entrant.
    fn simulate(
        &self,
        slot: usize,
        cfg: &SynthConfig,
        hazard: f64,
        out: &mut Vec<(usize, InstitutionQuarter, f64)>,
    ) {
        let mut profile = self.initial.clone();
        let mut generation = 0usize;
        let mut ar = [0.0; NUM_FEATURES];
        let mut size_ar = 0.0;
        let mut schedule: VecDeque<f64> = VecDeque::new();
        let mut fail_at: Option<usize> = None;
        for (t, d) in self.draws.iter().enumerate() {
            if schedule.is_empty() && fail_at.is_none() && d.onset < hazard {
                let fails = d.fails < cfg.failure_share;
                let (lo, hi) = if fails {
                    FAIL_SEVERITY
                } else {
                    RECOVER_SEVERITY
                };
                let s = lo + (hi - lo) * d.severity;
                schedule.extend((1..=d.decline).map(|k| s * k as f64 / d.decline as f64));
                schedule.extend(std::iter::repeat(s).take(d.plateau));
                if fails {
                    fail_at = Some(t + d.decline + d.plateau - 1);
                } else {
                    schedule
                        .extend((1..d.recovery).map(|k| s * (1.0 - k as f64 / d.recovery as f64)));
                }
            }
            let damage = schedule.pop_front().unwrap_or(0.0);
            for f in 0..NUM_FEATURES {
                ar[f] = AR_COEF * ar[f] + FEATURE_PROFILE[f].2 * d.shocks[f];
            }
            size_ar = 0.9 * size_ar + 0.02 * d.size_shock;
            if t >= BURN_IN {
                let mut features = [None; NUM_FEATURES];
                for f in 0..NUM_FEATURES {
                    let mut v = profile.base[f] + ar[f];
                    if f == ROA {
                        v -= ROA_LOADING * damage;
                    } else if f == NPL {
                        v += NPL_LOADING * damage;
                    } else if f == TIER1 {
                        v = v.max(6.5);
                    }
                    let observed =
                        f == ROA || f == NPL || f == TIER1 || d.missing[f] >= cfg.missing_rate;
                    features[f] = observed.then_some(round4(v));
                }
                let total_assets = (profile.log_assets + 0.005 * t as f64 + size_ar)
                    .exp()
                    .round();
                let tier1_ratio = features[TIER1].expect("tier1 always observed");
                let rec = InstitutionQuarter {
                    cert: (10_000 + generation * cfg.n_institutions + slot).to_string(),
                    quarter: cfg.start_quarter.offset((t - BURN_IN) as i64),
                    features,
                    total_assets,
                    interbank_assets: total_assets * profile.ib_asset_share,
                    interbank_liabilities: 0.0,
                    tier1_capital: tier1_ratio / 100.0 * profile.risk_weight * total_assets,
                    failed_within_4q: fail_at.is_some_and(|f| f - t <= 3),
                };
                out.push((t - BURN_IN, rec, total_assets * profile.ib_liab_share));
            }
            if fail_at == Some(t) {
                profile = d.replacement.clone();
                generation += 1;
                ar = [0.0; NUM_FEATURES];
                size_ar = 0.0;
                schedule.clear();
                fail_at = None;
            }
        }
    }
}

fn simulate_panel(slots: &[Slot], cfg: &SynthConfig, hazard: f64) -> Vec<InstitutionQuarter> {
    let mut rows = Vec::with_capacity(cfg.n_institutions * cfg.n_quarters);
    for (k, s) in slots.iter().enumerate() {
        s.simulate(k, cfg, hazard, &mut rows);
    }
    // Scale liabilities so both marginals share the same quarterly total.
    for q in 0..cfg.n_quarters {
        let (mut assets, mut liabs) = (0.0, 0.0);
        for (t, r, l) in &rows {
            if *t == q {
                assets += r.interbank_assets;
                liabs += l;
            }
        }
        let scale = if liabs > 0.0 { assets / liabs } else { 0.0 };
        for (t, r, l) in rows.iter_mut() {
            if *t == q {
                r.interbank_liabilities = *l * scale;
            }
        }
    }
    let mut records: Vec<InstitutionQuarter> = rows.into_iter().map(|(_, r, _)| r).collect();
    records.sort_by(|a, b| a.quarter.cmp(&b.quarter).then_with(|| a.cert.cmp(&b.cert)));
    records
}

fn distress_rate(records: &[InstitutionQuarter]) -> f64 {
    let n = records.iter().filter(|r| label(r).distressed()).count();
    n as f64 / records.len().max(1) as f64
}

fn synthesize_macro(cfg: &SynthConfig, seed: u64) -> Vec<MacroState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut ar = [0.0; NUM_MACRO];
    (0..BURN_IN + cfg.n_quarters)
        .filter_map(|t| {
            let mut z = [0.0; NUM_MACRO];
            for k in 0..NUM_MACRO {
                let e: f64 = StandardNormal.sample(&mut rng);
                ar[k] = 0.8 * ar[k] + MACRO_PROFILE[k].1 * e;
                z[k] = round4(MACRO_PROFILE[k].0 + ar[k]);
            }
            (t >= BURN_IN).then(|| MacroState {
                quarter: cfg.start_quarter.offset((t - BURN_IN) as i64),
                z,
            })
        })
        .collect()
}

/// Generates a panel with planted multi-quarter ROA/NPL deterioration episodes and a
/// low-variance macro series. Deterministic for a fixed seed.
///
/// Each institution follows a latent damage path: healthy until an episode starts,
/// then damage ramps up over 3-5 quarters, plateaus, and either recovers or ends in
/// failure. `failed_within_4q` is set on the four quarters up to and including the
/// failure quarter; the failed bank is then replaced by a new entrant. The episode
/// hazard is calibrated by bisection so that the realised distress rate meets the target.
pub fn synthesize_panel(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<InstitutionQuarter>, Vec<MacroState>)> {
    if !(cfg.target_distress_rate > 0.0 && cfg.target_distress_rate < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "target distress rate {} must lie in (0, 0.5)",
            cfg.target_distress_rate
        )));
    }
    if cfg.n_institutions < 2 || cfg.n_quarters == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 institutions and 1 quarter, got {} and {}",
            cfg.n_institutions, cfg.n_quarters
        )));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) || !(0.0..=1.0).contains(&cfg.failure_share) {
        return Err(Error::InvalidArgument(
            "missing_rate must lie in [0,1) and failure_share in [0,1]".into(),
        ));
    }
    let slots: Vec<Slot> = (0..cfg.n_institutions)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let initial = Profile::draw(&mut rng);
            let draws = (0..BURN_IN + cfg.n_quarters)
                .map(|_| QuarterDraws::draw(&mut rng))
                .collect();
            Slot { initial, draws }
        })
        .collect();

    let target = cfg.target_distress_rate;
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    let mut best: Option<(f64, Vec<InstitutionQuarter>)> = None;
    for _ in 0..40 {
        let h = 0.5 * (lo + hi);
        let records = simulate_panel(&slots, cfg, h);
        let rate = distress_rate(&records);
        let err = (rate - target).abs();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, records));
        }
        if err < 0.002 {
            break;
        }
        if rate < target {
            lo = h;
        } else {
            hi = h;
        }
    }
    let (err, records) = best.expect("at least one trial");
    if err > 0.02 {
        return Err(Error::Data(format!(
            "could not calibrate distress rate to {target} (closest miss {err:.4})"
        )));
    }
    Ok((records, synthesize_macro(cfg, seed)))
}
