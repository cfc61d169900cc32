//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 5 to 8 and 10 share one synthetic panel and one set of trained models
//! (FULL and three ablations over five seeds), built once up front.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surveil_core::autodiff::{BatchNormState, DropoutKey, Tape, Tensor};
use surveil_core::eval::{
    alert_tier, auprc, auroc, prepare_dataset, run_comparison, write_results, AlertTier, Cell, SplitSpec,
};
use surveil_core::model::{
    focal_loss, focal_loss_value, init_params, predict, quarter_loss, train, Ablation, Binding, Dataset,
    EdgeIndex, GraphSnapshot, ModelDims, Prediction, TrainConfig,
};
use surveil_core::netrecon::{ras_reconstruct, write_edges, Edge, EdgeList, ReconSettings};
use surveil_core::panel::{synthesize_panel, QuarterTag, SynthConfig, NUM_FEATURES, NUM_MACRO};
use surveil_core::xai::{
    permutation_importance, risk_report, write_attributions, write_importance, FeatureImportance, DEFAULT_REPEATS,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn run_guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    panic::catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

// ---------------------------------------------------------------------------
// 1. RAS

fn criterion_ras() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes = [3usize, 10, 50];
    let mut worst_rel: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    let mut failures = Vec::new();
    for k in 0..100 {
        let n = sizes[k % 3];
        // Marginals of a random zero-diagonal matrix with entries spanning four
        // orders of magnitude are feasible by construction.
        let mut rows = vec![0.0; n];
        let mut cols = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = 10f64.powf(rng.gen_range(-2.0..2.0));
                    rows[i] += v;
                    cols[j] += v;
                }
            }
        }
        let scale: f64 = rows.iter().sum::<f64>() / cols.iter().sum::<f64>();
        cols.iter_mut().for_each(|c| *c *= scale);
        let t0 = Instant::now();
        let out = ras_reconstruct(&rows, &cols, 1e-10, 10_000);
        let dt = t0.elapsed();
        slowest = slowest.max(dt);
        let Ok(out) = out else {
            failures.push(format!("instance {k} (n={n}) did not converge"));
            continue;
        };
        let m = &out.matrix;
        for i in 0..n {
            let r: f64 = (0..n).map(|j| m.get(i, j)).sum();
            let c: f64 = (0..n).map(|j| m.get(j, i)).sum();
            worst_rel = worst_rel.max((r - rows[i]).abs() / rows[i]).max((c - cols[i]).abs() / cols[i]);
            if m.get(i, i) != 0.0 {
                failures.push(format!("instance {k}: diagonal {i} is {}", m.get(i, i)));
            }
        }
        if dt >= Duration::from_secs(1) {
            failures.push(format!("instance {k} (n={n}) took {dt:?}"));
        }
    }
    if worst_rel > 1e-8 {
        failures.push(format!("marginal error {worst_rel:.2e}"));
    }
    match ras_reconstruct(&[10.0, 20.0], &[20.0, 10.0], 1e-10, 10_000) {
        Ok(o) => {
            let got = [o.matrix.get(0, 0), o.matrix.get(0, 1), o.matrix.get(1, 0), o.matrix.get(1, 1)];
            let want = [0.0, 10.0, 20.0, 0.0];
            if got.iter().zip(want).any(|(g, w)| (g - w).abs() > 1e-8 * w.max(1.0)) {
                failures.push(format!("n=2 gave {got:?}"));
            }
        }
        Err(e) => failures.push(format!("n=2 failed: {e}")),
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "100 instances, worst marginal rel error {worst_rel:.2e}, slowest solve {:.1} ms{}",
            slowest.as_secs_f64() * 1e3,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. End-to-end gradient check

/// 5 nodes per quarter over 3 quarters; membership changes so histories have
/// lengths 1, 2 and 3 in the last quarter.
fn toy_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let members = [["a", "b", "c", "d", "x"], ["b", "a", "c", "d", "x"], ["a", "b", "e", "c", "x"]];
    let start = QuarterTag::new(2019, 1).unwrap();
    let snapshots = members
        .iter()
        .enumerate()
        .map(|(t, certs)| {
            let n = certs.len();
            let x = Tensor::new(n, NUM_FEATURES, (0..n * NUM_FEATURES).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .unwrap();
            let mut edges = Vec::new();
            for src in 0..n {
                for dst in 0..n {
                    if src != dst && rng.gen_bool(0.4) {
                        edges.push(Edge { src, dst, weight: rng.gen_range(0.05..1.5) });
                    }
                }
            }
            let z: [f64; NUM_MACRO] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            GraphSnapshot {
                quarter: start.offset(t as i64),
                certs: certs.iter().map(|c| c.to_string()).collect(),
                x,
                edges: EdgeList { n, edges },
                z_raw: z,
                z,
                labels: vec![true, false, false, true, false],
            }
        })
        .collect();
    Dataset::from_snapshots(snapshots)
}

fn criterion_gradients() -> Verdict {
    let data = toy_dataset();
    let cfg = TrainConfig {
        dims: ModelDims { heads: 2, head_dim: 2, lstm_hidden: 3, lstm_layers: 2, attn_dim: 3, head_hidden: 4 },
        ablation: Ablation::Full,
        dropout: 0.3,
        ..TrainConfig::default()
    };
    // A generic parameter point, away from the small-weight initialisation.
    let mut params = init_params(&cfg.dims, Ablation::Full, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for k in 0..params.len() {
        params.tensor_mut(k).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let idx: Vec<EdgeIndex> = data.snapshots.iter().map(|s| EdgeIndex::new(&s.edges)).collect();
    let key = DropoutKey { seed: 3, epoch: 1, step: 2, layer: 0 };
    let loss_of = |p: &surveil_core::autodiff::ParamStore| -> (Tape, Binding, surveil_core::autodiff::Var) {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, p, true);
        let mut bn = BatchNormState::new(cfg.dims.head_hidden);
        let l = quarter_loss(&mut tape, &bind, &data, &idx, &cfg, 2, &mut bn, key).unwrap();
        (tape, bind, l)
    };
    let (tape, bind, loss) = loss_of(&params);
    let grads = tape.backward(loss).unwrap();
    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (k, &v) in bind.vars().iter().enumerate() {
        let shape = params.tensor(k).shape();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensor_mut(k).data_mut()[e] += delta;
                let (t, _, l) = loss_of(&p);
                t.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, params.name(k).to_string());
        }
    }
    Verdict::new(
        worst.0 < 1e-4,
        format!("{} tensors, worst relative error {:.2e} ({})", params.len(), worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------
// 3. Focal loss reduction

fn criterion_focal() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut ps = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(1e-4..1.0 - 1e-4);
        let y = rng.gen_bool(0.5);
        let bce = -(if y { p.ln() } else { (1.0 - p).ln() });
        worst = worst.max((focal_loss_value(&[p], &[y], 0.0, 0.5) - 0.5 * bce).abs());
        ps.push(p);
        ys.push(y);
    }
    // The differentiable version over the whole batch.
    let mean_bce: f64 =
        ps.iter().zip(&ys).map(|(&p, &y)| -(if y { p.ln() } else { (1.0 - p).ln() })).sum::<f64>() / 1000.0;
    let mut tape = Tape::new();
    let r = tape.leaf(Tensor::column(&ps), false);
    let l = focal_loss(&mut tape, r, &ys, 0.0, 0.5).unwrap();
    let batch = (tape.value(l).item() - 0.5 * mean_bce).abs();
    Verdict::new(
        worst <= 1e-12 && batch <= 1e-12,
        format!("max per-pair gap {worst:.2e}, batch gap {batch:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

/// Exact average precision as a rational `num / den` over positives in rank order.
fn ap_oracle(ranked: &[bool]) -> f64 {
    let p = ranked.iter().filter(|&&l| l).count() as u128;
    let mut num: u128 = 0;
    let mut den: u128 = 1;
    let mut tp: u128 = 0;
    for (k, &l) in ranked.iter().enumerate() {
        if l {
            tp += 1;
            let d = (k + 1) as u128;
            num = num * d + tp * den;
            den *= d;
        }
    }
    num as f64 / (den * p) as f64
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn criterion_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut instances = 0usize;
    let mut auroc_mismatch = 0usize;
    let mut auprc_worst_ulps = 0u64;
    for n in 2..=8usize {
        // Every label sequence in descending-score order is one distinct instance.
        for mask in 0u32..(1 << n) {
            let ranked: Vec<bool> = (0..n).map(|k| mask >> k & 1 == 1).collect();
            let pos = ranked.iter().filter(|&&l| l).count();
            if pos == 0 || pos == n {
                continue;
            }
            // Present it shuffled with random distinct scores.
            let mut levels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            levels.sort_by(|a, b| b.total_cmp(a));
            levels.dedup();
            if levels.len() < n {
                continue;
            }
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut scores = vec![0.0; n];
            let mut labels = vec![false; n];
            for (rank, &slot) in order.iter().enumerate() {
                scores[slot] = levels[rank];
                labels[slot] = ranked[rank];
            }
            let mut wins = 0u64;
            for i in 0..n {
                for j in i + 1..n {
                    if ranked[i] && !ranked[j] {
                        wins += 1;
                    }
                }
            }
            let auroc_oracle = wins as f64 / (pos * (n - pos)) as f64;
            if auroc(&scores, &labels).unwrap() != auroc_oracle {
                auroc_mismatch += 1;
            }
            auprc_worst_ulps = auprc_worst_ulps.max(ulps(auprc(&scores, &labels).unwrap(), ap_oracle(&ranked)));
            instances += 1;
        }
    }
    let mut invariance_failures = 0;
    for _ in 0..100 {
        let n = rng.gen_range(5..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + s.powi(3)).collect();
        if auroc(&scores, &labels).unwrap() != auroc(&warped, &labels).unwrap() {
            invariance_failures += 1;
        }
    }
    Verdict::new(
        auroc_mismatch == 0 && auprc_worst_ulps <= 4 && invariance_failures == 0,
        format!(
            "{instances} instances (n 2..8): auroc mismatches {auroc_mismatch}, auprc worst gap {auprc_worst_ulps} ulp; \
             monotone invariance failures {invariance_failures}/100"
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared synthetic runs

const PANEL_SEED: u64 = 42;

struct Runs {
    data: Dataset,
    cfg: TrainConfig,
    base_rate: f64,
    macro_std: f64,
    full_time: Duration,
    full: Vec<Cell>,
    ablations: BTreeMap<Ablation, Vec<Cell>>,
    importance: Vec<FeatureImportance>,
    extra_predictions: Vec<Prediction>,
}

fn synthetic() -> (Dataset, SplitSpec) {
    let (panel, macros) = synthesize_panel(&SynthConfig::default(), PANEL_SEED).unwrap();
    prepare_dataset(&panel, &macros, &ReconSettings::default(), None).unwrap()
}

fn build_runs() -> Runs {
    let cfg = TrainConfig::default();
    let t0 = Instant::now();
    let (data, split) = synthetic();
    let full = run_comparison(&data, &split, &cfg, &[Ablation::Full], &cfg.seeds, false).unwrap().cells;
    let full_time = t0.elapsed();
    eprintln!("FULL x{} trained in {:.0} s", cfg.seeds.len(), full_time.as_secs_f64());

    let others = [Ablation::NoTemporal, Ablation::NoMacro, Ablation::PermEdge];
    let cells = run_comparison(&data, &split, &cfg, &others, &cfg.seeds, false).unwrap().cells;
    let mut ablations: BTreeMap<Ablation, Vec<Cell>> = BTreeMap::new();
    for c in cells {
        let a: Ablation = c.config.parse().unwrap();
        ablations.entry(a).or_default().push(c);
    }
    eprintln!("ablations trained at {:.0} s", t0.elapsed().as_secs_f64());

    let test: Vec<usize> = split.test.clone().collect();
    let importance = full
        .iter()
        .map(|c| permutation_importance(c.model.as_ref().unwrap(), &data, &test, DEFAULT_REPEATS, c.seed).unwrap())
        .collect();
    eprintln!("importance done at {:.0} s", t0.elapsed().as_secs_f64());

    // Every scorable quarter with the first FULL model, for the distribution checks.
    let scorable: Vec<usize> = (0..data.snapshots.len()).collect();
    let extra_predictions = vec![predict(full[0].model.as_ref().unwrap(), &data, &scorable).unwrap()];

    let labels: Vec<bool> = data.snapshots.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let base_rate = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    let mut macro_std: f64 = 0.0;
    for k in 0..NUM_MACRO {
        let v: Vec<f64> = data.snapshots.iter().map(|s| s.z_raw[k]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        macro_std = macro_std.max((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt());
    }
    Runs { data, cfg, base_rate, macro_std, full_time, full, ablations, importance, extra_predictions }
}

fn by_seed(cells: &[Cell]) -> BTreeMap<u64, f64> {
    cells.iter().map(|c| (c.seed, c.report.auprc)).collect()
}

// ---------------------------------------------------------------------------
// 5. Attention distributions

fn criterion_distributions(runs: &Runs) -> Verdict {
    let mut worst_alpha: f64 = 0.0;
    let mut worst_beta: f64 = 0.0;
    let mut rows = 0usize;
    let mut betas = 0usize;
    let preds = runs
        .full
        .iter()
        .chain(runs.ablations.values().flatten())
        .filter_map(|c| c.prediction.as_ref())
        .chain(&runs.extra_predictions);
    for pred in preds {
        for q in &pred.quarters {
            let n = q.nodes.len();
            for alpha in &q.spatial_alpha {
                let heads = alpha.cols();
                let mut sums = vec![0.0; n * heads];
                for (e, &d) in q.edge_dst.iter().enumerate() {
                    for h in 0..heads {
                        sums[d * heads + h] += alpha.data()[e * heads + h];
                    }
                }
                rows += sums.len();
                worst_alpha = sums.iter().fold(worst_alpha, |w, s| w.max((s - 1.0).abs()));
            }
            for node in &q.nodes {
                if let Some(b) = &node.beta {
                    betas += 1;
                    worst_beta = worst_beta.max((b.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    Verdict::new(
        worst_alpha <= 1e-10 && worst_beta <= 1e-6 && rows > 0 && betas > 0,
        format!(
            "{rows} attention rows, worst |sum-1| {worst_alpha:.1e}; {betas} beta vectors, worst {worst_beta:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Signal recovery

fn criterion_signal(runs: &Runs) -> Verdict {
    let test_rate = runs.full[0].report.n_positive as f64 / runs.full[0].report.n as f64;
    let ok = runs.full.iter().filter(|c| c.report.auprc >= 0.85 && c.report.auprc >= 3.0 * test_rate).count();
    let limit = Duration::from_secs(600);
    let per_seed: Vec<String> = runs.full.iter().map(|c| format!("{}:{:.3}", c.seed, c.report.auprc)).collect();
    Verdict::new(
        ok >= 4 && runs.full_time < limit,
        format!(
            "AUPRC {} ({ok}/5 pass); panel base rate {:.3}, test rate {test_rate:.3}; FULL runtime {:.0} s",
            per_seed.join(" "),
            runs.base_rate,
            runs.full_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Ablation directions

fn criterion_ablations(runs: &Runs) -> Verdict {
    let full = by_seed(&runs.full);
    let full_mean = full.values().sum::<f64>() / full.len() as f64;
    let mean_of = |a: Ablation| {
        let m = by_seed(&runs.ablations[&a]);
        (m.values().sum::<f64>() / m.len() as f64, m)
    };
    let (_, nt) = mean_of(Ablation::NoTemporal);
    let worse = full.iter().filter(|(s, v)| **v > nt[s]).count();
    let (nm_mean, _) = mean_of(Ablation::NoMacro);
    let (pe_mean, _) = mean_of(Ablation::PermEdge);
    let d_nm = full_mean - nm_mean;
    let d_pe = full_mean - pe_mean;
    let nt_list: Vec<String> = full.iter().map(|(s, v)| format!("{s}:{:+.3}", v - nt[s])).collect();
    Verdict::new(
        worse >= 4 && d_nm.abs() < 0.02 && d_pe.abs() < 0.03,
        format!(
            "FULL-NO_TEMPORAL {} ({worse}/5 positive); FULL-NO_MACRO {d_nm:+.4} (macro max std {:.3}); FULL-PERM_EDGE {d_pe:+.4}",
            nt_list.join(" "),
            runs.macro_std
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Explanation sanity

fn criterion_xai(runs: &Runs) -> Verdict {
    let mut top_ok = 0;
    let mut tops = Vec::new();
    for imp in &runs.importance {
        let top: Vec<&str> = imp.entries.iter().take(2).map(|e| e.feature.as_str()).collect();
        if top.contains(&"roa") && top.contains(&"npl_ratio") {
            top_ok += 1;
        }
        tops.push(top.join("+"));
    }
    // Largest spread of any history position's beta across institutions with a full window.
    let mut spreads = Vec::new();
    for c in &runs.full {
        let pred = c.prediction.as_ref().unwrap();
        let window = runs.cfg.history_window;
        let full_len: Vec<&Vec<f64>> = pred
            .quarters
            .iter()
            .flat_map(|q| q.nodes.iter().filter_map(|n| n.beta.as_ref()))
            .filter(|b| b.len() == window)
            .collect();
        let spread = (0..window)
            .map(|p| {
                let (lo, hi) = full_len
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b[p]), hi.max(b[p])));
                hi - lo
            })
            .fold(0.0f64, f64::max);
        spreads.push(spread);
    }
    let varied = spreads.iter().all(|&s| s > 1e-6);
    Verdict::new(
        top_ok >= 4 && varied,
        format!(
            "top-2 {} ({top_ok}/5 roa+npl_ratio); beta spread across institutions {}",
            tops.join(" "),
            spreads.iter().map(|s| format!("{s:.2e}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Alert tiers

fn criterion_tiers() -> Verdict {
    use AlertTier::*;
    let grid = [
        (0.0, Normal),
        (0.2999, Normal),
        (0.30, Elevated),
        (0.4999, Elevated),
        (0.50, HighAlert),
        (0.6499, HighAlert),
        (0.65, Critical),
        (1.0, Critical),
    ];
    let wrong: Vec<String> = grid
        .iter()
        .filter_map(|&(r, want)| match alert_tier(r) {
            Ok(got) if got == want => None,
            other => Some(format!("{r} -> {other:?}")),
        })
        .collect();
    let rejects = [-0.01, 1.01, f64::NAN].iter().all(|&r| alert_tier(r).is_err());
    Verdict::new(
        wrong.is_empty() && rejects,
        if wrong.is_empty() { "8 grid points map to their tiers; out-of-range scores rejected".into() } else { wrong.join(", ") },
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn artifacts(dir: &Path, data: &Dataset, cells: &[Cell], imp: &FeatureImportance) {
    let edges = dir.join("edges.csv");
    for s in &data.snapshots {
        write_edges(&edges, s.quarter, &s.certs, &s.edges).unwrap();
    }
    write_results(&dir.join("results.csv"), cells).unwrap();
    let model = cells[0].model.as_ref().unwrap();
    model.save(&dir.join("ckpt.json"), &dir.join("ckpt.meta.json")).unwrap();
    let pred = cells[0].prediction.as_ref().unwrap();
    write_attributions(&dir.join("attributions.csv"), pred).unwrap();
    write_importance(&dir.join("importance.csv"), imp).unwrap();
    risk_report(pred, imp).unwrap().write(&dir.join("report")).unwrap();
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism(runs: &Runs) -> Verdict {
    let first = &runs.full[0];
    let (data, split) = synthetic();
    let test: Vec<usize> = split.test.clone().collect();
    let model = train(&data, &split, &runs.cfg, first.seed).unwrap();
    let pred = predict(&model, &data, &test).unwrap();
    let (scores, labels) = pred.pooled();
    let imp = permutation_importance(&model, &data, &test, DEFAULT_REPEATS, first.seed).unwrap();
    let weight_gap = model.params.max_abs_diff(&first.model.as_ref().unwrap().params).unwrap_or(f64::INFINITY);
    let again = Cell {
        config: first.config.clone(),
        seed: first.seed,
        report: surveil_core::eval::metric_report(&scores, &labels, first.seed).unwrap(),
        scores,
        labels,
        model: Some(model),
        prediction: Some(pred),
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    artifacts(a.path(), &runs.data, std::slice::from_ref(first), &runs.importance[0]);
    artifacts(b.path(), &data, std::slice::from_ref(&again), &imp);
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    Verdict::new(
        weight_gap <= 1e-12 && differing.is_empty() && fa.len() == fb.len(),
        format!(
            "{} files compared, {} differ {:?}; max checkpoint weight gap {weight_gap:.1e}",
            fa.len(),
            differing.len(),
            differing
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |id, name, r: Result<Verdict, String>| {
        let v = r.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        println!("{} criterion {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    record(1, "ras_correctness", run_guarded(criterion_ras));
    record(2, "gradient_integrity", run_guarded(criterion_gradients));
    record(3, "focal_reduction", run_guarded(criterion_focal));
    record(4, "metric_oracles", run_guarded(criterion_metrics));
    record(9, "alert_tiers", run_guarded(criterion_tiers));
    match run_guarded(build_runs) {
        Ok(runs) => {
            record(5, "attention_distributions", run_guarded(|| criterion_distributions(&runs)));
            record(6, "signal_recovery", run_guarded(|| criterion_signal(&runs)));
            record(7, "ablation_directions", run_guarded(|| criterion_ablations(&runs)));
            record(8, "xai_sanity", run_guarded(|| criterion_xai(&runs)));
            record(10, "determinism", run_guarded(|| criterion_determinism(&runs)));
        }
        Err(e) => {
            for (id, name) in [(5, "attention_distributions"), (6, "signal_recovery"), (7, "ablation_directions"), (8, "xai_sanity"), (10, "determinism")] {
                record(id, name, Err(format!("synthetic runs failed: {e}")));
            }
        }
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {}/{} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
