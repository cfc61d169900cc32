//! `surveil`: synthesize, reconstruct, train, evaluate, ablate, explain and report.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use surveil_core::eval::{
    aggregate, metric_report, prepare_dataset, run_comparison, write_aggregate, write_results, Cell, SplitSpec,
};
use surveil_core::model::{predict, train, Ablation, Dataset, TrainedModel};
use surveil_core::panel::{ingest_macro, ingest_panel, synthesize_panel, write_macro, write_panel, QuarterTag};
use surveil_core::xai::{permutation_importance, risk_report, write_attributions, write_importance};
use surveil_core::Error;

use config::{Overrides, RunConfig};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: 2, kind: "usage", message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidArgument(_) => (2, "usage"),
            Error::Malformed { .. } | Error::DuplicateKey { .. } | Error::Data(_) | Error::Csv(_) | Error::Json(_) => {
                (3, "data")
            }
            Error::Io(_) => (3, "io"),
            Error::NonConvergence { .. } => (4, "non_convergence"),
            Error::Shape { .. } | Error::NonFiniteGradient(_) | Error::Invariant(_) => (5, "invariant"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

#[derive(Parser)]
#[command(name = "surveil", version, about = "Interbank contagion early-warning pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    panel: Option<PathBuf>,
    #[arg(long = "macro", global = true)]
    macro_path: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// RAS marginal tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    /// Edge pruning threshold on LGD weights.
    #[arg(long, global = true)]
    prune: Option<f64>,
    #[arg(long = "history-window", global = true)]
    history_window: Option<usize>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic panel and macro series.
    Synth,
    /// Reconstruct every quarter's exposure network.
    Reconstruct,
    /// Train one checkpoint per seed.
    Train,
    /// Score the test quarters with saved checkpoints.
    Evaluate,
    /// All five model variants and the logistic anchor over every seed.
    Ablate,
    /// Temporal attributions and permutation importance for one checkpoint.
    Explain,
    /// Risk report bundle for one checkpoint.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Reconstruct => "reconstruct",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Explain => "explain",
            Command::Report => "report",
        }
    }
}

struct Loaded {
    data: Dataset,
    split: SplitSpec,
    inputs: Vec<PathBuf>,
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let (panel_path, macro_path) = cfg.inputs()?;
    let panel = ingest_panel(&panel_path)?;
    if panel.rejected_nonpositive_assets > 0 {
        log::warn!("dropped {} rows with non-positive total assets", panel.rejected_nonpositive_assets);
    }
    let macro_states = ingest_macro(&macro_path)?;
    let split = match &cfg.split {
        None => None,
        Some(b) => {
            let tag = |s: &str| -> Result<QuarterTag, CliError> {
                s.parse().map_err(|_| CliError::usage(format!("bad split quarter `{s}`")))
            };
            let mut quarters: Vec<QuarterTag> = panel.records.iter().map(|r| r.quarter).collect();
            quarters.sort();
            quarters.dedup();
            Some(SplitSpec::from_calendar(&quarters, tag(&b.train_end)?, tag(&b.val_end)?, tag(&b.test_end)?)?)
        }
    };
    let (data, split) = prepare_dataset(&panel.records, &macro_states, &cfg.recon, split)?;
    Ok(Loaded { data, split, inputs: vec![panel_path, macro_path] })
}

fn checkpoint_paths(out: &Path, ablation: Ablation, seed: u64) -> (PathBuf, PathBuf) {
    let dir = out.join("checkpoints");
    (dir.join(format!("{ablation}_seed{seed}.json")), dir.join(format!("{ablation}_seed{seed}.meta.json")))
}

fn load_model(cfg: &RunConfig, seed: u64) -> Result<(TrainedModel, Vec<PathBuf>), CliError> {
    let (ckpt, meta) = checkpoint_paths(&cfg.out, cfg.train.ablation, seed);
    for p in [&ckpt, &meta] {
        if !p.is_file() {
            return Err(CliError {
                code: 3,
                kind: "missing_checkpoint",
                message: format!("checkpoint file {} not found; run `train` first", p.display()),
            });
        }
    }
    let model = TrainedModel::load(&ckpt, &meta)?;
    Ok((model, vec![ckpt, meta]))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        panel: cli.panel,
        macro_path: cli.macro_path,
        out: cli.out,
        seed: cli.seed,
        seeds: cli.seeds,
        ablation: cli.ablation,
        tol: cli.tol,
        max_iter: cli.max_iter,
        prune: cli.prune,
        history_window: cli.history_window,
        epochs: cli.epochs,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::usage(format!("cannot create output dir {}: {e}", cfg.out.display())))?;
    let command = cli.command;
    let (inputs, outputs) = match command {
        Command::Synth => {
            let (records, macro_states) = synthesize_panel(&cfg.synth, cfg.seed)?;
            let (p, m) = (cfg.out.join("panel.csv"), cfg.out.join("macro.csv"));
            write_panel(&p, &records)?;
            write_macro(&m, &macro_states)?;
            (vec![], vec![p, m])
        }
        Command::Reconstruct => {
            let l = load(&cfg)?;
            let edges = cfg.out.join("edges.csv");
            if edges.exists() {
                std::fs::remove_file(&edges)?;
            }
            for s in &l.data.snapshots {
                surveil_core::netrecon::write_edges(&edges, s.quarter, &s.certs, &s.edges)?;
            }
            let log_path = cfg.out.join("recon_log.csv");
            let mut w = csv::Writer::from_path(&log_path).map_err(Error::from)?;
            w.write_record(["quarter", "nodes", "edges", "density", "iterations", "residual", "column_scale"])
                .map_err(Error::from)?;
            for r in &l.data.recon {
                w.write_record([
                    r.quarter.to_string(),
                    r.nodes.to_string(),
                    r.edges.to_string(),
                    r.density.to_string(),
                    r.iterations.to_string(),
                    r.residual.to_string(),
                    r.column_scale.to_string(),
                ])
                .map_err(Error::from)?;
            }
            w.flush()?;
            (l.inputs, vec![edges, log_path])
        }
        Command::Train => {
            let l = load(&cfg)?;
            std::fs::create_dir_all(cfg.out.join("checkpoints"))?;
            let models = surveil_core::par::try_map(&cfg.train.seeds, |&seed| train(&l.data, &l.split, &cfg.train, seed))?;
            let mut outputs = Vec::new();
            for m in &models {
                let (ckpt, meta) = checkpoint_paths(&cfg.out, cfg.train.ablation, m.seed);
                m.save(&ckpt, &meta)?;
                outputs.extend([ckpt, meta]);
            }
            (l.inputs, outputs)
        }
        Command::Evaluate => {
            let l = load(&cfg)?;
            let mut inputs = l.inputs.clone();
            let test: Vec<usize> = l.split.test.clone().collect();
            let mut cells = Vec::new();
            for &seed in &cfg.train.seeds {
                let (model, files) = load_model(&cfg, seed)?;
                inputs.extend(files);
                let (scores, labels) = predict(&model, &l.data, &test)?.pooled();
                let report = metric_report(&scores, &labels, seed)?;
                cells.push(Cell {
                    config: cfg.train.ablation.to_string(),
                    seed,
                    report,
                    scores,
                    labels,
                    model: None,
                    prediction: None,
                });
            }
            let (r, a) = (cfg.out.join("metrics.csv"), cfg.out.join("metrics_aggregate.csv"));
            write_results(&r, &cells)?;
            write_aggregate(&a, &aggregate(&cells))?;
            (inputs, vec![r, a])
        }
        Command::Ablate => {
            let l = load(&cfg)?;
            let cmp = run_comparison(&l.data, &l.split, &cfg.train, &Ablation::ALL, &cfg.train.seeds, true)?;
            let (r, a) = (cfg.out.join("ablation_results.csv"), cfg.out.join("ablation_aggregate.csv"));
            write_results(&r, &cmp.cells)?;
            write_aggregate(&a, &cmp.aggregate)?;
            (l.inputs, vec![r, a])
        }
        Command::Explain | Command::Report => {
            let l = load(&cfg)?;
            let (model, files) = load_model(&cfg, cfg.seed)?;
            let mut inputs = l.inputs.clone();
            inputs.extend(files);
            let test: Vec<usize> = l.split.test.clone().collect();
            let pred = predict(&model, &l.data, &test)?;
            let imp = permutation_importance(&model, &l.data, &test, cfg.importance_repeats, cfg.seed)?;
            let outputs = if matches!(command, Command::Explain) {
                let (a, i) = (cfg.out.join("attributions.csv"), cfg.out.join("importance.csv"));
                write_attributions(&a, &pred)?;
                write_importance(&i, &imp)?;
                vec![a, i]
            } else {
                let dir = cfg.out.join("report");
                let mut files = risk_report(&pred, &imp)?.write(&dir)?;
                let i = dir.join("importance.csv");
                write_importance(&i, &imp)?;
                files.push(i);
                files
            };
            (inputs, outputs)
        }
    };
    let m = manifest::write(&cfg, command.name(), &inputs, &outputs)?;
    for p in outputs.iter().chain([&m]) {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message.replace('\n', " ");
            eprintln!("error: code={} kind={} message={msg}", e.code, e.kind);
            ExitCode::from(e.code)
        }
    }
}
