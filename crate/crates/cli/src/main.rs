//! `picksim` — simulate, tune, compare, and fuse for the multi-view
//! bin-picking sensing scheme.
//!
//! Exit codes: 0 success, 2 malformed config or input files, 3 simulation
//! or output errors. All outputs are deterministic for a fixed
//! `(config, seed)` pair; log lines go to stderr and never into data files.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use picksim_core::config::{ConfigError, ExperimentConfig, FuseConfig, TuneConfig};
use picksim_core::cycle::{
    self, sign_test_p, CycleRecord, ExperimentMetrics, RepetitionOutcome, Strategy,
};
use picksim_core::depth::{DepthImage, DepthIoError, DepthMeta};
use picksim_core::fusion::{self, FusionDiagnostics, ViewSet};
use picksim_core::tuner;

#[derive(Parser)]
#[command(
    name = "picksim",
    about = "Non-stop multi-view sensing simulator for robotic bin picking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run picking experiments with one strategy and write metrics.
    Simulate(RunArgs),
    /// Run the offline parameter sweep and selection.
    Tune(RunArgs),
    /// Run all three strategies on paired seeds and compare them.
    Compare(RunArgs),
    /// Fuse depth images (PGM + sidecar metadata) into one depth image.
    Fuse(FuseArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write per-cycle fused depth images.
    #[arg(long)]
    dump_depth: bool,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct FuseArgs {
    /// Optional TOML configuration for fusion parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, short)]
    verbose: bool,
    /// Input depth images (each `foo.pgm` next to its `foo.pgm.meta`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

enum CliError {
    /// Malformed configuration or input files (exit 2).
    Input(String),
    /// Simulation or output failure (exit 3).
    Run(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DepthIoError> for CliError {
    fn from(e: DepthIoError) -> Self {
        match e {
            DepthIoError::Io(io) => CliError::Run(io.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = match &cli.command {
        Command::Simulate(a) | Command::Tune(a) | Command::Compare(a) => a.verbose,
        Command::Fuse(a) => a.verbose,
    };
    env_logger::Builder::new()
        .filter_level(if verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .init();

    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Tune(args) => cmd_tune(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Fuse(args) => cmd_fuse(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct SimulateOutput<'a> {
    strategy: &'a str,
    seed: u64,
    metrics: &'a ExperimentMetrics,
    repetitions: &'a [RepetitionOutcome],
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_cycles_csv(path: &Path, cycles: &[CycleRecord]) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "repetition,cycle,recognized,grasped_id,views,sensing_total_ms,extra_path_ms,charged_ms,clock_ms,search"
    )?;
    for c in cycles {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3},{:.3},{:.3},{}",
            c.repetition,
            c.cycle,
            c.recognized,
            c.grasped_id.map_or(String::new(), |id| id.to_string()),
            c.views,
            c.sensing_total_ms,
            c.extra_path_ms,
            c.charged_ms,
            c.clock_ms,
            c.search,
        )?;
    }
    Ok(())
}

fn cmd_simulate(args: &RunArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let strategy = cfg.strategy().ok_or_else(|| {
        CliError::Input(format!(
            "{}: simulate needs a `strategy` key",
            args.config.display()
        ))
    })?;
    let seed = args.seed.unwrap_or(cfg.seed);
    ensure_out(&args.out)?;
    let setup = cfg.to_setup(strategy);
    let intrinsics = setup.cycle.intrinsics;

    let mut dump_error = None;
    let mut path_trace = String::new();
    let report = cycle::run_experiment_with(&setup, seed, |rep, cycle_idx, result| {
        path_trace.push_str(&format!("# repetition {rep} cycle {cycle_idx}\n"));
        path_trace.push_str(&picksim_core::planner::trace_record(
            &result.sensing_path,
            result.views_captured,
        ));
        if args.dump_depth && dump_error.is_none() {
            let path = args.out.join(format!("fused_r{rep:03}_c{cycle_idx:03}.pgm"));
            let meta = DepthMeta {
                intrinsics,
                pose: result.reference_pose,
            };
            if let Err(e) = result
                .fused
                .save_pgm(&path)
                .and_then(|_| meta.save(&path))
            {
                dump_error = Some(e.to_string());
            }
        }
    })
    .map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(e) = dump_error {
        return Err(CliError::Run(e));
    }
    std::fs::write(args.out.join("paths.txt"), path_trace)?;

    write_json(
        &args.out.join("metrics.json"),
        &SimulateOutput {
            strategy: strategy.name(),
            seed,
            metrics: &report.metrics,
            repetitions: &report.repetitions,
        },
    )?;
    write_cycles_csv(&args.out.join("cycles.csv"), &report.cycles)?;

    println!(
        "strategy {} seed {}: complete_rate {:.4}, cycles {}, searches {}, mean charged {:.1} ms",
        strategy.name(),
        seed,
        report.metrics.complete_rate,
        report.metrics.cycles_run,
        report.metrics.searches_triggered,
        report.metrics.mean_charged_takt_ms,
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct TuneOutput {
    seed: u64,
    strict_sigma_band: bool,
    selected: tuner::TunedParams,
    fallback_used: bool,
    survivors: usize,
    trials: usize,
}

fn cmd_tune(args: &RunArgs) -> Result<(), CliError> {
    let cfg = TuneConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    ensure_out(&args.out)?;
    let env = cfg.to_sweep_env().map_err(|e| CliError::Run(e.to_string()))?;
    let trials = tuner::run_sweep(&env, seed);
    let selection = tuner::select_parameters(&trials, &cfg.tuner_config());

    let mut w = std::io::BufWriter::new(std::fs::File::create(args.out.join("tuning.csv"))?);
    writeln!(w, "path_id,v,t_ms,n,recognized_count")?;
    for t in &trials {
        writeln!(
            w,
            "{},{:.1},{},{},{}",
            t.path_id, t.v, t.t_ms, t.n, t.recognized_count
        )?;
    }
    drop(w);

    write_json(
        &args.out.join("tuned_params.json"),
        &TuneOutput {
            seed,
            strict_sigma_band: cfg.strict_sigma_band,
            selected: selection.params,
            fallback_used: selection.fallback_used,
            survivors: selection.survivors,
            trials: trials.len(),
        },
    )?;

    println!(
        "tuned: n={} v={:.1} t={} ms (alpha {:.4} rad, beta {:.4} rad) from {} trials ({} survivors{})",
        selection.params.n,
        selection.params.v,
        selection.params.t_ms,
        selection.params.alpha,
        selection.params.beta,
        trials.len(),
        selection.survivors,
        if selection.fallback_used { ", band fallback" } else { "" },
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct CompareRow {
    strategy: &'static str,
    complete_rate: f64,
    mean_searches: f64,
    mean_charged_ms: f64,
    per_rep_complete: Vec<f64>,
}

#[derive(serde::Serialize)]
struct CompareOutput {
    seed: u64,
    repetitions: u32,
    rows: Vec<CompareRow>,
    /// One-sided sign-test p-values for active beating each baseline;
    /// absent with fewer than two repetitions.
    p_vs_single_view: Option<f64>,
    p_vs_random_path: Option<f64>,
}

fn cmd_compare(args: &RunArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    ensure_out(&args.out)?;

    let mut rows = Vec::new();
    for strategy in Strategy::all() {
        let setup = cfg.to_setup(strategy);
        // The same master seed pairs the scenes and noise across
        // strategies.
        let report = cycle::run_experiment(&setup, seed).map_err(|e| CliError::Run(e.to_string()))?;
        rows.push(CompareRow {
            strategy: strategy.name(),
            complete_rate: report.metrics.complete_rate,
            mean_searches: report.metrics.mean_searches_per_experiment(),
            mean_charged_ms: report.metrics.mean_charged_takt_ms,
            per_rep_complete: report
                .repetitions
                .iter()
                .map(|r| r.complete_rate())
                .collect(),
        });
    }

    let paired_p = |baseline: usize| -> Option<f64> {
        if cfg.repetitions < 2 {
            return None;
        }
        let active = &rows[0].per_rep_complete;
        let other = &rows[baseline].per_rep_complete;
        let mut wins = 0;
        let mut losses = 0;
        for (a, b) in active.iter().zip(other) {
            if a > b {
                wins += 1;
            } else if b > a {
                losses += 1;
            }
        }
        Some(sign_test_p(wins, losses))
    };
    let p_single = paired_p(1);
    let p_random = paired_p(2);

    println!("strategy                complete_rate  mean_searches  mean_charged_ms  p_vs_active");
    for (i, row) in rows.iter().enumerate() {
        let p = match i {
            1 => p_single,
            2 => p_random,
            _ => None,
        };
        println!(
            "{:<22}  {:>13.4}  {:>13.2}  {:>15.1}  {:>11}",
            row.strategy,
            row.complete_rate,
            row.mean_searches,
            row.mean_charged_ms,
            match (i, p) {
                (0, _) => "-".to_string(),
                (_, Some(p)) => format!("{p:.4}"),
                (_, None) => "n/a".to_string(),
            },
        );
    }

    write_json(
        &args.out.join("compare.json"),
        &CompareOutput {
            seed,
            repetitions: cfg.repetitions,
            rows,
            p_vs_single_view: p_single,
            p_vs_random_path: p_random,
        },
    )?;
    Ok(())
}

#[derive(serde::Serialize)]
struct FuseOutput {
    inputs: usize,
    valid_pixels: usize,
    invalid_fraction: f64,
    dropped_samples: usize,
    skipped_views: Vec<usize>,
    votes_histogram: Vec<usize>,
}

fn cmd_fuse(args: &FuseArgs) -> Result<(), CliError> {
    let fusion_cfg = match &args.config {
        Some(path) => FuseConfig::load(path)?.to_fusion_config(),
        None => picksim_core::fusion::FusionConfig::default(),
    };
    ensure_out(&args.out)?;

    let mut views = Vec::new();
    let mut intrinsics = None;
    for input in &args.inputs {
        let img = DepthImage::load_pgm(input)?;
        let meta = DepthMeta::load(input)?;
        match intrinsics {
            None => intrinsics = Some(meta.intrinsics),
            Some(k) if k != meta.intrinsics => {
                return Err(CliError::Input(format!(
                    "{}: intrinsics disagree with the first input",
                    input.display()
                )));
            }
            _ => {}
        }
        views.push((img, meta.pose));
    }
    let k = intrinsics.expect("at least one input enforced by clap");
    let reference_pose = views[0].1;
    let set = ViewSet::new(views, k, 0).map_err(|e| CliError::Input(e.to_string()))?;
    let (fused, diags) = fusion::fuse_with_diagnostics(&set, &fusion_cfg);

    let out_pgm = args.out.join("fused.pgm");
    fused.save_pgm(&out_pgm)?;
    DepthMeta {
        intrinsics: k,
        pose: reference_pose,
    }
    .save(&out_pgm)?;
    write_json(&args.out.join("fuse_diagnostics.json"), &diagnostics_json(&fused, &diags, args.inputs.len()))?;

    println!(
        "fused {} views: {} valid pixels ({:.2}% invalid), {} samples dropped",
        args.inputs.len(),
        fused.valid_count(),
        fused.invalid_fraction() * 100.0,
        diags.dropped_samples,
    );
    Ok(())
}

fn diagnostics_json(fused: &DepthImage, diags: &FusionDiagnostics, inputs: usize) -> FuseOutput {
    FuseOutput {
        inputs,
        valid_pixels: fused.valid_count(),
        invalid_fraction: fused.invalid_fraction(),
        dropped_samples: diags.dropped_samples,
        skipped_views: diags.skipped_views.clone(),
        votes_histogram: diags.votes_histogram.clone(),
    }
}
