//! `freespike` — free multiplicative convolution, spiked-model predictions
//! and Monte Carlo verification from the command line.
//!
//! Exit codes: 0 success (all enabled gates pass), 1 acceptance-gate
//! failure, 2 configuration error, 3 numeric failure.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use freespike_core::convolution::ConvolutionHandle;
use freespike_core::edge::locate_upper_edge;
use freespike_core::harness::{self, ExperimentPlan, Suite};
use freespike_core::measure::discretize;
use freespike_core::rmt;
use freespike_core::spike;
use freespike_core::subordination::SolverOptions;
use freespike_core::Error;

#[derive(Parser)]
#[command(name = "freespike", version, about = "Spiked Haar-multiplicative model toolkit")]
struct Cli {
    /// Experiment plan (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: machine parallelism; env FREESPIKE_THREADS
    /// as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Plan overrides `key=value` with dotted paths; values parse as JSON
    /// when possible (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V")]
    overrides: Vec<String>,

    /// Restrict verify to these suites (repeatable).
    #[arg(long = "suite", global = true, value_name = "NAME")]
    suites: Vec<String>,

    /// Log level filter.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the convolution density (CSV) and edge data (JSON).
    Convolve,
    /// Locate the upper edge and thresholds; write edge.json.
    Edge,
    /// Closed-form predictions for the spiked model; no simulation.
    Predict,
    /// One Monte Carlo trial with a full diagnostics dump.
    Simulate,
    /// Run the enabled suites with gated exit code.
    Verify,
    /// BBP transition sweep; writes the detection-fraction CSV.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config(_) | Error::Plan(_) | Error::Json(_) | Error::Io(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn load_plan(cli: &Cli) -> Result<ExperimentPlan, Error> {
    let mut value: serde_json::Value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => serde_json::json!({}),
    };
    for kv in &cli.overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
        let parsed: serde_json::Value =
            serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    let mut plan: ExperimentPlan = serde_json::from_value(value)?;
    if let Some(seed) = cli.seed {
        plan.master_seed = seed;
    }
    if !cli.suites.is_empty() {
        plan.suites = cli
            .suites
            .iter()
            .map(|s| Suite::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
    }
    plan.validated()?;
    Ok(plan)
}

fn set_path(value: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<(), Error> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if k + 1 == parts.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert((*part).to_string(), new);
                    return Ok(());
                }
                _ => return Err(Error::Config(format!("cannot set `{path}`: not an object"))),
            }
        }
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot descend into `{part}` of `{path}`")))?
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let plan = load_plan(cli)?;
    freespike_core::configure_threads(cli.threads.or_else(|| {
        std::env::var("FREESPIKE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    }));
    std::fs::create_dir_all(&cli.out)?;

    match cli.command {
        Command::Convolve => {
            let mu_a = discretize(&plan.spec_alpha, plan.atoms)?;
            let mu_b = discretize(&plan.spec_beta, plan.atoms)?;
            let handle = ConvolutionHandle::new(mu_a, mu_b, SolverOptions::default());
            let edge = handle.edge()?.clone();
            let density = handle.density()?;
            let csv_path = cli.out.join("density.csv");
            density.write_csv(std::fs::File::create(&csv_path)?)?;
            write_json(&cli.out.join("edge.json"), &edge)?;
            log::info!(
                "density: {} points, mass {:.6}; edge E_+ = {:.9}",
                density.grid.len(),
                density.integral(),
                edge.e_plus
            );
            println!("wrote {} and edge.json", csv_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Edge => {
            let mu_a = discretize(&plan.spec_alpha, plan.atoms)?;
            let mu_b = discretize(&plan.spec_beta, plan.atoms)?;
            let edge = locate_upper_edge(&mu_a, &mu_b)?;
            write_json(&cli.out.join("edge.json"), &edge)?;
            println!(
                "E_+ = {:.12}, Omega_A(E_+) = {:.12}, Omega_B(E_+) = {:.12}",
                edge.e_plus, edge.omega_a_edge, edge.omega_b_edge
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict => {
            let ctx = harness::plan_context(&plan, plan.gate_n)?;
            write_json(&cli.out.join("predictions.json"), &ctx.predictions)?;
            for sp in &ctx.predictions.spikes {
                println!(
                    "spike {:?}[{}] -> label {}, status {:?}, location {:.9} (rate bound {:.3e})",
                    sp.side, sp.index, sp.label, sp.status, sp.predicted_location, sp.rate_bound
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate => {
            let report = simulate_once(&plan)?;
            write_json(&cli.out.join("simulate.json"), &report)?;
            println!(
                "one trial at N = {}: top spiked eigenvalue {:.9}, interlacing violations {}",
                report.n, report.spiked_top[0], report.interlacing_violations
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let outcomes = harness::run_all(&plan, &cli.out)?;
            let mut all = true;
            for o in &outcomes {
                println!("[{}] {}", if o.pass { "PASS" } else { "FAIL" }, o.suite);
                for n in &o.notes {
                    println!("    {n}");
                }
                all &= o.pass;
            }
            println!("summary written to {}", cli.out.join("summary.json").display());
            Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Sweep => {
            let outcome = harness::run_suite(&plan, Suite::Bbp)?;
            harness::write_suite_csv(&outcome, &cli.out)?;
            for n in &outcome.notes {
                println!("{n}");
            }
            println!("wrote {}", cli.out.join("suite_bbp.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(serde::Serialize)]
struct SimulateReport {
    n: usize,
    seed: u64,
    e_plus: f64,
    spiked_top: Vec<f64>,
    unspiked_top: Vec<f64>,
    predictions: Vec<PredictionRow>,
    interlacing_violations: usize,
    unitarity_max: f64,
    eigen_residual: f64,
    wall_ms: u128,
}

#[derive(serde::Serialize)]
struct PredictionRow {
    target: String,
    predicted: f64,
    realized: f64,
    abs_error: f64,
}

fn simulate_once(plan: &ExperimentPlan) -> Result<SimulateReport, Error> {
    let start = std::time::Instant::now();
    let n = plan.gate_n;
    let ctx = harness::plan_context(plan, n)?;
    let key = rmt::StreamKey::new(plan.master_seed, n, 0, "haar");
    let u = rmt::sample_haar(n, plan.field, &key)?;
    let mats = rmt::build_model(&ctx.model, &u)?;
    let spec = rmt::spectral_decomposition(&mats.q1_hat)?;
    let unspiked = rmt::eigenvalues_only(&mats.q1)?;
    let violations = rmt::interlacing_violations(
        &spec.eigenvalues,
        &unspiked,
        ctx.model.r() + ctx.model.s(),
        1e-9,
    );
    let rows = ctx
        .predictions
        .spikes
        .iter()
        .map(|sp| {
            let realized = spec.eigenvalues[sp.label];
            PredictionRow {
                target: format!(
                    "outlier:{}:{}",
                    if sp.side == spike::SpikeSide::A { "a" } else { "b" },
                    sp.index
                ),
                predicted: sp.predicted_location,
                realized,
                abs_error: (realized - sp.predicted_location).abs(),
            }
        })
        .collect();
    let top = 20.min(n);
    Ok(SimulateReport {
        n,
        seed: key.seed_id(),
        e_plus: ctx.predictions.e_plus,
        spiked_top: spec.eigenvalues[..top].to_vec(),
        unspiked_top: unspiked[..top].to_vec(),
        predictions: rows,
        interlacing_violations: violations,
        unitarity_max: u.unitarity_max,
        eigen_residual: spec.max_residual,
        wall_ms: start.elapsed().as_millis(),
    })
}
