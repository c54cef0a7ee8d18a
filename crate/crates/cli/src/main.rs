//! `calib`: simulate calibration scenarios, run the estimation pipeline,
//! and sweep noise grids.
//!
//! Exit codes: 0 on success, 2 for configuration or file problems, 3 when
//! initial value estimation fails, 4 when the joint refinement fails.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use array_calib::io::{
    self, BundleFile, CalibrationFile, MonteCarloFile, NoiseMeta, PoseSet,
};
use array_calib::pipeline::{
    calibrate, monte_carlo, CalibrateOptions, MonteCarloConfig,
};
use array_calib::solver::WeightSpec;
use array_calib::synth::{
    generate_scenario, synthesize_measurements, NoiseConfig, ScenarioConfig, TrajectoryId,
    DEFAULT_N_ARRAYS, DEFAULT_SIGMA_ODOMETRY,
};
use array_calib::PipelineError;

#[derive(Parser)]
#[command(name = "calib", version, about = "Asynchronous microphone-array calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario and write its measurement bundle.
    Simulate(SimulateArgs),
    /// Estimate array poses, clocks, and the source trajectory from a bundle.
    Calibrate(CalibrateArgs),
    /// Run a Monte Carlo sweep over a noise grid.
    Montecarlo(MontecarloArgs),
    /// Summarize a Monte Carlo report as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Trajectory preset: traj1, traj2, or traj3.
    #[arg(long, default_value = "traj1")]
    trajectory: String,
    #[arg(long, default_value_t = DEFAULT_N_ARRAYS)]
    n_arrays: usize,
    /// Override the preset's event count.
    #[arg(long)]
    n_events: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    sigma_tdoa_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma_doa_deg: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_ODOMETRY)]
    sigma_odometry_m: f64,
    /// Speed of sound in m/s.
    #[arg(long, default_value_t = array_calib::model::DEFAULT_SPEED_OF_SOUND)]
    speed_of_sound: f64,
    /// Leave ground truth out of the bundle file.
    #[arg(long)]
    no_truth: bool,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Measurement bundle to calibrate.
    #[arg(long, short)]
    input: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Residual weights as "tdoa,doa,odometry", overriding the bundle's
    /// noise metadata.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Extra initial-value attempts with redrawn array positions.
    #[arg(long, default_value_t = 4)]
    max_restarts: usize,
    /// Seed for the initial-value restart draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MontecarloArgs {
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = 50)]
    runs_per_cell: usize,
    #[arg(long, default_value_t = DEFAULT_N_ARRAYS)]
    n_arrays: usize,
    /// TDOA noise grid in ms.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.5])]
    sigma_tdoa_ms: Vec<f64>,
    /// DOA noise grid in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 10.0, 15.0])]
    sigma_doa_deg: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_SIGMA_ODOMETRY)]
    sigma_odometry_m: f64,
    /// Trajectory presets to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["traj1".to_string(), "traj2".to_string(), "traj3".to_string()])]
    trajectories: Vec<String>,
    /// Also aggregate each noise cell across all trajectories.
    #[arg(long)]
    combine_trajectories: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 4)]
    max_restarts: usize,
    #[arg(long, short)]
    output: PathBuf,
    /// Also write the per-cell CSV summary here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Monte Carlo report to summarize.
    #[arg(long, short)]
    input: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_trajectory(name: &str) -> anyhow::Result<TrajectoryId> {
    TrajectoryId::from_name(name)
        .ok_or_else(|| anyhow!("unknown trajectory '{name}' (expected traj1, traj2, or traj3)"))
}

fn parse_weights(text: &str) -> anyhow::Result<WeightSpec> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!(
            "--weights needs three comma-separated values (tdoa,doa,odometry), got {}",
            parts.len()
        );
    }
    let values: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing --weights '{text}'"))?;
    let weights = WeightSpec {
        tdoa: values[0],
        doa: values[1],
        odometry: values[2],
    };
    weights.validate()?;
    Ok(weights)
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let trajectory = parse_trajectory(&args.trajectory)?;
    let mut cfg = ScenarioConfig::preset(trajectory);
    cfg.n_arrays = args.n_arrays;
    cfg.n_events = args.n_events.or(cfg.n_events);
    cfg.seed = args.seed;
    cfg.noise = NoiseConfig {
        sigma_tdoa: args.sigma_tdoa_ms * 1e-3,
        sigma_doa: args.sigma_doa_deg.to_radians(),
        sigma_odometry: args.sigma_odometry_m,
    };
    cfg.speed_of_sound = args.speed_of_sound;
    let truth = generate_scenario(&cfg)?;
    let bundle = synthesize_measurements(&truth, &cfg)?;
    let file = BundleFile::from_bundle(
        &bundle,
        Some(NoiseMeta::from_config(&cfg.noise)),
        (!args.no_truth).then(|| PoseSet::from_truth(&truth)),
        Some(trajectory.name().to_string()),
        Some(args.seed),
    );
    io::write_json(&args.output, &file)?;
    println!(
        "wrote {} ({} arrays, {} events, seed {})",
        args.output.display(),
        bundle.n_arrays(),
        bundle.n_events(),
        args.seed
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let (bundle, file) = io::read_bundle(&args.input)?;
    let weights = match &args.weights {
        Some(text) => parse_weights(text)?,
        None => file
            .noise
            .map(|meta| {
                let n = meta.to_config();
                WeightSpec::from_sigmas(n.sigma_tdoa, n.sigma_doa, n.sigma_odometry)
            })
            .unwrap_or_default(),
    };
    let truth = file.ground_truth()?;
    let mut opts = CalibrateOptions {
        weights: Some(weights),
        ..CalibrateOptions::default()
    };
    opts.solve.max_iters = args.max_iters;
    opts.ive.solve.max_iters = args.max_iters;
    opts.ive.max_restarts = args.max_restarts;
    opts.ive.seed = args.seed;
    let run = calibrate(&bundle, truth.as_ref(), &opts)?;
    let report = CalibrationFile::from_run(&run, &weights);
    match &args.output {
        Some(path) => {
            io::write_json(path, &report)?;
            println!(
                "wrote {} (joint: {} iterations, cost {:.6e}, converged {})",
                path.display(),
                report.joint.iterations,
                report.joint.final_cost,
                report.joint.converged
            );
            if let Some(e) = &report.errors {
                println!(
                    "errors vs truth: {:.4} cm, {:.4} deg, {:.4}e-4 s, {:.4} us/s",
                    e.location_cm, e.orientation_deg, e.offset_1e4s, e.drift_us_per_s
                );
            }
        }
        None => {
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}

fn run_monte_carlo(args: MontecarloArgs) -> anyhow::Result<()> {
    let trajectories = args
        .trajectories
        .iter()
        .map(|name| parse_trajectory(name))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = MonteCarloConfig {
        sigma_tdoa: args.sigma_tdoa_ms.iter().map(|v| v * 1e-3).collect(),
        sigma_doa: args.sigma_doa_deg.iter().map(|v| v.to_radians()).collect(),
        sigma_odometry: args.sigma_odometry_m,
        trajectories,
        n_arrays: args.n_arrays,
        runs_per_cell: args.runs_per_cell,
        base_seed: args.base_seed,
        combine_trajectories: args.combine_trajectories,
    };
    let mut copts = CalibrateOptions::default();
    copts.solve.max_iters = args.max_iters;
    copts.ive.solve.max_iters = args.max_iters;
    copts.ive.max_restarts = args.max_restarts;
    let report = monte_carlo(&cfg, &copts)?;
    let file = MonteCarloFile::from_report(&report);
    io::write_json(&args.output, &file)?;
    if let Some(path) = &args.csv {
        io::write_text(path, &io::summary_csv(&file))?;
    }
    let runs: usize = file.cells.iter().map(|c| c.runs).sum();
    let failures: usize = file.cells.iter().map(|c| c.failures).sum();
    println!(
        "wrote {} ({} cells, {} runs, {} failed)",
        args.output.display(),
        file.cells.len(),
        runs,
        failures
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> anyhow::Result<()> {
    let file = io::read_monte_carlo(&args.input)?;
    let csv = io::summary_csv(&file);
    match &args.output {
        Some(path) => {
            io::write_text(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Ive(_) => 3,
                PipelineError::Joint(_) => 4,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Calibrate(args) => run_calibrate(args),
        Command::Montecarlo(args) => run_monte_carlo(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
