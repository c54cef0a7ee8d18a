//! End-to-end calibration (initial value estimation plus the joint
//! refinement) and the Monte Carlo evaluation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, PipelineError};
use crate::ive::{run_ive, IveOptions};
use crate::model::{JointProblem, MeasurementBundle, ParameterVector};
use crate::solver::{self, SolveOptions, SolveReport, WeightSpec};
use crate::synth::{
    generate_scenario, mix_seed, synthesize_measurements, GroundTruth, NoiseConfig,
    ScenarioConfig, TrajectoryId,
};

/// Controls for one calibration run. `weights` of `None` means the
/// defaults; the Monte Carlo harness substitutes inverse-variance weights
/// per noise cell instead.
#[derive(Debug, Clone, Copy)]
pub struct CalibrateOptions {
    pub weights: Option<WeightSpec>,
    pub solve: SolveOptions,
    pub ive: IveOptions,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            weights: None,
            solve: SolveOptions::default(),
            ive: IveOptions::default(),
        }
    }
}

/// Estimate errors against ground truth in reporting units: location RMSE
/// over arrays 2..N in centimeters, mean orientation geodesic angle in
/// degrees, time-offset RMSE in units of 1e-4 s, and clock-drift RMSE
/// (gauge included) in microseconds per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunErrors {
    pub location_cm: f64,
    pub orientation_deg: f64,
    pub offset_1e4s: f64,
    pub drift_us_per_s: f64,
}

pub fn compute_errors(params: &ParameterVector, truth: &GroundTruth) -> RunErrors {
    let est_states = params.states();
    let est_sources = params.sources();
    debug_assert_eq!(est_states.len(), truth.states.len());
    debug_assert_eq!(est_sources.len(), truth.trajectory.n_events());
    let free = est_states.len() - 1;
    let mut loc_sq = 0.0;
    let mut angle_sum = 0.0;
    let mut offset_sq = 0.0;
    let mut drift_sq = 0.0;
    for (est, tru) in est_states.iter().zip(truth.states.iter()) {
        drift_sq += (est.clock_drift - tru.clock_drift).powi(2);
    }
    for (est, tru) in est_states.iter().zip(truth.states.iter()).skip(1) {
        loc_sq += (est.position - tru.position).norm_squared();
        angle_sum += est.orientation.exp().angle_to(&tru.orientation.exp());
        offset_sq += (est.time_offset - tru.time_offset).powi(2);
    }
    RunErrors {
        location_cm: (loc_sq / free as f64).sqrt() * 100.0,
        orientation_deg: (angle_sum / free as f64).to_degrees(),
        offset_1e4s: (offset_sq / free as f64).sqrt() / 1e-4,
        drift_us_per_s: (drift_sq / est_states.len() as f64).sqrt() * 1e6,
    }
}

/// Output of one full calibration.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub estimate: ParameterVector,
    pub ive_estimate: ParameterVector,
    pub stage1_report: SolveReport,
    pub joint_report: SolveReport,
    pub ive_attempts: usize,
    pub ive_errors: Option<RunErrors>,
    pub final_errors: Option<RunErrors>,
}

/// Runs initial value estimation followed by the joint refinement. Errors
/// against `truth` are attached when it is given.
pub fn calibrate(
    bundle: &MeasurementBundle,
    truth: Option<&GroundTruth>,
    opts: &CalibrateOptions,
) -> Result<CalibrationRun, PipelineError> {
    let weights = opts.weights.unwrap_or_default();
    let ive = run_ive(bundle, None, &weights, &opts.ive).map_err(PipelineError::Ive)?;
    let problem = JointProblem::new(bundle).map_err(PipelineError::Joint)?;
    let (x, joint_report) = solver::solve(
        &problem,
        ive.params.values().clone(),
        &weights,
        &opts.solve,
    )
    .map_err(PipelineError::Joint)?;
    let estimate =
        ParameterVector::new(problem.parameter_layout(), x).map_err(PipelineError::Joint)?;
    let ive_errors = truth.map(|t| compute_errors(&ive.params, t));
    let final_errors = truth.map(|t| compute_errors(&estimate, t));
    Ok(CalibrationRun {
        estimate,
        ive_estimate: ive.params,
        stage1_report: ive.report,
        joint_report,
        ive_attempts: ive.attempts,
        ive_errors,
        final_errors,
    })
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Mean of the values inside the inclusive interquartile range, with
/// quartiles by linear interpolation on the sorted sample. Needs at least
/// four finite values.
pub fn mean_within_iqr(values: &[f64]) -> Result<f64, CalibError> {
    if values.len() < 4 {
        return Err(CalibError::InvalidConfig(format!(
            "interquartile mean needs at least 4 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::InvalidConfig(
            "interquartile mean needs finite values".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in &sorted {
        if *v >= q1 && *v <= q3 {
            sum += v;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Noise grid and run plan for a Monte Carlo sweep. Sigma units are SI
/// (seconds and radians); the run seed for (trajectory, run index) does
/// not depend on the noise cell, so cells share scenario geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub sigma_tdoa: Vec<f64>,
    pub sigma_doa: Vec<f64>,
    pub sigma_odometry: f64,
    pub trajectories: Vec<TrajectoryId>,
    pub n_arrays: usize,
    pub runs_per_cell: usize,
    pub base_seed: u64,
    pub combine_trajectories: bool,
}

impl MonteCarloConfig {
    /// The benchmark sweep: {0.05, 0.1, 0.5} ms TDOA noise crossed with
    /// {5, 10, 15} degree DOA noise over the three preset trajectories,
    /// 50 runs per cell.
    pub fn benchmark_grid(base_seed: u64) -> Self {
        MonteCarloConfig {
            sigma_tdoa: vec![0.05e-3, 0.1e-3, 0.5e-3],
            sigma_doa: vec![
                5f64.to_radians(),
                10f64.to_radians(),
                15f64.to_radians(),
            ],
            sigma_odometry: crate::synth::DEFAULT_SIGMA_ODOMETRY,
            trajectories: TrajectoryId::PRESETS.to_vec(),
            n_arrays: crate::synth::DEFAULT_N_ARRAYS,
            runs_per_cell: 50,
            base_seed,
            combine_trajectories: false,
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if self.sigma_tdoa.is_empty() || self.sigma_doa.is_empty() {
            return Err(CalibError::InvalidConfig(
                "noise grid axes must be non-empty".into(),
            ));
        }
        let sigmas = self
            .sigma_tdoa
            .iter()
            .chain(self.sigma_doa.iter())
            .chain(std::iter::once(&self.sigma_odometry));
        if sigmas.into_iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(CalibError::InvalidConfig(
                "noise sigmas must be finite and non-negative".into(),
            ));
        }
        if self.trajectories.is_empty() {
            return Err(CalibError::InvalidConfig(
                "at least one trajectory is required".into(),
            ));
        }
        if self
            .trajectories
            .iter()
            .any(|t| t.preset_workspace().is_none())
        {
            return Err(CalibError::InvalidConfig(
                "Monte Carlo sweeps support preset trajectories only".into(),
            ));
        }
        if self.n_arrays < 2 {
            return Err(CalibError::InvalidConfig(format!(
                "need at least 2 arrays, got {}",
                self.n_arrays
            )));
        }
        if self.runs_per_cell < 4 {
            return Err(CalibError::InvalidConfig(format!(
                "aggregation needs at least 4 runs per cell, got {}",
                self.runs_per_cell
            )));
        }
        Ok(())
    }
}

/// Seed for one (trajectory, run) pair, shared by every noise cell.
pub fn run_seed(base_seed: u64, trajectory_index: usize, run_index: usize) -> u64 {
    mix_seed(
        mix_seed(base_seed, 0x1000 + trajectory_index as u64),
        run_index as u64,
    )
}

/// Solver health numbers kept per successful run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub stage1_iterations: usize,
    pub joint_iterations: usize,
    pub ive_attempts: usize,
    pub final_cost: f64,
    pub joint_converged: bool,
}

/// One Monte Carlo run: either error metrics or a failure cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub failure: Option<String>,
    pub ive_errors: Option<RunErrors>,
    pub final_errors: Option<RunErrors>,
    pub diagnostics: Option<RunDiagnostics>,
}

/// Interquartile means of the four error metrics over a cell's
/// successful runs, for one stage of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageAggregate {
    pub location_cm: f64,
    pub orientation_deg: f64,
    pub offset_1e4s: f64,
    pub drift_us_per_s: f64,
}

fn aggregate(errors: &[RunErrors]) -> Option<StageAggregate> {
    if errors.len() < 4 {
        return None;
    }
    let pick = |f: fn(&RunErrors) -> f64| {
        let vals: Vec<f64> = errors.iter().map(f).collect();
        mean_within_iqr(&vals).expect("at least 4 finite values")
    };
    Some(StageAggregate {
        location_cm: pick(|e| e.location_cm),
        orientation_deg: pick(|e| e.orientation_deg),
        offset_1e4s: pick(|e| e.offset_1e4s),
        drift_us_per_s: pick(|e| e.drift_us_per_s),
    })
}

/// Aggregates for one noise cell. `trajectory` is `None` when the cell
/// pools every trajectory; pooled cells carry no per-run records (those
/// live in the per-trajectory cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub sigma_tdoa: f64,
    pub sigma_doa: f64,
    pub trajectory: Option<String>,
    pub runs: usize,
    pub failures: usize,
    pub ive: Option<StageAggregate>,
    pub full: Option<StageAggregate>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub base_seed: u64,
    pub n_arrays: usize,
    pub runs_per_cell: usize,
    pub sigma_odometry: f64,
    pub combine_trajectories: bool,
    pub cells: Vec<CellReport>,
    /// Per noise cell pooled across trajectories; filled only when
    /// `combine_trajectories` is set.
    pub combined: Vec<CellReport>,
}

fn run_once(
    cfg: &MonteCarloConfig,
    copts: &CalibrateOptions,
    noise: NoiseConfig,
    trajectory: TrajectoryId,
    trajectory_index: usize,
    run: usize,
) -> RunRecord {
    let seed = run_seed(cfg.base_seed, trajectory_index, run);
    let mut scenario = ScenarioConfig::preset(trajectory);
    scenario.n_arrays = cfg.n_arrays;
    scenario.seed = seed;
    scenario.noise = noise;

    let fail = |message: String| RunRecord {
        run,
        seed,
        failure: Some(message),
        ive_errors: None,
        final_errors: None,
        diagnostics: None,
    };

    let truth = match generate_scenario(&scenario) {
        Ok(t) => t,
        Err(e) => return fail(format!("scenario generation: {e}")),
    };
    let bundle = match synthesize_measurements(&truth, &scenario) {
        Ok(b) => b,
        Err(e) => return fail(format!("measurement synthesis: {e}")),
    };
    let mut opts = *copts;
    opts.weights = Some(copts.weights.unwrap_or_else(|| {
        WeightSpec::from_sigmas(noise.sigma_tdoa, noise.sigma_doa, noise.sigma_odometry)
    }));
    opts.ive.seed = seed;
    match calibrate(&bundle, Some(&truth), &opts) {
        Ok(outcome) => RunRecord {
            run,
            seed,
            failure: None,
            ive_errors: outcome.ive_errors,
            final_errors: outcome.final_errors,
            diagnostics: Some(RunDiagnostics {
                stage1_iterations: outcome.stage1_report.iterations,
                joint_iterations: outcome.joint_report.iterations,
                ive_attempts: outcome.ive_attempts,
                final_cost: outcome.joint_report.final_cost,
                joint_converged: outcome.joint_report.converged,
            }),
        },
        Err(e) => fail(e.to_string()),
    }
}

/// Runs the full sweep in parallel. Failed runs are recorded with their
/// cause and excluded from the aggregates; everything else is
/// deterministic in the base seed.
pub fn monte_carlo(
    cfg: &MonteCarloConfig,
    copts: &CalibrateOptions,
) -> Result<MonteCarloReport, CalibError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &sigma_tdoa in &cfg.sigma_tdoa {
        for &sigma_doa in &cfg.sigma_doa {
            let noise = NoiseConfig {
                sigma_tdoa,
                sigma_doa,
                sigma_odometry: cfg.sigma_odometry,
            };
            for (trajectory_index, &trajectory) in cfg.trajectories.iter().enumerate() {
                for run in 0..cfg.runs_per_cell {
                    jobs.push((noise, trajectory, trajectory_index, run));
                }
            }
        }
    }
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(noise, trajectory, trajectory_index, run)| {
            run_once(cfg, copts, noise, trajectory, trajectory_index, run)
        })
        .collect();

    let mut cells = Vec::new();
    let mut combined = Vec::new();
    let mut chunk = records.chunks_exact(cfg.runs_per_cell);
    for &sigma_tdoa in &cfg.sigma_tdoa {
        for &sigma_doa in &cfg.sigma_doa {
            let mut pooled_ive = Vec::new();
            let mut pooled_full = Vec::new();
            let mut pooled_failures = 0;
            for &trajectory in &cfg.trajectories {
                let cell_records: Vec<RunRecord> =
                    chunk.next().expect("job count matches").to_vec();
                let ive_errors: Vec<RunErrors> =
                    cell_records.iter().filter_map(|r| r.ive_errors).collect();
                let full_errors: Vec<RunErrors> =
                    cell_records.iter().filter_map(|r| r.final_errors).collect();
                let failures = cell_records
                    .iter()
                    .filter(|r| r.failure.is_some())
                    .count();
                pooled_ive.extend(ive_errors.iter().copied());
                pooled_full.extend(full_errors.iter().copied());
                pooled_failures += failures;
                cells.push(CellReport {
                    sigma_tdoa,
                    sigma_doa,
                    trajectory: Some(trajectory.name().to_string()),
                    runs: cell_records.len(),
                    failures,
                    ive: aggregate(&ive_errors),
                    full: aggregate(&full_errors),
                    records: cell_records,
                });
            }
            if cfg.combine_trajectories {
                combined.push(CellReport {
                    sigma_tdoa,
                    sigma_doa,
                    trajectory: None,
                    runs: cfg.runs_per_cell * cfg.trajectories.len(),
                    failures: pooled_failures,
                    ive: aggregate(&pooled_ive),
                    full: aggregate(&pooled_full),
                    records: Vec::new(),
                });
            }
        }
    }
    Ok(MonteCarloReport {
        base_seed: cfg.base_seed,
        n_arrays: cfg.n_arrays,
        runs_per_cell: cfg.runs_per_cell,
        sigma_odometry: cfg.sigma_odometry,
        combine_trajectories: cfg.combine_trajectories,
        cells,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn interquartile_mean_matches_hand_computation() {
        let v: Vec<f64> = (0..9).map(|k| k as f64).chain(std::iter::once(100.0)).collect();
        assert_eq!(mean_within_iqr(&v).unwrap(), 4.5);
        assert_eq!(mean_within_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mean_within_iqr(&[7.0; 8]).unwrap(), 7.0);
        let shuffled = [3.0, 0.0, 100.0, 4.0, 1.0, 6.0, 2.0, 8.0, 5.0, 7.0];
        assert_eq!(mean_within_iqr(&shuffled).unwrap(), 4.5);
    }

    #[test]
    fn interquartile_mean_rejects_bad_input() {
        assert!(mean_within_iqr(&[1.0, 2.0, 3.0]).is_err());
        assert!(mean_within_iqr(&[1.0, 2.0, f64::NAN, 4.0]).is_err());
    }

    #[test]
    fn calibrate_recovers_noiseless_scenario() {
        let mut cfg = ScenarioConfig::preset(TrajectoryId::Traj1);
        cfg.seed = 4;
        let truth = generate_scenario(&cfg).unwrap();
        let bundle = synthesize_measurements(&truth, &cfg).unwrap();
        let mut opts = CalibrateOptions::default();
        opts.ive.seed = 4;
        let run = calibrate(&bundle, Some(&truth), &opts).unwrap();
        let errors = run.final_errors.unwrap();
        assert!(errors.location_cm < 1e-4, "loc {:.3e}", errors.location_cm);
        assert!(errors.orientation_deg < 1e-4);
        assert!(errors.offset_1e4s < 1e-4);
        assert!(errors.drift_us_per_s < 1e-2);
        assert!(run.joint_report.converged);
        let ive_errors = run.ive_errors.unwrap();
        assert!(errors.location_cm <= ive_errors.location_cm + 1e-12);
    }

    #[test]
    fn error_metrics_match_hand_computation() {
        let mut cfg = ScenarioConfig::preset(TrajectoryId::Traj1);
        cfg.seed = 11;
        cfg.n_arrays = 3;
        let truth = generate_scenario(&cfg).unwrap();
        let mut states = truth.states.clone();
        states[1].position += Vector3::new(0.03, 0.0, 0.04);
        states[2].position += Vector3::new(0.0, 0.05, 0.0);
        states[1].time_offset += 2e-4;
        states[2].time_offset -= 2e-4;
        states[0].clock_drift += 3e-6;
        states[1].clock_drift += 3e-6;
        states[2].clock_drift -= 3e-6;
        let params =
            ParameterVector::from_states(&states, truth.trajectory.positions()).unwrap();
        let errors = compute_errors(&params, &truth);
        let expected_loc = ((0.05f64.powi(2) + 0.05f64.powi(2)) / 2.0).sqrt() * 100.0;
        assert!((errors.location_cm - expected_loc).abs() < 1e-9);
        assert!(errors.orientation_deg.abs() < 1e-12);
        assert!((errors.offset_1e4s - 2.0).abs() < 1e-9);
        assert!((errors.drift_us_per_s - 3.0).abs() < 1e-9);
    }

    fn tiny_grid(base_seed: u64) -> MonteCarloConfig {
        MonteCarloConfig {
            sigma_tdoa: vec![1e-4],
            sigma_doa: vec![10f64.to_radians()],
            sigma_odometry: 3e-2,
            trajectories: vec![TrajectoryId::Traj1],
            n_arrays: 3,
            runs_per_cell: 5,
            base_seed,
            combine_trajectories: false,
        }
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let cfg = tiny_grid(77);
        let opts = CalibrateOptions::default();
        let a = monte_carlo(&cfg, &opts).unwrap();
        let b = monte_carlo(&cfg, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 1);
        assert_eq!(a.cells[0].runs, 5);
        assert_eq!(a.cells[0].failures, 0);
        assert!(a.cells[0].full.is_some());
    }

    #[test]
    fn matched_seeds_across_noise_cells() {
        let mut cfg = tiny_grid(5);
        cfg.sigma_tdoa = vec![1e-4, 5e-4];
        let report = monte_carlo(&cfg, &CalibrateOptions::default()).unwrap();
        assert_eq!(report.cells.len(), 2);
        let seeds_a: Vec<u64> = report.cells[0].records.iter().map(|r| r.seed).collect();
        let seeds_b: Vec<u64> = report.cells[1].records.iter().map(|r| r.seed).collect();
        assert_eq!(seeds_a, seeds_b);
    }

    #[test]
    fn failures_are_counted_and_excluded() {
        let cfg = tiny_grid(13);
        let mut opts = CalibrateOptions::default();
        opts.ive.solve.max_condition = 0.5;
        opts.ive.max_restarts = 0;
        let report = monte_carlo(&cfg, &opts).unwrap();
        assert_eq!(report.cells[0].failures, 5);
        assert!(report.cells[0].ive.is_none());
        assert!(report.cells[0].full.is_none());
        assert!(report.cells[0]
            .records
            .iter()
            .all(|r| r.failure.is_some() && r.final_errors.is_none()));
    }

    #[test]
    fn combine_flag_pools_trajectories() {
        let mut cfg = tiny_grid(21);
        cfg.trajectories = vec![TrajectoryId::Traj1, TrajectoryId::Traj2];
        cfg.runs_per_cell = 4;
        cfg.combine_trajectories = true;
        let report = monte_carlo(&cfg, &CalibrateOptions::default()).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert_eq!(report.combined.len(), 1);
        assert_eq!(report.combined[0].runs, 8);
        assert!(report.combined[0].trajectory.is_none());
        assert!(report.combined[0].records.is_empty());
        assert!(report.combined[0].full.is_some());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_grid(1);
        cfg.runs_per_cell = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_grid(1);
        cfg.trajectories = vec![TrajectoryId::Custom];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_grid(1);
        cfg.sigma_doa = vec![];
        assert!(cfg.validate().is_err());
        assert!(MonteCarloConfig::benchmark_grid(0).validate().is_ok());
    }
}
