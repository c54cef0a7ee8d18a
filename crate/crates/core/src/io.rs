//! JSON file formats plus the CSV summary writer.
//!
//! On-disk units are carried in the field names: `_m` meters, `_s`
//! seconds, `_ms` milliseconds, `_deg` degrees, `_rad` radians. DOA
//! entries are dimensionless unit vectors stored event-major (all arrays
//! for event 0, then event 1, ...). Numbers round-trip exactly through
//! JSON, so rewriting an unmodified file is byte-identical.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::CalibError;
use crate::model::{ArrayState, MeasurementBundle, ParameterVector, SourceTrajectory};
use crate::pipeline::{
    CalibrationRun, MonteCarloReport, RunErrors, RunRecord, StageAggregate,
};
use crate::so3::RotVec;
use crate::solver::{SolveReport, WeightSpec};
use crate::synth::{GroundTruth, NoiseConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: String,
        #[source]
        source: CalibError,
    },
    #[error("{path}: unsupported schema version {got} (this build reads {expected})")]
    SchemaVersion { path: String, got: u32, expected: u32 },
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path_str(path),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| FileError::Parse {
        path: path_str(path),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| FileError::Io {
        path: path_str(path),
        source,
    })
}

fn check_version(path: &Path, got: u32) -> Result<(), FileError> {
    if got != SCHEMA_VERSION {
        return Err(FileError::SchemaVersion {
            path: path_str(path),
            got,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

fn invalid(path: &Path, source: CalibError) -> FileError {
    FileError::Invalid {
        path: path_str(path),
        source,
    }
}

fn to_triple(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn from_triple(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Noise levels in reporting units (TDOA in ms, DOA in degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub sigma_tdoa_ms: f64,
    pub sigma_doa_deg: f64,
    pub sigma_odometry_m: f64,
}

impl NoiseMeta {
    pub fn from_config(noise: &NoiseConfig) -> Self {
        NoiseMeta {
            sigma_tdoa_ms: noise.sigma_tdoa * 1e3,
            sigma_doa_deg: noise.sigma_doa.to_degrees(),
            sigma_odometry_m: noise.sigma_odometry,
        }
    }

    pub fn to_config(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_tdoa: self.sigma_tdoa_ms * 1e-3,
            sigma_doa: self.sigma_doa_deg.to_radians(),
            sigma_odometry: self.sigma_odometry_m,
        }
    }
}

/// One array's pose and clock, used for both ground truth and estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayPose {
    pub position_m: [f64; 3],
    pub rotation_rad: [f64; 3],
    pub time_offset_s: f64,
    pub clock_drift: f64,
}

impl ArrayPose {
    fn from_state(state: &ArrayState) -> Self {
        ArrayPose {
            position_m: to_triple(&state.position),
            rotation_rad: to_triple(&state.orientation.vector()),
            time_offset_s: state.time_offset,
            clock_drift: state.clock_drift,
        }
    }

    fn to_state(self) -> ArrayState {
        ArrayState {
            position: from_triple(self.position_m),
            orientation: RotVec::new(from_triple(self.rotation_rad)),
            time_offset: self.time_offset_s,
            clock_drift: self.clock_drift,
        }
    }
}

/// Array states plus source positions, as written for ground truth and
/// for estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub arrays: Vec<ArrayPose>,
    pub sources_m: Vec<[f64; 3]>,
}

impl PoseSet {
    pub fn from_truth(truth: &GroundTruth) -> Self {
        PoseSet {
            arrays: truth.states.iter().map(ArrayPose::from_state).collect(),
            sources_m: truth
                .trajectory
                .positions()
                .iter()
                .map(to_triple)
                .collect(),
        }
    }

    pub fn from_params(params: &ParameterVector) -> Self {
        PoseSet {
            arrays: params.states().iter().map(ArrayPose::from_state).collect(),
            sources_m: params.sources().iter().map(to_triple).collect(),
        }
    }

    pub fn to_ground_truth(&self, intervals: &[f64]) -> Result<GroundTruth, CalibError> {
        let states: Vec<ArrayState> = self.arrays.iter().map(|a| a.to_state()).collect();
        if states.is_empty() {
            return Err(CalibError::DimensionMismatch(
                "ground truth has no arrays".into(),
            ));
        }
        let positions = self.sources_m.iter().copied().map(from_triple).collect();
        let trajectory = SourceTrajectory::new(positions, intervals.to_vec())?;
        Ok(GroundTruth { states, trajectory })
    }
}

/// A measurement bundle on disk. `tdoa_consecutive_s` has one row per
/// array (consecutive-event differences, K-1 entries); `tdoa_interarray_s`
/// has one row per non-reference array (K entries against array 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFile {
    pub schema_version: u32,
    pub trajectory: Option<String>,
    pub seed: Option<u64>,
    pub n_arrays: usize,
    pub n_events: usize,
    pub speed_of_sound_m_s: f64,
    pub emission_intervals_s: Vec<f64>,
    pub tdoa_consecutive_s: Vec<Vec<f64>>,
    pub tdoa_interarray_s: Vec<Vec<f64>>,
    pub doa: Vec<[f64; 3]>,
    pub odometry_m: Vec<[f64; 3]>,
    pub noise: Option<NoiseMeta>,
    pub truth: Option<PoseSet>,
}

fn matrix_from_rows(
    rows: &[Vec<f64>],
    ncols: usize,
    what: &str,
) -> Result<DMatrix<f64>, CalibError> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(CalibError::DimensionMismatch(format!(
                "{what} row {i} has {} entries, expected {ncols}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl BundleFile {
    pub fn from_bundle(
        bundle: &MeasurementBundle,
        noise: Option<NoiseMeta>,
        truth: Option<PoseSet>,
        trajectory: Option<String>,
        seed: Option<u64>,
    ) -> Self {
        let n = bundle.n_arrays();
        let k = bundle.n_events();
        let tdoa_consecutive_s = (0..n)
            .map(|i| (0..k - 1).map(|j| bundle.tdoa_s(i, j)).collect())
            .collect();
        let tdoa_interarray_s = (1..n)
            .map(|i| (0..k).map(|j| bundle.tdoa_m(i, j)).collect())
            .collect();
        let doa = (0..k)
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| to_triple(bundle.doa(i, j)))
            .collect();
        let odometry_m = (0..k - 1).map(|j| to_triple(bundle.odometry(j))).collect();
        BundleFile {
            schema_version: SCHEMA_VERSION,
            trajectory,
            seed,
            n_arrays: n,
            n_events: k,
            speed_of_sound_m_s: bundle.speed_of_sound(),
            emission_intervals_s: bundle.intervals().to_vec(),
            tdoa_consecutive_s,
            tdoa_interarray_s,
            doa,
            odometry_m,
            noise,
            truth,
        }
    }

    /// Rebuilds the bundle, re-running every dimension and unit-norm
    /// check. DOA vectors are used exactly as stored, not renormalized.
    pub fn to_bundle(&self) -> Result<MeasurementBundle, CalibError> {
        if self.n_events == 0 {
            return Err(CalibError::DimensionMismatch(
                "need at least 1 event".into(),
            ));
        }
        if self.tdoa_consecutive_s.len() != self.n_arrays {
            return Err(CalibError::DimensionMismatch(format!(
                "{} consecutive-TDOA rows, expected {}",
                self.tdoa_consecutive_s.len(),
                self.n_arrays
            )));
        }
        let tdoa_s = matrix_from_rows(
            &self.tdoa_consecutive_s,
            self.n_events - 1,
            "consecutive TDOA",
        )?;
        let tdoa_m = matrix_from_rows(&self.tdoa_interarray_s, self.n_events, "inter-array TDOA")?;
        let doa = self.doa.iter().copied().map(from_triple).collect();
        let odometry = self.odometry_m.iter().copied().map(from_triple).collect();
        MeasurementBundle::new(
            tdoa_s,
            tdoa_m,
            doa,
            odometry,
            self.emission_intervals_s.clone(),
            self.speed_of_sound_m_s,
        )
    }

    pub fn ground_truth(&self) -> Result<Option<GroundTruth>, CalibError> {
        self.truth
            .as_ref()
            .map(|t| t.to_ground_truth(&self.emission_intervals_s))
            .transpose()
    }
}

pub fn read_bundle(path: &Path) -> Result<(MeasurementBundle, BundleFile), FileError> {
    let file: BundleFile = read_json(path)?;
    check_version(path, file.schema_version)?;
    let bundle = file.to_bundle().map_err(|e| invalid(path, e))?;
    Ok((bundle, file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub condition: f64,
    pub lambda_final: f64,
}

impl SolveSummary {
    fn from_report(report: &SolveReport) -> Self {
        SolveSummary {
            iterations: report.iterations,
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            converged: report.converged,
            condition: report.condition,
            lambda_final: report.lambda_final,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightsUsed {
    pub tdoa: f64,
    pub doa: f64,
    pub odometry: f64,
}

/// Result of one `calibrate` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub schema_version: u32,
    pub n_arrays: usize,
    pub n_events: usize,
    pub weights: WeightsUsed,
    pub estimate: PoseSet,
    pub initial_estimate: PoseSet,
    pub stage1: SolveSummary,
    pub joint: SolveSummary,
    pub ive_attempts: usize,
    pub initial_errors: Option<RunErrors>,
    pub errors: Option<RunErrors>,
}

impl CalibrationFile {
    pub fn from_run(run: &CalibrationRun, weights: &WeightSpec) -> Self {
        let layout = run.estimate.layout();
        CalibrationFile {
            schema_version: SCHEMA_VERSION,
            n_arrays: layout.n_arrays,
            n_events: layout.n_events,
            weights: WeightsUsed {
                tdoa: weights.tdoa,
                doa: weights.doa,
                odometry: weights.odometry,
            },
            estimate: PoseSet::from_params(&run.estimate),
            initial_estimate: PoseSet::from_params(&run.ive_estimate),
            stage1: SolveSummary::from_report(&run.stage1_report),
            joint: SolveSummary::from_report(&run.joint_report),
            ive_attempts: run.ive_attempts,
            initial_errors: run.ive_errors,
            errors: run.final_errors,
        }
    }
}

/// One Monte Carlo cell with sigmas in reporting units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub sigma_tdoa_ms: f64,
    pub sigma_doa_deg: f64,
    pub trajectory: Option<String>,
    pub runs: usize,
    pub failures: usize,
    pub ive: Option<StageAggregate>,
    pub full: Option<StageAggregate>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloFile {
    pub schema_version: u32,
    pub base_seed: u64,
    pub n_arrays: usize,
    pub runs_per_cell: usize,
    pub sigma_odometry_m: f64,
    pub combine_trajectories: bool,
    pub cells: Vec<CellFile>,
    pub combined: Vec<CellFile>,
}

fn cell_to_file(cell: &crate::pipeline::CellReport) -> CellFile {
    CellFile {
        sigma_tdoa_ms: cell.sigma_tdoa * 1e3,
        sigma_doa_deg: cell.sigma_doa.to_degrees(),
        trajectory: cell.trajectory.clone(),
        runs: cell.runs,
        failures: cell.failures,
        ive: cell.ive,
        full: cell.full,
        records: cell.records.clone(),
    }
}

impl MonteCarloFile {
    pub fn from_report(report: &MonteCarloReport) -> Self {
        MonteCarloFile {
            schema_version: SCHEMA_VERSION,
            base_seed: report.base_seed,
            n_arrays: report.n_arrays,
            runs_per_cell: report.runs_per_cell,
            sigma_odometry_m: report.sigma_odometry,
            combine_trajectories: report.combine_trajectories,
            cells: report.cells.iter().map(cell_to_file).collect(),
            combined: report.combined.iter().map(cell_to_file).collect(),
        }
    }
}

pub fn read_monte_carlo(path: &Path) -> Result<MonteCarloFile, FileError> {
    let file: MonteCarloFile = read_json(path)?;
    check_version(path, file.schema_version)?;
    Ok(file)
}

fn csv_row(out: &mut String, stage: &str, cell: &CellFile, agg: &Option<StageAggregate>) {
    let trajectory = cell.trajectory.as_deref().unwrap_or("all");
    out.push_str(&format!(
        "{stage},{trajectory},{:.4},{:.2},{},{}",
        cell.sigma_tdoa_ms, cell.sigma_doa_deg, cell.runs, cell.failures
    ));
    match agg {
        Some(a) => out.push_str(&format!(
            ",{:.4},{:.4},{:.4},{:.4}\n",
            a.location_cm, a.orientation_deg, a.offset_1e4s, a.drift_us_per_s
        )),
        None => out.push_str(",,,,\n"),
    }
}

/// Flat per-cell summary of a sweep, two rows per cell (initial estimate
/// and full pipeline). Cells with fewer than four successes leave the
/// metric columns empty.
pub fn summary_csv(file: &MonteCarloFile) -> String {
    let mut out = String::from(
        "stage,trajectory,sigma_tdoa_ms,sigma_doa_deg,runs,failures,\
         location_cm,orientation_deg,offset_1e4s,drift_us_per_s\n",
    );
    for cell in file.cells.iter().chain(file.combined.iter()) {
        csv_row(&mut out, "ive", cell, &cell.ive);
        csv_row(&mut out, "full", cell, &cell.full);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FileError> {
    fs::write(path, text).map_err(|source| FileError::Io {
        path: path_str(path),
        source,
    })
}
