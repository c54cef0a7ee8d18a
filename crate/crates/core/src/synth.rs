//! Synthetic scenarios: ground-truth generation and measurement synthesis
//! with configurable noise, fully determined by a seed.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::error::CalibError;
use crate::model::{
    predict_doa, predict_odometry, predict_tdoa_m, predict_tdoa_s, ArrayState, MeasurementBundle,
    ParameterVector, SourceTrajectory, DEFAULT_SPEED_OF_SOUND,
};
use crate::so3::RotVec;

/// Sources are redrawn until at least this far from every array (meters).
pub const MIN_SOURCE_ARRAY_SEPARATION: f64 = 0.3;

pub const DEFAULT_N_ARRAYS: usize = 5;
pub const DEFAULT_TAU_MAX: f64 = 0.1;
pub const DEFAULT_DELTA_MAX: f64 = 1e-4;
pub const DEFAULT_SIGMA_ODOMETRY: f64 = 3e-2;

const INTERVAL_MIN: f64 = 0.5;
const INTERVAL_MAX: f64 = 2.0;
const REJECTION_CAP: usize = 10_000;

/// Stream tags so scenario geometry, measurement noise, and solver
/// initialization each get an independent generator from one seed.
const STREAM_SCENARIO: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INIT: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a base seed and a tag.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

pub fn scenario_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SCENARIO))
}

pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_NOISE))
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_INIT))
}

/// The three benchmark trajectories plus a user-defined box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryId {
    Traj1,
    Traj2,
    Traj3,
    Custom,
}

impl TrajectoryId {
    pub const PRESETS: [TrajectoryId; 3] =
        [TrajectoryId::Traj1, TrajectoryId::Traj2, TrajectoryId::Traj3];

    /// Axis-aligned workspace box centered on the origin, or None for
    /// `Custom`.
    pub fn preset_workspace(&self) -> Option<[(f64, f64); 3]> {
        match self {
            TrajectoryId::Traj1 => Some([(-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5)]),
            TrajectoryId::Traj2 => Some([(-1.0, 1.0), (-3.0, 3.0), (-1.0, 1.0)]),
            TrajectoryId::Traj3 => Some([(-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0)]),
            TrajectoryId::Custom => None,
        }
    }

    pub fn preset_events(&self) -> Option<usize> {
        match self {
            TrajectoryId::Traj1 => Some(8),
            TrajectoryId::Traj2 => Some(10),
            TrajectoryId::Traj3 => Some(14),
            TrajectoryId::Custom => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryId::Traj1 => "traj1",
            TrajectoryId::Traj2 => "traj2",
            TrajectoryId::Traj3 => "traj3",
            TrajectoryId::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<TrajectoryId> {
        match name {
            "traj1" => Some(TrajectoryId::Traj1),
            "traj2" => Some(TrajectoryId::Traj2),
            "traj3" => Some(TrajectoryId::Traj3),
            "custom" => Some(TrajectoryId::Custom),
            _ => None,
        }
    }
}

/// Noise levels in SI units (seconds, radians, meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_tdoa: f64,
    pub sigma_doa: f64,
    pub sigma_odometry: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            sigma_tdoa: 0.0,
            sigma_doa: 0.0,
            sigma_odometry: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let all = [self.sigma_tdoa, self.sigma_doa, self.sigma_odometry];
        if all.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(CalibError::InvalidConfig(
                "noise sigmas must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to generate one scenario and its measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub trajectory: TrajectoryId,
    pub n_arrays: usize,
    /// Event count; required for `Custom`, preset value otherwise.
    pub n_events: Option<usize>,
    /// Workspace box; required for `Custom`, preset value otherwise.
    pub workspace: Option<[(f64, f64); 3]>,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub tau_max: f64,
    pub delta_max: f64,
    pub speed_of_sound: f64,
}

impl ScenarioConfig {
    pub fn preset(trajectory: TrajectoryId) -> Self {
        ScenarioConfig {
            trajectory,
            n_arrays: DEFAULT_N_ARRAYS,
            n_events: None,
            workspace: None,
            noise: NoiseConfig::noiseless(),
            seed: 0,
            tau_max: DEFAULT_TAU_MAX,
            delta_max: DEFAULT_DELTA_MAX,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }

    pub fn custom(workspace: [(f64, f64); 3], n_events: usize) -> Self {
        ScenarioConfig {
            trajectory: TrajectoryId::Custom,
            n_events: Some(n_events),
            workspace: Some(workspace),
            ..Self::preset(TrajectoryId::Traj1)
        }
    }

    pub fn resolved_workspace(&self) -> Result<[(f64, f64); 3], CalibError> {
        self.workspace
            .or_else(|| self.trajectory.preset_workspace())
            .ok_or_else(|| {
                CalibError::InvalidConfig("custom trajectory needs an explicit workspace".into())
            })
    }

    pub fn resolved_events(&self) -> Result<usize, CalibError> {
        self.n_events
            .or_else(|| self.trajectory.preset_events())
            .ok_or_else(|| {
                CalibError::InvalidConfig("custom trajectory needs an explicit event count".into())
            })
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if self.n_arrays < 2 {
            return Err(CalibError::InvalidConfig(format!(
                "need at least 2 arrays, got {}",
                self.n_arrays
            )));
        }
        let k = self.resolved_events()?;
        if k < 2 {
            return Err(CalibError::InsufficientEvents { got: k, min: 2 });
        }
        let ws = self.resolved_workspace()?;
        if ws.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite()) || lo >= hi) {
            return Err(CalibError::InvalidConfig(
                "workspace bounds must be finite with lo < hi on every axis".into(),
            ));
        }
        if !(self.tau_max.is_finite() && self.tau_max >= 0.0)
            || !(self.delta_max.is_finite() && self.delta_max >= 0.0)
        {
            return Err(CalibError::InvalidConfig(
                "tau_max and delta_max must be finite and non-negative".into(),
            ));
        }
        if !self.speed_of_sound.is_finite() || self.speed_of_sound <= 0.0 {
            return Err(CalibError::InvalidConfig(
                "speed of sound must be positive".into(),
            ));
        }
        self.noise.validate()
    }
}

/// True array states and source trajectory of a generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub states: Vec<ArrayState>,
    pub trajectory: SourceTrajectory,
}

impl GroundTruth {
    pub fn parameters(&self) -> ParameterVector {
        ParameterVector::from_states(&self.states, self.trajectory.positions())
            .expect("ground truth is gauge-pinned by construction")
    }
}

fn uniform_in_box(rng: &mut ChaCha8Rng, ws: &[(f64, f64); 3]) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(ws[0].0..ws[0].1),
        rng.random_range(ws[1].0..ws[1].1),
        rng.random_range(ws[2].0..ws[2].1),
    )
}

/// Draws a ground-truth scenario. Draw order is fixed for reproducibility:
/// positions of arrays 2..N, their orientations (uniform axis, angle
/// uniform in [0, pi]), their time offsets, clock drifts of all N arrays,
/// then sources (rejection-sampled against the array positions including
/// the gauge origin), then emission intervals.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<GroundTruth, CalibError> {
    cfg.validate()?;
    let ws = cfg.resolved_workspace()?;
    let k = cfg.resolved_events()?;
    let n = cfg.n_arrays;
    let mut rng = scenario_rng(cfg.seed);

    let positions: Vec<Vector3<f64>> = (1..n).map(|_| uniform_in_box(&mut rng, &ws)).collect();
    let orientations: Vec<RotVec> = (1..n)
        .map(|_| {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            RotVec::new(Vector3::from_row_slice(&axis) * angle)
        })
        .collect();
    let offsets: Vec<f64> = (1..n)
        .map(|_| rng.random_range(-cfg.tau_max..cfg.tau_max))
        .collect();
    let drifts: Vec<f64> = (0..n)
        .map(|_| rng.random_range(-cfg.delta_max..cfg.delta_max))
        .collect();

    let mut all_array_positions = vec![Vector3::zeros()];
    all_array_positions.extend(positions.iter().copied());
    let mut sources = Vec::with_capacity(k);
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..REJECTION_CAP {
            let candidate = uniform_in_box(&mut rng, &ws);
            let clear = all_array_positions
                .iter()
                .all(|p| (candidate - p).norm() >= MIN_SOURCE_ARRAY_SEPARATION);
            if clear {
                accepted = Some(candidate);
                break;
            }
        }
        sources.push(accepted.ok_or_else(|| {
            CalibError::InvalidConfig(format!(
                "could not place a source at least {MIN_SOURCE_ARRAY_SEPARATION} m from \
                 every array after {REJECTION_CAP} draws; workspace too crowded"
            ))
        })?);
    }
    let intervals: Vec<f64> = (0..k - 1)
        .map(|_| rng.random_range(INTERVAL_MIN..INTERVAL_MAX))
        .collect();

    let mut states = vec![ArrayState::gauge(drifts[0])];
    for i in 1..n {
        states.push(ArrayState {
            position: positions[i - 1],
            orientation: orientations[i - 1],
            time_offset: offsets[i - 1],
            clock_drift: drifts[i],
        });
    }
    Ok(GroundTruth {
        states,
        trajectory: SourceTrajectory::new(sources, intervals)?,
    })
}

/// Synthesizes a measurement bundle from ground truth, applying the
/// configured noise. Noise variates are always drawn in a fixed order so
/// scenarios with the same seed stay aligned across noise levels; a zero
/// sigma skips the application, leaving the clean value bit-for-bit.
pub fn synthesize_measurements(
    truth: &GroundTruth,
    cfg: &ScenarioConfig,
) -> Result<MeasurementBundle, CalibError> {
    cfg.noise.validate()?;
    let mut rng = noise_rng(cfg.seed);
    let c = cfg.speed_of_sound;
    let states = &truth.states;
    let traj = &truth.trajectory;
    let sources = traj.positions();
    let emission = traj.emission_offsets();
    let n = states.len();
    let k = traj.n_events();
    let noise = &cfg.noise;

    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut tdoa_s = DMatrix::zeros(n, k - 1);
    for (i, st) in states.iter().enumerate() {
        for j in 0..k - 1 {
            let clean = predict_tdoa_s(st, &sources[j], &sources[j + 1], traj.intervals()[j], c)?;
            let e = normal();
            tdoa_s[(i, j)] = if noise.sigma_tdoa > 0.0 {
                clean + noise.sigma_tdoa * e
            } else {
                clean
            };
        }
    }

    let mut tdoa_m = DMatrix::zeros(n - 1, k);
    for j in 0..k {
        for (i, st) in states.iter().enumerate().skip(1) {
            let clean = predict_tdoa_m(st, states[0].clock_drift, &sources[j], emission[j], c)?;
            let e = normal();
            tdoa_m[(i - 1, j)] = if noise.sigma_tdoa > 0.0 {
                clean + noise.sigma_tdoa * e
            } else {
                clean
            };
        }
    }

    let mut doa = Vec::with_capacity(n * k);
    for j in 0..k {
        for st in states.iter() {
            let clean = predict_doa(st, &sources[j])?;
            let e = Vector3::new(normal(), normal(), normal());
            doa.push(if noise.sigma_doa > 0.0 {
                crate::so3::exp(&(e * noise.sigma_doa))
                    .apply(&clean)
                    .normalize()
            } else {
                clean
            });
        }
    }

    let mut odometry = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let clean = predict_odometry(&sources[j], &sources[j + 1]);
        let e = Vector3::new(normal(), normal(), normal());
        odometry.push(if noise.sigma_odometry > 0.0 {
            clean + e * noise.sigma_odometry
        } else {
            clean
        });
    }

    MeasurementBundle::new(
        tdoa_s,
        tdoa_m,
        doa,
        odometry,
        traj.intervals().to_vec(),
        c,
    )
}
