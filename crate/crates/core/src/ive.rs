//! Initial value estimation in two stages. Stage one solves a reduced
//! least-squares problem (both TDOA families, the gauge array's DOA, and
//! odometry) for array positions, time offsets, clock drifts, and sources;
//! orientations do not enter because non-gauge DOA rows are left out.
//! Stage two recovers each remaining orientation by registering the
//! range-lifted DOA point sets of that array against the gauge array's.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::CalibError;
use crate::model::{ArrayState, MeasurementBundle, ParameterVector};
use crate::so3::RotMat;
use crate::solver::{self, GnProblem, SolveOptions, SolveReport, WeightSpec};
use crate::synth::init_rng;

/// Stage one needs this many events for the clock terms to be observable.
pub const MIN_STAGE1_EVENTS: usize = 4;

/// Registration needs this many correspondences.
pub const MIN_ICP_POINTS: usize = 3;

/// Default range guess (meters) for dead-reckoning the first source from
/// the gauge array's first DOA ray.
pub const DEFAULT_ANCHOR_RANGE: f64 = 1.5;

/// Stage-one unknowns. `positions` and `time_offsets` cover arrays 2..N;
/// `clock_drifts` covers all N arrays (index 0 is the gauge).
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Estimate {
    pub positions: Vec<Vector3<f64>>,
    pub time_offsets: Vec<f64>,
    pub clock_drifts: Vec<f64>,
    pub sources: Vec<Vector3<f64>>,
}

impl Stage1Estimate {
    /// Default initialization: sources dead-reckoned from the gauge
    /// array's first DOA ray (scaled by `anchor_range`) chained through
    /// odometry; offsets and drifts start at zero.
    pub fn dead_reckoned(
        bundle: &MeasurementBundle,
        array_positions: Vec<Vector3<f64>>,
        anchor_range: f64,
    ) -> Self {
        let k = bundle.n_events();
        let mut sources = Vec::with_capacity(k);
        sources.push(-bundle.doa(0, 0) * anchor_range);
        for j in 0..k - 1 {
            let prev = sources[j];
            sources.push(prev + bundle.odometry(j));
        }
        let n = bundle.n_arrays();
        Stage1Estimate {
            positions: array_positions,
            time_offsets: vec![0.0; n - 1],
            clock_drifts: vec![0.0; n],
            sources,
        }
    }

    fn to_vector(&self, layout: Stage1Layout) -> DVector<f64> {
        let mut x = DVector::zeros(layout.dim());
        x[0] = self.clock_drifts[0];
        for i in 1..layout.n_arrays {
            x.fixed_rows_mut::<3>(layout.position(i))
                .copy_from(&self.positions[i - 1]);
            x[layout.time_offset(i)] = self.time_offsets[i - 1];
            x[layout.clock_drift(i)] = self.clock_drifts[i];
        }
        for (j, s) in self.sources.iter().enumerate() {
            x.fixed_rows_mut::<3>(layout.source(j)).copy_from(s);
        }
        x
    }

    fn from_vector(layout: Stage1Layout, x: &DVector<f64>) -> Self {
        let mut positions = Vec::with_capacity(layout.n_arrays - 1);
        let mut time_offsets = Vec::with_capacity(layout.n_arrays - 1);
        let mut clock_drifts = Vec::with_capacity(layout.n_arrays);
        clock_drifts.push(x[0]);
        for i in 1..layout.n_arrays {
            positions.push(x.fixed_rows::<3>(layout.position(i)).into_owned());
            time_offsets.push(x[layout.time_offset(i)]);
            clock_drifts.push(x[layout.clock_drift(i)]);
        }
        let sources = (0..layout.n_events)
            .map(|j| x.fixed_rows::<3>(layout.source(j)).into_owned())
            .collect();
        Stage1Estimate {
            positions,
            time_offsets,
            clock_drifts,
            sources,
        }
    }
}

/// Column layout of the stage-one parameter vector:
/// `[drift_1 | per array i >= 2: position(3), offset, drift | sources]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stage1Layout {
    n_arrays: usize,
    n_events: usize,
}

impl Stage1Layout {
    fn dim(&self) -> usize {
        1 + 5 * (self.n_arrays - 1) + 3 * self.n_events
    }

    fn position(&self, array: usize) -> usize {
        1 + 5 * (array - 1)
    }

    fn time_offset(&self, array: usize) -> usize {
        self.position(array) + 3
    }

    fn clock_drift(&self, array: usize) -> usize {
        if array == 0 {
            0
        } else {
            self.position(array) + 4
        }
    }

    fn source(&self, event: usize) -> usize {
        1 + 5 * (self.n_arrays - 1) + 3 * event
    }

    fn rows_tdoa(&self) -> usize {
        self.n_arrays * (self.n_events - 1) + (self.n_arrays - 1) * self.n_events
    }

    fn rows(&self) -> usize {
        self.rows_tdoa() + 3 * self.n_events + 3 * (self.n_events - 1)
    }

    fn tdoa_s_row(&self, array: usize, event: usize) -> usize {
        array * (self.n_events - 1) + event
    }

    fn tdoa_m_row(&self, array: usize, event: usize) -> usize {
        self.n_arrays * (self.n_events - 1) + event * (self.n_arrays - 1) + (array - 1)
    }

    fn doa_row(&self, event: usize) -> usize {
        self.rows_tdoa() + 3 * event
    }

    fn odometry_row(&self, event: usize) -> usize {
        self.rows_tdoa() + 3 * self.n_events + 3 * event
    }
}

/// The reduced stage-one least-squares problem over one bundle.
#[derive(Debug)]
pub struct Stage1Problem {
    layout: Stage1Layout,
    measured: DVector<f64>,
    intervals: Vec<f64>,
    offsets: Vec<f64>,
    speed_of_sound: f64,
}

impl Stage1Problem {
    pub fn new(bundle: &MeasurementBundle) -> Result<Self, CalibError> {
        let k = bundle.n_events();
        if k < MIN_STAGE1_EVENTS {
            return Err(CalibError::InsufficientEvents {
                got: k,
                min: MIN_STAGE1_EVENTS,
            });
        }
        let layout = Stage1Layout {
            n_arrays: bundle.n_arrays(),
            n_events: k,
        };
        let mut z = DVector::zeros(layout.rows());
        for i in 0..layout.n_arrays {
            for j in 0..k - 1 {
                z[layout.tdoa_s_row(i, j)] = bundle.tdoa_s(i, j);
            }
        }
        for j in 0..k {
            for i in 1..layout.n_arrays {
                z[layout.tdoa_m_row(i, j)] = bundle.tdoa_m(i, j);
            }
        }
        for j in 0..k {
            z.fixed_rows_mut::<3>(layout.doa_row(j))
                .copy_from(bundle.doa(0, j));
        }
        for j in 0..k - 1 {
            z.fixed_rows_mut::<3>(layout.odometry_row(j))
                .copy_from(bundle.odometry(j));
        }
        Ok(Stage1Problem {
            layout,
            measured: z,
            intervals: bundle.intervals().to_vec(),
            offsets: bundle.emission_offsets(),
            speed_of_sound: bundle.speed_of_sound(),
        })
    }

    fn geometry(
        &self,
        x: &DVector<f64>,
    ) -> Result<Vec<Vec<(f64, Vector3<f64>)>>, CalibError> {
        let layout = self.layout;
        let mut pairs = Vec::with_capacity(layout.n_arrays);
        for i in 0..layout.n_arrays {
            let p = if i == 0 {
                Vector3::zeros()
            } else {
                x.fixed_rows::<3>(layout.position(i)).into_owned()
            };
            let mut row = Vec::with_capacity(layout.n_events);
            for j in 0..layout.n_events {
                let s = x.fixed_rows::<3>(layout.source(j)).into_owned();
                let gap = p - s;
                let d = gap.norm();
                if d < 1e-9 {
                    return Err(CalibError::DegenerateGeometry { separation: d });
                }
                row.push((d, gap / d));
            }
            pairs.push(row);
        }
        Ok(pairs)
    }
}

impl GnProblem for Stage1Problem {
    fn residual_dim(&self) -> usize {
        self.layout.rows()
    }

    fn param_dim(&self) -> usize {
        self.layout.dim()
    }

    fn rotation_blocks(&self) -> Vec<usize> {
        vec![]
    }

    fn weight_diagonal(&self, weights: &WeightSpec) -> DVector<f64> {
        let layout = self.layout;
        let mut w = DVector::zeros(layout.rows());
        w.rows_mut(0, layout.rows_tdoa()).fill(weights.tdoa);
        w.rows_mut(layout.rows_tdoa(), 3 * layout.n_events)
            .fill(weights.doa);
        w.rows_mut(
            layout.rows_tdoa() + 3 * layout.n_events,
            3 * (layout.n_events - 1),
        )
        .fill(weights.odometry);
        w
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, CalibError> {
        let layout = self.layout;
        let c = self.speed_of_sound;
        let pairs = self.geometry(x)?;
        let mut pred = DVector::zeros(layout.rows());
        for i in 0..layout.n_arrays {
            let drift = x[layout.clock_drift(i)];
            for j in 0..layout.n_events - 1 {
                let (da, _) = pairs[i][j];
                let (db, _) = pairs[i][j + 1];
                pred[layout.tdoa_s_row(i, j)] =
                    (db - da) / c + (1.0 + drift) * self.intervals[j];
            }
        }
        let drift0 = x[0];
        for j in 0..layout.n_events {
            let (d_ref, _) = pairs[0][j];
            for i in 1..layout.n_arrays {
                let (d_i, _) = pairs[i][j];
                pred[layout.tdoa_m_row(i, j)] = (d_i - d_ref) / c
                    + x[layout.time_offset(i)]
                    + (x[layout.clock_drift(i)] - drift0) * self.offsets[j];
            }
        }
        for j in 0..layout.n_events {
            let (_, u) = pairs[0][j];
            pred.fixed_rows_mut::<3>(layout.doa_row(j)).copy_from(&u);
        }
        for j in 0..layout.n_events - 1 {
            let a = x.fixed_rows::<3>(layout.source(j));
            let b = x.fixed_rows::<3>(layout.source(j + 1));
            pred.fixed_rows_mut::<3>(layout.odometry_row(j))
                .copy_from(&(b - a));
        }
        Ok(pred - &self.measured)
    }

    fn residual_and_jacobian(
        &self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), CalibError> {
        let layout = self.layout;
        let c = self.speed_of_sound;
        let residual = self.residual(x)?;
        let pairs = self.geometry(x)?;
        let mut jac = DMatrix::zeros(layout.rows(), layout.dim());

        let put3 = |jac: &mut DMatrix<f64>, row: usize, col: usize, v: &Vector3<f64>| {
            for k in 0..3 {
                jac[(row, col + k)] += v[k];
            }
        };

        for i in 0..layout.n_arrays {
            for j in 0..layout.n_events - 1 {
                let row = layout.tdoa_s_row(i, j);
                let (_, u_a) = pairs[i][j];
                let (_, u_b) = pairs[i][j + 1];
                if i >= 1 {
                    put3(&mut jac, row, layout.position(i), &((u_b - u_a) / c));
                }
                put3(&mut jac, row, layout.source(j), &(u_a / c));
                put3(&mut jac, row, layout.source(j + 1), &(-u_b / c));
                jac[(row, layout.clock_drift(i))] = self.intervals[j];
            }
        }

        for j in 0..layout.n_events {
            let (_, u_ref) = pairs[0][j];
            for i in 1..layout.n_arrays {
                let row = layout.tdoa_m_row(i, j);
                let (_, u_i) = pairs[i][j];
                put3(&mut jac, row, layout.position(i), &(u_i / c));
                put3(&mut jac, row, layout.source(j), &((u_ref - u_i) / c));
                jac[(row, layout.time_offset(i))] = 1.0;
                jac[(row, layout.clock_drift(i))] = self.offsets[j];
                jac[(row, 0)] -= self.offsets[j];
            }
        }

        for j in 0..layout.n_events {
            let row = layout.doa_row(j);
            let (d, u) = pairs[0][j];
            let sensitivity = -(Matrix3::identity() - u * u.transpose()) / d;
            for r in 0..3 {
                for k in 0..3 {
                    jac[(row + r, layout.source(j) + k)] += sensitivity[(r, k)];
                }
            }
        }

        for j in 0..layout.n_events - 1 {
            let row = layout.odometry_row(j);
            for k in 0..3 {
                jac[(row + k, layout.source(j + 1) + k)] = 1.0;
                jac[(row + k, layout.source(j) + k)] = -1.0;
            }
        }

        Ok((residual, jac))
    }
}

/// Runs the reduced solve from an explicit initialization.
pub fn stage1_solve(
    bundle: &MeasurementBundle,
    init: &Stage1Estimate,
    weights: &WeightSpec,
    opts: &SolveOptions,
) -> Result<(Stage1Estimate, SolveReport), CalibError> {
    let problem = Stage1Problem::new(bundle)?;
    let x0 = init.to_vector(problem.layout);
    let (x, report) = solver::solve(&problem, x0, weights, opts)?;
    Ok((Stage1Estimate::from_vector(problem.layout, &x), report))
}

/// Scales each measured DOA ray by the estimated range, yielding the
/// source positions in the array's body frame (up to the unknown
/// orientation): `|position - source_j| * doa_j`.
pub fn lift_sources_to_array_frame(
    position: &Vector3<f64>,
    sources: &[Vector3<f64>],
    doa: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>, CalibError> {
    if sources.len() != doa.len() {
        return Err(CalibError::DimensionMismatch(format!(
            "{} sources vs {} DOA rays",
            sources.len(),
            doa.len()
        )));
    }
    let mut out = Vec::with_capacity(sources.len());
    for (s, r) in sources.iter().zip(doa.iter()) {
        let d = (position - s).norm();
        if d < 1e-9 {
            return Err(CalibError::DegenerateGeometry { separation: d });
        }
        out.push(r * d);
    }
    Ok(out)
}

/// Rigid registration of two corresponded point sets: finds the rotation
/// and translation with `global_j ~ R * local_j + t` by the SVD of the
/// centered cross-covariance, flipping the weakest direction if the
/// unconstrained optimum is a reflection.
pub fn icp_orientation(
    local: &[Vector3<f64>],
    global: &[Vector3<f64>],
) -> Result<(RotMat, Vector3<f64>), CalibError> {
    if local.len() != global.len() {
        return Err(CalibError::DimensionMismatch(format!(
            "{} local vs {} global points",
            local.len(),
            global.len()
        )));
    }
    if local.len() < MIN_ICP_POINTS {
        return Err(CalibError::InsufficientPoints {
            got: local.len(),
            min: MIN_ICP_POINTS,
        });
    }
    let count = local.len() as f64;
    let local_centroid: Vector3<f64> = local.iter().sum::<Vector3<f64>>() / count;
    let global_centroid: Vector3<f64> = global.iter().sum::<Vector3<f64>>() / count;
    let mut cross = Matrix3::zeros();
    for (l, g) in local.iter().zip(global.iter()) {
        cross += (g - global_centroid) * (l - local_centroid).transpose();
    }
    let svd = cross.svd(true, true);
    let sv = svd.singular_values;
    debug_assert!(sv[0] >= sv[1] && sv[1] >= sv[2]);
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(CalibError::DegeneratePointSet);
    }
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let sign = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if sign < 0.0 { -1.0 } else { 1.0 }));
    let rotation = RotMat::from_matrix(u * fix * v_t)?;
    let translation = global_centroid - rotation.apply(&local_centroid);
    Ok((rotation, translation))
}

/// Restart policy and stage-one solve controls for `run_ive`.
#[derive(Debug, Clone, Copy)]
pub struct IveOptions {
    pub solve: SolveOptions,
    /// Extra attempts with redrawn array positions after the first.
    pub max_restarts: usize,
    /// Seed for drawing initial array positions and restart parameters.
    pub seed: u64,
    /// Box for drawing initial array positions; inferred from the
    /// dead-reckoned source cloud when absent.
    pub workspace: Option<[(f64, f64); 3]>,
    pub anchor_range: f64,
    /// An attempt is accepted outright when its weighted cost is at most
    /// this factor times the residual row count.
    pub accept_cost_factor: f64,
}

impl Default for IveOptions {
    fn default() -> Self {
        IveOptions {
            // The reduced problem's spurious minima park an array in the far
            // field where its position Jacobian degenerates, so a conditioning
            // gate would abort exactly the attempts the polish step can fix.
            // Acceptance below and the joint stage's own gate still reject
            // solutions that stay unidentifiable.
            solve: SolveOptions {
                max_condition: f64::INFINITY,
                ..SolveOptions::default()
            },
            max_restarts: 4,
            seed: 0,
            workspace: None,
            anchor_range: DEFAULT_ANCHOR_RANGE,
            accept_cost_factor: 4.0,
        }
    }
}

/// A solved position farther than this many draw-box half-diagonals from the
/// source centroid counts as a far-field escape.
const ESCAPE_FACTOR: f64 = 10.0;

/// An array owning more than this multiple of its fair share of the TDOA cost
/// counts as misplaced (non-gauge arrays all own equally many TDOA rows).
const IMBALANCE_FACTOR: f64 = 3.0;

/// The share test only applies when the weighted cost per residual row is
/// above this, so exact fits are never flagged.
const IMBALANCE_FLOOR_PER_ROW: f64 = 1e-3;

/// Indices of non-gauge arrays whose solved state marks the estimate as a
/// spurious minimum: the position escaped far outside the draw box, or the
/// array's TDOA rows carry an outsized share of the weighted cost. Sorted
/// worst offender first.
fn suspicious_arrays(
    problem: &Stage1Problem,
    estimate: &Stage1Estimate,
    weights: &WeightSpec,
    escape_radius: f64,
) -> Result<Vec<usize>, CalibError> {
    let layout = problem.layout;
    let residual = problem.residual(&estimate.to_vector(layout))?;
    let w = problem.weight_diagonal(weights);
    let (n, k) = (layout.n_arrays, layout.n_events);
    let mut owned = vec![0.0; n];
    for i in 1..n {
        for j in 0..k - 1 {
            let r = layout.tdoa_s_row(i, j);
            owned[i] += w[r] * residual[r] * residual[r];
        }
        for j in 0..k {
            let r = layout.tdoa_m_row(i, j);
            owned[i] += w[r] * residual[r] * residual[r];
        }
    }
    let total: f64 = owned.iter().sum();
    let floor = IMBALANCE_FLOOR_PER_ROW * layout.rows() as f64;
    let fair = total / (n - 1) as f64;
    let centroid: Vector3<f64> = estimate.sources.iter().sum::<Vector3<f64>>() / k as f64;
    let mut flagged: Vec<usize> = (1..n)
        .filter(|&i| {
            let escaped = (estimate.positions[i - 1] - centroid).norm() > escape_radius;
            escaped || (total > floor && owned[i] > IMBALANCE_FACTOR * fair)
        })
        .collect();
    flagged.sort_by(|a, b| owned[*b].total_cmp(&owned[*a]));
    Ok(flagged)
}

/// Everything stage one and two produced.
#[derive(Debug, Clone)]
pub struct IveResult {
    pub params: ParameterVector,
    pub stage1: Stage1Estimate,
    pub report: SolveReport,
    pub attempts: usize,
    /// Whether the chosen attempt passed acceptance: cost within the bound,
    /// no array flagged as misplaced, and a locally identifiable solution.
    pub cost_acceptable: bool,
}

fn bounding_box(points: &[Vector3<f64>], margin: f64) -> [(f64, f64); 3] {
    let mut ws = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for p in points {
        for a in 0..3 {
            ws[a].0 = ws[a].0.min(p[a]);
            ws[a].1 = ws[a].1.max(p[a]);
        }
    }
    for b in ws.iter_mut() {
        b.0 -= margin;
        b.1 += margin;
    }
    ws
}

/// Full initial value estimation: repeated stage-one solves from random
/// array initializations until one passes acceptance (keeping the best
/// otherwise), then per-array registration for the orientations. When
/// `init` is given it is used for the first attempt unchanged.
///
/// Each attempt is polished before it is judged: arrays flagged by
/// `suspicious_arrays` are redrawn one at a time (worst first, with their
/// clock terms reset) and the reduced solve is rerun from the otherwise
/// converged estimate, keeping any improvement. An attempt is accepted when
/// its cost meets the bound, no array stays flagged, and the final normal
/// matrix is not numerically flat.
pub fn run_ive(
    bundle: &MeasurementBundle,
    init: Option<&Stage1Estimate>,
    weights: &WeightSpec,
    opts: &IveOptions,
) -> Result<IveResult, CalibError> {
    let problem = Stage1Problem::new(bundle)?;
    let rows = problem.layout.rows() as f64;
    let n = bundle.n_arrays();
    let mut rng: ChaCha8Rng = init_rng(opts.seed);

    let reference = Stage1Estimate::dead_reckoned(bundle, vec![], opts.anchor_range);
    let workspace = opts
        .workspace
        .unwrap_or_else(|| bounding_box(&reference.sources, 1.0));
    let draw_point = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        Vector3::new(
            rng.random_range(workspace[0].0..workspace[0].1),
            rng.random_range(workspace[1].0..workspace[1].1),
            rng.random_range(workspace[2].0..workspace[2].1),
        )
    };
    let escape_radius = ESCAPE_FACTOR
        * workspace
            .iter()
            .map(|(lo, hi)| (hi - lo) * (hi - lo) / 4.0)
            .sum::<f64>()
            .sqrt()
            .max(1.0);

    let bound = opts.accept_cost_factor * rows;
    let mut best: Option<(f64, Stage1Estimate, SolveReport, bool)> = None;
    let mut last_err = None;
    let mut attempts = 0;
    'attempts: for attempt in 0..=opts.max_restarts {
        attempts += 1;
        let attempt_init = match (attempt, init) {
            (0, Some(given)) => given.clone(),
            _ => {
                let anchor = if attempt == 0 {
                    opts.anchor_range
                } else {
                    rng.random_range(0.5..3.0)
                };
                let positions = (1..n).map(|_| draw_point(&mut rng)).collect();
                Stage1Estimate::dead_reckoned(bundle, positions, anchor)
            }
        };
        let (mut estimate, mut report) =
            match stage1_solve(bundle, &attempt_init, weights, &opts.solve) {
                Ok(solved) => solved,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
        let mut flags = match suspicious_arrays(&problem, &estimate, weights, escape_radius) {
            Ok(f) => f,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        for _ in 0..n + 2 {
            if flags.is_empty() {
                break;
            }
            let worst = flags[0];
            let mut retry = estimate.clone();
            retry.positions[worst - 1] = draw_point(&mut rng);
            retry.time_offsets[worst - 1] = 0.0;
            retry.clock_drifts[worst] = 0.0;
            match stage1_solve(bundle, &retry, weights, &opts.solve) {
                Ok((polished, polished_report))
                    if polished_report.final_cost < report.final_cost =>
                {
                    estimate = polished;
                    report = polished_report;
                }
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
            flags = match suspicious_arrays(&problem, &estimate, weights, escape_radius) {
                Ok(f) => f,
                Err(e) => {
                    last_err = Some(e);
                    continue 'attempts;
                }
            };
        }
        let cost = report.final_cost;
        let accepted = cost <= bound && flags.is_empty() && report.condition.is_finite();
        if best.as_ref().is_none_or(|(c, ..)| cost < *c) {
            best = Some((cost, estimate, report, accepted));
        }
        if accepted {
            break;
        }
    }
    let Some((_, stage1, report, accepted)) = best else {
        return Err(last_err.unwrap_or(CalibError::NonFiniteResidual));
    };

    let doa_of = |array: usize| -> Vec<Vector3<f64>> {
        (0..bundle.n_events())
            .map(|j| *bundle.doa(array, j))
            .collect()
    };
    let global =
        lift_sources_to_array_frame(&Vector3::zeros(), &stage1.sources, &doa_of(0))?;
    let mut states = vec![ArrayState::gauge(stage1.clock_drifts[0])];
    for i in 1..n {
        let local =
            lift_sources_to_array_frame(&stage1.positions[i - 1], &stage1.sources, &doa_of(i))?;
        let (rotation, _translation) = icp_orientation(&local, &global)?;
        states.push(ArrayState {
            position: stage1.positions[i - 1],
            orientation: rotation.log(),
            time_offset: stage1.time_offsets[i - 1],
            clock_drift: stage1.clock_drifts[i],
        });
    }
    let params = ParameterVector::from_states(&states, &stage1.sources)?;
    Ok(IveResult {
        params,
        stage1,
        report,
        attempts,
        cost_acceptable: accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_doa;
    use crate::so3::{self, RotVec};
    use crate::synth::{generate_scenario, synthesize_measurements, ScenarioConfig, TrajectoryId};
    use rand::SeedableRng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn icp_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let truth = so3::exp(&random_vec(&mut rng, 1.8));
            let t = random_vec(&mut rng, 2.0);
            let local: Vec<_> = (0..8).map(|_| random_vec(&mut rng, 3.0)).collect();
            let global: Vec<_> = local.iter().map(|p| truth.apply(p) + t).collect();
            let (r, t_hat) = icp_orientation(&local, &global).unwrap();
            assert!(r.angle_to(&truth) < 1e-12);
            assert!((t_hat - t).norm() < 1e-12);
        }
    }

    #[test]
    fn icp_handles_planar_sets_and_reflection_repair() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut repairs = 0;
        for _ in 0..200 {
            let truth = so3::exp(&random_vec(&mut rng, 1.8));
            let t = random_vec(&mut rng, 1.0);
            let local: Vec<_> = (0..6)
                .map(|_| {
                    let mut p = random_vec(&mut rng, 2.0);
                    p.z = 0.0;
                    p
                })
                .collect();
            let global: Vec<_> = local.iter().map(|p| truth.apply(p) + t).collect();

            let count = local.len() as f64;
            let lc: Vector3<f64> = local.iter().sum::<Vector3<f64>>() / count;
            let gc: Vector3<f64> = global.iter().sum::<Vector3<f64>>() / count;
            let mut cross = Matrix3::zeros();
            for (l, g) in local.iter().zip(global.iter()) {
                cross += (g - gc) * (l - lc).transpose();
            }
            let svd = cross.svd(true, true);
            if (svd.u.unwrap() * svd.v_t.unwrap()).determinant() < 0.0 {
                repairs += 1;
            }

            let (r, t_hat) = icp_orientation(&local, &global).unwrap();
            assert!(r.angle_to(&truth) < 1e-10);
            assert!((t_hat - t).norm() < 1e-10);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
        assert!(repairs > 0, "no planar case exercised the reflection repair");
    }

    #[test]
    fn icp_rejects_degenerate_input() {
        let line: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        let err = icp_orientation(&line, &line).unwrap_err();
        assert!(matches!(err, CalibError::DegeneratePointSet));

        let two = vec![Vector3::x(), Vector3::y()];
        let err = icp_orientation(&two, &two).unwrap_err();
        assert!(matches!(err, CalibError::InsufficientPoints { .. }));

        let three = vec![Vector3::x(), Vector3::y(), Vector3::z()];
        let err = icp_orientation(&three, &two).unwrap_err();
        assert!(matches!(err, CalibError::DimensionMismatch(_)));
    }

    #[test]
    fn lift_matches_direct_body_frame_computation() {
        let position = Vector3::new(1.0, -0.5, 0.8);
        let orientation = RotVec::new(Vector3::new(0.4, -0.9, 0.3));
        let state = ArrayState {
            position,
            orientation,
            time_offset: 0.0,
            clock_drift: 0.0,
        };
        let sources = vec![
            Vector3::new(0.2, 0.7, -0.4),
            Vector3::new(-0.8, 0.1, 0.5),
            Vector3::new(0.9, 0.9, 0.9),
        ];
        let doa: Vec<_> = sources
            .iter()
            .map(|s| predict_doa(&state, s).unwrap())
            .collect();
        let lifted = lift_sources_to_array_frame(&position, &sources, &doa).unwrap();
        let rot = orientation.exp();
        for (l, s) in lifted.iter().zip(sources.iter()) {
            let direct = rot.inverse_apply(&(position - s));
            assert!((l - direct).norm() < 1e-12);
        }
    }

    fn noiseless_bundle(seed: u64) -> (crate::synth::GroundTruth, MeasurementBundle) {
        let mut cfg = ScenarioConfig::preset(TrajectoryId::Traj1);
        cfg.seed = seed;
        let truth = generate_scenario(&cfg).unwrap();
        let bundle = synthesize_measurements(&truth, &cfg).unwrap();
        (truth, bundle)
    }

    #[test]
    fn stage1_jacobian_matches_finite_differences() {
        let (truth, bundle) = noiseless_bundle(31);
        let problem = Stage1Problem::new(&bundle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut init = Stage1Estimate::dead_reckoned(
            &bundle,
            truth.states[1..].iter().map(|s| s.position).collect(),
            DEFAULT_ANCHOR_RANGE,
        );
        for p in init.positions.iter_mut() {
            *p += random_vec(&mut rng, 0.2);
        }
        init.clock_drifts[2] = 4e-5;
        init.time_offsets[0] = -0.03;
        let x = init.to_vector(problem.layout);
        let (_, jac) = problem.residual_and_jacobian(&x).unwrap();
        let h = 1e-6;
        for col in 0..problem.param_dim() {
            let mut xp = x.clone();
            xp[col] += h;
            let plus = problem.residual(&xp).unwrap();
            xp[col] = x[col] - h;
            let minus = problem.residual(&xp).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            for row in 0..problem.residual_dim() {
                let a = jac[(row, col)];
                let gap = (a - fd[row]).abs();
                assert!(
                    gap <= 1e-5 * (1.0 + a.abs().max(fd[row].abs())),
                    "row {row} col {col}: analytic {a:.9e} vs fd {:.9e}",
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn run_ive_recovers_noiseless_scenarios() {
        for seed in [1, 2, 3] {
            let (truth, bundle) = noiseless_bundle(seed);
            let opts = IveOptions {
                seed: seed * 1000,
                ..IveOptions::default()
            };
            let result = run_ive(&bundle, None, &WeightSpec::default(), &opts).unwrap();
            assert!(result.cost_acceptable, "seed {seed}: cost not accepted");
            let est_states = result.params.states();
            let est_sources = result.params.sources();
            for (est, tru) in est_states.iter().zip(truth.states.iter()).skip(1) {
                assert!(
                    (est.position - tru.position).norm() < 1e-5,
                    "seed {seed}: position gap {:.3e}",
                    (est.position - tru.position).norm()
                );
                assert!(
                    est.orientation.exp().angle_to(&tru.orientation.exp()) < 1e-5,
                    "seed {seed}: orientation gap"
                );
                assert!((est.time_offset - tru.time_offset).abs() < 1e-6);
                assert!((est.clock_drift - tru.clock_drift).abs() < 1e-7);
            }
            for (est, tru) in est_sources.iter().zip(truth.trajectory.positions()) {
                assert!((est - tru).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn too_few_events_is_an_error() {
        let mut cfg = ScenarioConfig::custom([(-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5)], 3);
        cfg.seed = 9;
        let truth = generate_scenario(&cfg).unwrap();
        let bundle = synthesize_measurements(&truth, &cfg).unwrap();
        let err = Stage1Problem::new(&bundle).unwrap_err();
        assert!(matches!(
            err,
            CalibError::InsufficientEvents { got: 3, min: 4 }
        ));
    }

    /// Wrapper that scales the inter-array TDOA rows by a constant and
    /// compensates in the weights; iterates must match bit for bit.
    struct ScaledTdoaM<'a> {
        inner: &'a Stage1Problem,
        scale: f64,
    }

    impl ScaledTdoaM<'_> {
        fn scale_rows(&self, mut v: DVector<f64>) -> DVector<f64> {
            let layout = self.inner.layout;
            let start = layout.n_arrays * (layout.n_events - 1);
            let len = (layout.n_arrays - 1) * layout.n_events;
            for k in start..start + len {
                v[k] *= self.scale;
            }
            v
        }
    }

    impl GnProblem for ScaledTdoaM<'_> {
        fn residual_dim(&self) -> usize {
            self.inner.residual_dim()
        }
        fn param_dim(&self) -> usize {
            self.inner.param_dim()
        }
        fn rotation_blocks(&self) -> Vec<usize> {
            vec![]
        }
        fn weight_diagonal(&self, weights: &WeightSpec) -> DVector<f64> {
            let layout = self.inner.layout;
            let mut w = self.inner.weight_diagonal(weights);
            let start = layout.n_arrays * (layout.n_events - 1);
            let len = (layout.n_arrays - 1) * layout.n_events;
            for k in start..start + len {
                w[k] /= self.scale * self.scale;
            }
            w
        }
        fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, CalibError> {
            Ok(self.scale_rows(self.inner.residual(x)?))
        }
        fn residual_and_jacobian(
            &self,
            x: &DVector<f64>,
        ) -> Result<(DVector<f64>, DMatrix<f64>), CalibError> {
            let (r, mut j) = self.inner.residual_and_jacobian(x)?;
            let layout = self.inner.layout;
            let start = layout.n_arrays * (layout.n_events - 1);
            let len = (layout.n_arrays - 1) * layout.n_events;
            for k in start..start + len {
                for c in 0..j.ncols() {
                    j[(k, c)] *= self.scale;
                }
            }
            Ok((self.scale_rows(r), j))
        }
    }

    #[test]
    fn tdoa_m_row_scaling_with_compensating_weights_is_invariant() {
        let (truth, bundle) = noiseless_bundle(13);
        let problem = Stage1Problem::new(&bundle).unwrap();
        let scaled = ScaledTdoaM {
            inner: &problem,
            scale: 4.0,
        };
        let init = Stage1Estimate::dead_reckoned(
            &bundle,
            truth.states[1..]
                .iter()
                .map(|s| s.position + Vector3::new(0.2, -0.1, 0.15))
                .collect(),
            DEFAULT_ANCHOR_RANGE,
        );
        let x0 = init.to_vector(problem.layout);
        let weights = WeightSpec::default();
        let opts = SolveOptions::default();
        let (xa, ra) = solver::solve(&problem, x0.clone(), &weights, &opts).unwrap();
        let (xb, rb) = solver::solve(&scaled, x0, &weights, &opts).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ra.step_norms, rb.step_norms);
        assert_eq!(ra.iterations, rb.iterations);
    }

    /// Wrapper that zeroes the per-array TDOA weights, leaving the drift
    /// family observable only through differences: an exact null space.
    struct NoTdoaS<'a> {
        inner: &'a Stage1Problem,
    }

    impl GnProblem for NoTdoaS<'_> {
        fn residual_dim(&self) -> usize {
            self.inner.residual_dim()
        }
        fn param_dim(&self) -> usize {
            self.inner.param_dim()
        }
        fn rotation_blocks(&self) -> Vec<usize> {
            vec![]
        }
        fn weight_diagonal(&self, weights: &WeightSpec) -> DVector<f64> {
            let layout = self.inner.layout;
            let mut w = self.inner.weight_diagonal(weights);
            for k in 0..layout.n_arrays * (layout.n_events - 1) {
                w[k] = 0.0;
            }
            w
        }
        fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, CalibError> {
            self.inner.residual(x)
        }
        fn residual_and_jacobian(
            &self,
            x: &DVector<f64>,
        ) -> Result<(DVector<f64>, DMatrix<f64>), CalibError> {
            self.inner.residual_and_jacobian(x)
        }
    }

    #[test]
    fn missing_tdoa_s_information_is_singular() {
        let (truth, bundle) = noiseless_bundle(19);
        let problem = Stage1Problem::new(&bundle).unwrap();
        let crippled = NoTdoaS { inner: &problem };
        let init = Stage1Estimate::dead_reckoned(
            &bundle,
            truth.states[1..].iter().map(|s| s.position).collect(),
            DEFAULT_ANCHOR_RANGE,
        );
        let x0 = init.to_vector(problem.layout);
        let err = solver::solve(
            &crippled,
            x0,
            &WeightSpec::default(),
            &SolveOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CalibError::SingularProblem { .. }));
    }
}
