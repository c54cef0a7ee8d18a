//! Measurement models and the joint estimation problem.
//!
//! A network of N microphone arrays hears K sound events emitted by one
//! moving source. Array 1 is the gauge: pinned at the origin with identity
//! orientation and zero time offset, so only its clock drift is estimated.
//! Three measurement families constrain the remaining unknowns:
//!
//! * TDOA-S: per array, arrival-time difference between consecutive events,
//!   `(d[i][j+1] - d[i][j]) / c + (1 + drift_i) * dt[j]`.
//! * TDOA-M: per event, arrival-time difference of array i against array 1,
//!   `(d[i][j] - d[1][j]) / c + offset_i + (drift_i - drift_1) * t[j]`,
//!   where `t[j]` is the emission time of event j relative to event 1.
//! * DOA: per array and event, the unit direction of the source in the
//!   array's body frame, `R_i^T (x_i - s_j) / d[i][j]`.
//!
//! Source odometry `s[j+1] - s[j]` anchors the trajectory. Residuals stack
//! in a fixed order (TDOA-S by array, TDOA-M by event, DOA by event with
//! array-major triples, then odometry), matching `MeasurementLayout`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::CalibError;
use crate::so3::{self, RotMat, RotVec};
use crate::solver::{GnProblem, WeightSpec};

/// Speed of sound in air (m/s) used when a bundle does not override it.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

/// Separations below this are treated as coincident points.
const MIN_RANGE: f64 = 1e-9;

/// Pose and clock state of one microphone array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayState {
    pub position: Vector3<f64>,
    pub orientation: RotVec,
    /// Clock offset against array 1 (seconds).
    pub time_offset: f64,
    /// Fractional clock rate error (seconds per second).
    pub clock_drift: f64,
}

impl ArrayState {
    /// The gauge array: origin, identity orientation, zero offset.
    pub fn gauge(clock_drift: f64) -> Self {
        ArrayState {
            position: Vector3::zeros(),
            orientation: RotVec::zero(),
            time_offset: 0.0,
            clock_drift,
        }
    }

    pub fn is_gauge_pinned(&self) -> bool {
        self.position == Vector3::zeros()
            && self.orientation.vector() == Vector3::zeros()
            && self.time_offset == 0.0
    }
}

/// Source positions at the K events plus the emission intervals between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrajectory {
    positions: Vec<Vector3<f64>>,
    intervals: Vec<f64>,
}

impl SourceTrajectory {
    pub fn new(positions: Vec<Vector3<f64>>, intervals: Vec<f64>) -> Result<Self, CalibError> {
        if positions.len() < 2 {
            return Err(CalibError::InsufficientEvents {
                got: positions.len(),
                min: 2,
            });
        }
        if intervals.len() != positions.len() - 1 {
            return Err(CalibError::DimensionMismatch(format!(
                "{} positions need {} intervals, got {}",
                positions.len(),
                positions.len() - 1,
                intervals.len()
            )));
        }
        if intervals.iter().any(|dt| !dt.is_finite() || *dt <= 0.0) {
            return Err(CalibError::InvalidConfig(
                "emission intervals must be positive and finite".into(),
            ));
        }
        Ok(SourceTrajectory {
            positions,
            intervals,
        })
    }

    pub fn n_events(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    /// Emission time of each event relative to event 1 (cumulative sums of
    /// the intervals, starting at zero).
    pub fn emission_offsets(&self) -> Vec<f64> {
        cumulative_offsets(&self.intervals)
    }
}

fn cumulative_offsets(intervals: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(intervals.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for dt in intervals {
        acc += dt;
        out.push(acc);
    }
    out
}

/// Row bookkeeping for the stacked residual. All indices are zero-based;
/// `array` counts from the gauge array 0, `event` from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementLayout {
    pub n_arrays: usize,
    pub n_events: usize,
}

impl MeasurementLayout {
    pub fn rows_tdoa_s(&self) -> usize {
        self.n_arrays * (self.n_events - 1)
    }

    pub fn rows_tdoa_m(&self) -> usize {
        (self.n_arrays - 1) * self.n_events
    }

    pub fn rows_doa(&self) -> usize {
        3 * self.n_arrays * self.n_events
    }

    pub fn rows_odometry(&self) -> usize {
        3 * (self.n_events - 1)
    }

    pub fn rows(&self) -> usize {
        self.rows_tdoa_s() + self.rows_tdoa_m() + self.rows_doa() + self.rows_odometry()
    }

    /// Row of the TDOA-S residual for `array` between events `event` and
    /// `event + 1`.
    pub fn tdoa_s_row(&self, array: usize, event: usize) -> usize {
        array * (self.n_events - 1) + event
    }

    /// Row of the TDOA-M residual of `array` (>= 1) against the gauge at
    /// `event`.
    pub fn tdoa_m_row(&self, array: usize, event: usize) -> usize {
        self.rows_tdoa_s() + event * (self.n_arrays - 1) + (array - 1)
    }

    /// First of the three DOA rows for (`array`, `event`).
    pub fn doa_row(&self, array: usize, event: usize) -> usize {
        self.rows_tdoa_s() + self.rows_tdoa_m() + 3 * (event * self.n_arrays + array)
    }

    /// First of the three odometry rows between `event` and `event + 1`.
    pub fn odometry_row(&self, event: usize) -> usize {
        self.rows_tdoa_s() + self.rows_tdoa_m() + self.rows_doa() + 3 * event
    }
}

/// One synchronized set of measurements for a whole scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBundle {
    tdoa_s: DMatrix<f64>,
    tdoa_m: DMatrix<f64>,
    doa: Vec<Vector3<f64>>,
    odometry: Vec<Vector3<f64>>,
    intervals: Vec<f64>,
    speed_of_sound: f64,
}

impl MeasurementBundle {
    /// Builds a bundle from its parts, inferring (N, K) from the TDOA-S
    /// matrix (N rows, K-1 columns). DOA entries are event-major
    /// (`event * N + array`) and must be unit vectors within 1e-6.
    pub fn new(
        tdoa_s: DMatrix<f64>,
        tdoa_m: DMatrix<f64>,
        doa: Vec<Vector3<f64>>,
        odometry: Vec<Vector3<f64>>,
        intervals: Vec<f64>,
        speed_of_sound: f64,
    ) -> Result<Self, CalibError> {
        let n_arrays = tdoa_s.nrows();
        let n_events = tdoa_s.ncols() + 1;
        if n_arrays < 2 {
            return Err(CalibError::DimensionMismatch(format!(
                "need at least 2 arrays, got {n_arrays}"
            )));
        }
        if tdoa_m.nrows() != n_arrays - 1 || tdoa_m.ncols() != n_events {
            return Err(CalibError::DimensionMismatch(format!(
                "inter-array TDOA is {}x{}, expected {}x{}",
                tdoa_m.nrows(),
                tdoa_m.ncols(),
                n_arrays - 1,
                n_events
            )));
        }
        if doa.len() != n_arrays * n_events {
            return Err(CalibError::DimensionMismatch(format!(
                "{} DOA entries, expected {}",
                doa.len(),
                n_arrays * n_events
            )));
        }
        if odometry.len() != n_events - 1 {
            return Err(CalibError::DimensionMismatch(format!(
                "{} odometry steps, expected {}",
                odometry.len(),
                n_events - 1
            )));
        }
        if intervals.len() != n_events - 1 {
            return Err(CalibError::DimensionMismatch(format!(
                "{} emission intervals, expected {}",
                intervals.len(),
                n_events - 1
            )));
        }
        if intervals.iter().any(|dt| !dt.is_finite() || *dt <= 0.0) {
            return Err(CalibError::InvalidConfig(
                "emission intervals must be positive and finite".into(),
            ));
        }
        if !speed_of_sound.is_finite() || speed_of_sound <= 0.0 {
            return Err(CalibError::InvalidConfig(
                "speed of sound must be positive".into(),
            ));
        }
        for (k, r) in doa.iter().enumerate() {
            let defect = (r.norm() - 1.0).abs();
            if defect > 1e-6 {
                return Err(CalibError::InvalidConfig(format!(
                    "DOA entry {k} has norm defect {defect:.3e} (limit 1e-6)"
                )));
            }
        }
        Ok(MeasurementBundle {
            tdoa_s,
            tdoa_m,
            doa,
            odometry,
            intervals,
            speed_of_sound,
        })
    }

    pub fn n_arrays(&self) -> usize {
        self.tdoa_s.nrows()
    }

    pub fn n_events(&self) -> usize {
        self.tdoa_s.ncols() + 1
    }

    pub fn layout(&self) -> MeasurementLayout {
        MeasurementLayout {
            n_arrays: self.n_arrays(),
            n_events: self.n_events(),
        }
    }

    pub fn tdoa_s(&self, array: usize, event: usize) -> f64 {
        self.tdoa_s[(array, event)]
    }

    pub fn tdoa_m(&self, array: usize, event: usize) -> f64 {
        self.tdoa_m[(array - 1, event)]
    }

    pub fn doa(&self, array: usize, event: usize) -> &Vector3<f64> {
        &self.doa[event * self.n_arrays() + array]
    }

    pub fn odometry(&self, event: usize) -> &Vector3<f64> {
        &self.odometry[event]
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn emission_offsets(&self) -> Vec<f64> {
        cumulative_offsets(&self.intervals)
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// All measurements as one vector in canonical row order.
    pub fn stacked(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut z = DVector::zeros(layout.rows());
        for array in 0..layout.n_arrays {
            for event in 0..layout.n_events - 1 {
                z[layout.tdoa_s_row(array, event)] = self.tdoa_s(array, event);
            }
        }
        for event in 0..layout.n_events {
            for array in 1..layout.n_arrays {
                z[layout.tdoa_m_row(array, event)] = self.tdoa_m(array, event);
            }
        }
        for event in 0..layout.n_events {
            for array in 0..layout.n_arrays {
                let row = layout.doa_row(array, event);
                z.fixed_rows_mut::<3>(row).copy_from(self.doa(array, event));
            }
        }
        for event in 0..layout.n_events - 1 {
            let row = layout.odometry_row(event);
            z.fixed_rows_mut::<3>(row).copy_from(self.odometry(event));
        }
        z
    }
}

fn range_and_direction(
    from: &Vector3<f64>,
    to_source: &Vector3<f64>,
) -> Result<(f64, Vector3<f64>), CalibError> {
    let gap = from - to_source;
    let d = gap.norm();
    if d < MIN_RANGE {
        return Err(CalibError::DegenerateGeometry { separation: d });
    }
    Ok((d, gap / d))
}

/// Arrival-time difference at one array between two consecutive events.
pub fn predict_tdoa_s(
    array: &ArrayState,
    source_a: &Vector3<f64>,
    source_b: &Vector3<f64>,
    interval: f64,
    c: f64,
) -> Result<f64, CalibError> {
    let (da, _) = range_and_direction(&array.position, source_a)?;
    let (db, _) = range_and_direction(&array.position, source_b)?;
    Ok((db - da) / c + (1.0 + array.clock_drift) * interval)
}

/// Arrival-time difference of one array against the gauge for one event.
/// `emission_offset` is the event's emission time relative to event 1.
pub fn predict_tdoa_m(
    array: &ArrayState,
    reference_drift: f64,
    source: &Vector3<f64>,
    emission_offset: f64,
    c: f64,
) -> Result<f64, CalibError> {
    let (di, _) = range_and_direction(&array.position, source)?;
    let (d1, _) = range_and_direction(&Vector3::zeros(), source)?;
    Ok((di - d1) / c
        + array.time_offset
        + (array.clock_drift - reference_drift) * emission_offset)
}

/// Unit direction from the source to the array, in the array's body frame.
pub fn predict_doa(array: &ArrayState, source: &Vector3<f64>) -> Result<Vector3<f64>, CalibError> {
    let (_, u) = range_and_direction(&array.position, source)?;
    Ok(array.orientation.exp().inverse_apply(&u))
}

/// Source displacement between consecutive events.
pub fn predict_odometry(source_a: &Vector3<f64>, source_b: &Vector3<f64>) -> Vector3<f64> {
    source_b - source_a
}

/// Predicted measurements for all arrays and events, stacked in canonical
/// row order. `states[0]` must be the gauge array.
pub fn stack_predictions(
    states: &[ArrayState],
    traj: &SourceTrajectory,
    c: f64,
) -> Result<DVector<f64>, CalibError> {
    stack_into(
        states,
        traj.positions(),
        traj.intervals(),
        &traj.emission_offsets(),
        c,
    )
}

fn stack_into(
    states: &[ArrayState],
    sources: &[Vector3<f64>],
    intervals: &[f64],
    offsets: &[f64],
    c: f64,
) -> Result<DVector<f64>, CalibError> {
    let layout = MeasurementLayout {
        n_arrays: states.len(),
        n_events: sources.len(),
    };
    if layout.n_arrays < 2 {
        return Err(CalibError::DimensionMismatch(format!(
            "need at least 2 arrays, got {}",
            layout.n_arrays
        )));
    }
    if !states[0].is_gauge_pinned() {
        return Err(CalibError::InvalidConfig(
            "array 1 must be pinned at the gauge (origin, identity, zero offset)".into(),
        ));
    }
    let mut z = DVector::zeros(layout.rows());
    let reference_drift = states[0].clock_drift;
    for (i, state) in states.iter().enumerate() {
        for j in 0..layout.n_events - 1 {
            z[layout.tdoa_s_row(i, j)] =
                predict_tdoa_s(state, &sources[j], &sources[j + 1], intervals[j], c)?;
        }
    }
    for j in 0..layout.n_events {
        for (i, state) in states.iter().enumerate().skip(1) {
            z[layout.tdoa_m_row(i, j)] =
                predict_tdoa_m(state, reference_drift, &sources[j], offsets[j], c)?;
        }
    }
    for j in 0..layout.n_events {
        for (i, state) in states.iter().enumerate() {
            let row = layout.doa_row(i, j);
            z.fixed_rows_mut::<3>(row)
                .copy_from(&predict_doa(state, &sources[j])?);
        }
    }
    for j in 0..layout.n_events - 1 {
        let row = layout.odometry_row(j);
        z.fixed_rows_mut::<3>(row)
            .copy_from(&predict_odometry(&sources[j], &sources[j + 1]));
    }
    Ok(z)
}

/// Column bookkeeping for the joint parameter vector:
/// `[drift_1 | per array i >= 2: position(3), orientation(3), offset,
/// drift | per event: source(3)]`. Gauge pose and offset have no columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterLayout {
    pub n_arrays: usize,
    pub n_events: usize,
}

impl ParameterLayout {
    pub fn new(n_arrays: usize, n_events: usize) -> Result<Self, CalibError> {
        if n_arrays < 2 {
            return Err(CalibError::DimensionMismatch(format!(
                "need at least 2 arrays, got {n_arrays}"
            )));
        }
        if n_events < 2 {
            return Err(CalibError::InsufficientEvents {
                got: n_events,
                min: 2,
            });
        }
        Ok(ParameterLayout { n_arrays, n_events })
    }

    pub fn dim(&self) -> usize {
        1 + 8 * (self.n_arrays - 1) + 3 * self.n_events
    }

    fn free_base(&self, array: usize) -> usize {
        debug_assert!(array >= 1 && array < self.n_arrays);
        1 + 8 * (array - 1)
    }

    pub fn position(&self, array: usize) -> usize {
        self.free_base(array)
    }

    pub fn orientation(&self, array: usize) -> usize {
        self.free_base(array) + 3
    }

    pub fn time_offset(&self, array: usize) -> usize {
        self.free_base(array) + 6
    }

    /// Drift column; array 0 maps to the leading reference-drift entry.
    pub fn clock_drift(&self, array: usize) -> usize {
        if array == 0 {
            0
        } else {
            self.free_base(array) + 7
        }
    }

    pub fn source(&self, event: usize) -> usize {
        1 + 8 * (self.n_arrays - 1) + 3 * event
    }

    pub fn rotation_blocks(&self) -> Vec<usize> {
        (1..self.n_arrays).map(|i| self.orientation(i)).collect()
    }
}

/// Flat parameter vector tied to a `ParameterLayout`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: ParameterLayout,
    values: DVector<f64>,
}

impl ParameterVector {
    pub fn new(layout: ParameterLayout, values: DVector<f64>) -> Result<Self, CalibError> {
        if values.len() != layout.dim() {
            return Err(CalibError::DimensionMismatch(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(ParameterVector { layout, values })
    }

    /// Packs full states into the reduced vector. `states[0]` must be the
    /// gauge array (only its drift is stored).
    pub fn from_states(
        states: &[ArrayState],
        sources: &[Vector3<f64>],
    ) -> Result<Self, CalibError> {
        let layout = ParameterLayout::new(states.len(), sources.len())?;
        if !states[0].is_gauge_pinned() {
            return Err(CalibError::InvalidConfig(
                "array 1 must be pinned at the gauge (origin, identity, zero offset)".into(),
            ));
        }
        let mut values = DVector::zeros(layout.dim());
        values[0] = states[0].clock_drift;
        for (i, state) in states.iter().enumerate().skip(1) {
            values
                .fixed_rows_mut::<3>(layout.position(i))
                .copy_from(&state.position);
            values
                .fixed_rows_mut::<3>(layout.orientation(i))
                .copy_from(&state.orientation.vector());
            values[layout.time_offset(i)] = state.time_offset;
            values[layout.clock_drift(i)] = state.clock_drift;
        }
        for (j, s) in sources.iter().enumerate() {
            values.fixed_rows_mut::<3>(layout.source(j)).copy_from(s);
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn layout(&self) -> ParameterLayout {
        self.layout
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// Expands back to full array states; index 0 is the gauge array.
    pub fn states(&self) -> Vec<ArrayState> {
        let layout = self.layout;
        let mut out = Vec::with_capacity(layout.n_arrays);
        out.push(ArrayState::gauge(self.values[0]));
        for i in 1..layout.n_arrays {
            out.push(ArrayState {
                position: self.values.fixed_rows::<3>(layout.position(i)).into_owned(),
                orientation: RotVec::new(
                    self.values
                        .fixed_rows::<3>(layout.orientation(i))
                        .into_owned(),
                ),
                time_offset: self.values[layout.time_offset(i)],
                clock_drift: self.values[layout.clock_drift(i)],
            });
        }
        out
    }

    pub fn sources(&self) -> Vec<Vector3<f64>> {
        (0..self.layout.n_events)
            .map(|j| {
                self.values
                    .fixed_rows::<3>(self.layout.source(j))
                    .into_owned()
            })
            .collect()
    }
}

/// The full joint estimation problem over one measurement bundle.
pub struct JointProblem {
    params: ParameterLayout,
    rows: MeasurementLayout,
    measured: DVector<f64>,
    intervals: Vec<f64>,
    offsets: Vec<f64>,
    speed_of_sound: f64,
}

impl JointProblem {
    pub fn new(bundle: &MeasurementBundle) -> Result<Self, CalibError> {
        let params = ParameterLayout::new(bundle.n_arrays(), bundle.n_events())?;
        Ok(JointProblem {
            params,
            rows: bundle.layout(),
            measured: bundle.stacked(),
            intervals: bundle.intervals().to_vec(),
            offsets: bundle.emission_offsets(),
            speed_of_sound: bundle.speed_of_sound(),
        })
    }

    pub fn parameter_layout(&self) -> ParameterLayout {
        self.params
    }

    fn unpack(&self, x: &DVector<f64>) -> Result<(Vec<ArrayState>, Vec<Vector3<f64>>), CalibError> {
        let pv = ParameterVector::new(self.params, x.clone())?;
        Ok((pv.states(), pv.sources()))
    }
}

/// Per-pair geometry: rotations per array, (range, unit direction) per
/// (array, event) with the unit pointing from the source to the array.
fn geometry(
    states: &[ArrayState],
    sources: &[Vector3<f64>],
) -> Result<(Vec<RotMat>, Vec<Vec<(f64, Vector3<f64>)>>), CalibError> {
    let rotations: Vec<RotMat> = states.iter().map(|s| s.orientation.exp()).collect();
    let mut pairs = Vec::with_capacity(states.len());
    for state in states {
        let mut row = Vec::with_capacity(sources.len());
        for s in sources {
            row.push(range_and_direction(&state.position, s)?);
        }
        pairs.push(row);
    }
    Ok((rotations, pairs))
}

impl GnProblem for JointProblem {
    fn residual_dim(&self) -> usize {
        self.rows.rows()
    }

    fn param_dim(&self) -> usize {
        self.params.dim()
    }

    fn rotation_blocks(&self) -> Vec<usize> {
        self.params.rotation_blocks()
    }

    fn weight_diagonal(&self, weights: &WeightSpec) -> DVector<f64> {
        let mut w = DVector::zeros(self.rows.rows());
        let tdoa_rows = self.rows.rows_tdoa_s() + self.rows.rows_tdoa_m();
        let doa_rows = self.rows.rows_doa();
        w.rows_mut(0, tdoa_rows).fill(weights.tdoa);
        w.rows_mut(tdoa_rows, doa_rows).fill(weights.doa);
        w.rows_mut(tdoa_rows + doa_rows, self.rows.rows_odometry())
            .fill(weights.odometry);
        w
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, CalibError> {
        let (states, sources) = self.unpack(x)?;
        let pred = stack_into(
            &states,
            &sources,
            &self.intervals,
            &self.offsets,
            self.speed_of_sound,
        )?;
        Ok(pred - &self.measured)
    }

    fn residual_and_jacobian(
        &self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), CalibError> {
        let (states, sources) = self.unpack(x)?;
        let residual = self.residual(x)?;
        let (rotations, pairs) = geometry(&states, &sources)?;
        let rows = self.rows;
        let cols = self.params;
        let c = self.speed_of_sound;
        let mut jac = DMatrix::zeros(rows.rows(), cols.dim());

        let put3 = |jac: &mut DMatrix<f64>, row: usize, col: usize, v: &Vector3<f64>| {
            for k in 0..3 {
                jac[(row, col + k)] += v[k];
            }
        };

        for i in 0..rows.n_arrays {
            for j in 0..rows.n_events - 1 {
                let row = rows.tdoa_s_row(i, j);
                let (_, u_a) = pairs[i][j];
                let (_, u_b) = pairs[i][j + 1];
                if i >= 1 {
                    put3(&mut jac, row, cols.position(i), &((u_b - u_a) / c));
                }
                put3(&mut jac, row, cols.source(j), &(u_a / c));
                put3(&mut jac, row, cols.source(j + 1), &(-u_b / c));
                jac[(row, cols.clock_drift(i))] = self.intervals[j];
            }
        }

        for j in 0..rows.n_events {
            let (_, u_ref) = pairs[0][j];
            for i in 1..rows.n_arrays {
                let row = rows.tdoa_m_row(i, j);
                let (_, u_i) = pairs[i][j];
                put3(&mut jac, row, cols.position(i), &(u_i / c));
                put3(&mut jac, row, cols.source(j), &((u_ref - u_i) / c));
                jac[(row, cols.time_offset(i))] = 1.0;
                jac[(row, cols.clock_drift(i))] = self.offsets[j];
                jac[(row, cols.clock_drift(0))] -= self.offsets[j];
            }
        }

        let put_block = |jac: &mut DMatrix<f64>, row: usize, col: usize, b: &Matrix3<f64>| {
            for r in 0..3 {
                for k in 0..3 {
                    jac[(row + r, col + k)] += b[(r, k)];
                }
            }
        };

        for j in 0..rows.n_events {
            for i in 0..rows.n_arrays {
                let row = rows.doa_row(i, j);
                let (d, u) = pairs[i][j];
                let rot_t = rotations[i].transpose();
                let projector = (Matrix3::identity() - u * u.transpose()) / d;
                let sensitivity = rot_t.matrix() * projector;
                if i >= 1 {
                    put_block(&mut jac, row, cols.position(i), &sensitivity);
                    let orient = rot_t.matrix() * so3::hat(&u);
                    put_block(&mut jac, row, cols.orientation(i), &orient);
                }
                put_block(&mut jac, row, cols.source(j), &(-sensitivity));
            }
        }

        for j in 0..rows.n_events - 1 {
            let row = rows.odometry_row(j);
            for k in 0..3 {
                jac[(row + k, cols.source(j + 1) + k)] = 1.0;
                jac[(row + k, cols.source(j) + k)] = -1.0;
            }
        }

        Ok((residual, jac))
    }
}
