//! Damped Gauss-Newton least squares on parameter spaces that mix plain
//! vector blocks with SO(3) blocks updated multiplicatively.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::CalibError;
use crate::so3;

/// Per-block residual weights for the three measurement types.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub tdoa: f64,
    pub doa: f64,
    pub odometry: f64,
}

impl WeightSpec {
    pub const DEFAULT_TDOA: f64 = 1e6;
    pub const DEFAULT_DOA: f64 = 1e2;
    pub const DEFAULT_ODOMETRY: f64 = 1e2;

    /// Inverse-variance weights; any zero sigma falls back to the default
    /// weight for that block.
    pub fn from_sigmas(sigma_tdoa: f64, sigma_doa: f64, sigma_odometry: f64) -> WeightSpec {
        let inv = |sigma: f64, fallback: f64| {
            if sigma > 0.0 {
                1.0 / (sigma * sigma)
            } else {
                fallback
            }
        };
        WeightSpec {
            tdoa: inv(sigma_tdoa, Self::DEFAULT_TDOA),
            doa: inv(sigma_doa, Self::DEFAULT_DOA),
            odometry: inv(sigma_odometry, Self::DEFAULT_ODOMETRY),
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let all = [self.tdoa, self.doa, self.odometry];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CalibError::InvalidConfig(
                "weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(CalibError::InvalidConfig(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec {
            tdoa: Self::DEFAULT_TDOA,
            doa: Self::DEFAULT_DOA,
            odometry: Self::DEFAULT_ODOMETRY,
        }
    }
}

/// Stopping and damping controls.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which the iteration stops.
    pub cost_tol: f64,
    /// Infinity-norm of the step below which the iteration stops.
    pub step_tol: f64,
    /// Initial damping; zero means pure Gauss-Newton until a step fails.
    pub lambda0: f64,
    /// Damping ceiling; exceeding it without an acceptable step stalls.
    pub lambda_max: f64,
    /// Condition-number gate on the weighted normal matrix.
    pub max_condition: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 100,
            cost_tol: 1e-10,
            step_tol: 1e-12,
            lambda0: 0.0,
            lambda_max: 1e12,
            max_condition: 1e14,
        }
    }
}

/// What the iteration did; `converged` is set only on tolerance exits.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub step_norms: Vec<f64>,
    /// Condition estimate of the weighted normal matrix at the final point.
    pub condition: f64,
    pub lambda_final: f64,
}

/// A weighted least-squares problem the solver can iterate on.
pub trait GnProblem {
    fn residual_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Starting columns of 3-wide rotation-vector blocks; steps there are
    /// applied by left multiplication instead of addition.
    fn rotation_blocks(&self) -> Vec<usize>;
    /// Expands a `WeightSpec` to one weight per residual row.
    fn weight_diagonal(&self, weights: &WeightSpec) -> DVector<f64>;
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, CalibError>;
    fn residual_and_jacobian(
        &self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), CalibError>;
}

/// Applies a step: additive everywhere except rotation blocks, where the
/// stored rotation vector becomes `log(exp(step) * exp(current))`.
pub fn retract(x: &DVector<f64>, step: &DVector<f64>, rotation_blocks: &[usize]) -> DVector<f64> {
    let mut out = x + step;
    for &b in rotation_blocks {
        let phi = x.fixed_rows::<3>(b).into_owned();
        let dphi = step.fixed_rows::<3>(b).into_owned();
        let updated = (so3::exp(&dphi) * so3::exp(&phi)).log().vector();
        out.fixed_rows_mut::<3>(b).copy_from(&updated);
    }
    out
}

pub fn weighted_cost(residual: &DVector<f64>, weights: &DVector<f64>) -> f64 {
    residual
        .iter()
        .zip(weights.iter())
        .map(|(r, w)| w * r * r)
        .sum()
}

fn condition_estimate(h: &DMatrix<f64>) -> f64 {
    let sv = h.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 || !smax.is_finite() {
        f64::INFINITY
    } else {
        smax / smin
    }
}

fn finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn escalate(lambda: f64) -> f64 {
    if lambda == 0.0 {
        1e-6
    } else {
        lambda * 10.0
    }
}

fn relax(lambda: f64) -> f64 {
    let l = lambda / 10.0;
    if l < 1e-12 {
        0.0
    } else {
        l
    }
}

/// Minimizes the weighted squared residual from `x0`. Steps that would
/// increase the cost are retried with escalating damping; a singular normal
/// matrix (condition above the gate) is an error.
pub fn solve<P: GnProblem>(
    problem: &P,
    x0: DVector<f64>,
    weights: &WeightSpec,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolveReport), CalibError> {
    weights.validate()?;
    let n = problem.param_dim();
    let m = problem.residual_dim();
    if x0.len() != n {
        return Err(CalibError::DimensionMismatch(format!(
            "initial point has {} entries, problem has {} parameters",
            x0.len(),
            n
        )));
    }
    let w = problem.weight_diagonal(weights);
    if w.len() != m {
        return Err(CalibError::DimensionMismatch(format!(
            "weight diagonal has {} entries, problem has {} residuals",
            w.len(),
            m
        )));
    }
    let rotation_blocks = problem.rotation_blocks();

    let mut x = x0;
    let (mut residual, mut jac) = problem.residual_and_jacobian(&x)?;
    if !finite_vec(&residual) || !finite_mat(&jac) {
        return Err(CalibError::NonFiniteResidual);
    }
    let mut cost = weighted_cost(&residual, &w);
    let initial_cost = cost;
    let mut lambda = opts.lambda0;
    let mut step_norms = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let mut wj = jac.clone();
        for (k, mut row) in wj.row_iter_mut().enumerate() {
            row *= w[k];
        }
        let h = jac.tr_mul(&wj);
        let g = jac.tr_mul(&residual.component_mul(&w));
        let condition = condition_estimate(&h);
        if condition > opts.max_condition {
            return Err(CalibError::SingularProblem { condition });
        }

        let mut accepted = None;
        loop {
            let damped = &h + DMatrix::identity(n, n) * lambda;
            if let Some(chol) = Cholesky::new(damped) {
                let step = chol.solve(&(-&g));
                let candidate = retract(&x, &step, &rotation_blocks);
                if let Ok(r_new) = problem.residual(&candidate) {
                    if finite_vec(&r_new) {
                        let c_new = weighted_cost(&r_new, &w);
                        if c_new <= cost {
                            accepted = Some((candidate, step, c_new));
                            break;
                        }
                    }
                }
            }
            if lambda >= opts.lambda_max {
                break;
            }
            lambda = escalate(lambda);
        }
        let Some((candidate, step, new_cost)) = accepted else {
            break;
        };

        iterations += 1;
        let step_norm = step.amax();
        step_norms.push(step_norm);
        let relative_decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        x = candidate;
        cost = new_cost;
        lambda = relax(lambda);
        let (r2, j2) = problem.residual_and_jacobian(&x)?;
        if !finite_vec(&r2) || !finite_mat(&j2) {
            return Err(CalibError::NonFiniteResidual);
        }
        residual = r2;
        jac = j2;
        if step_norm < opts.step_tol || relative_decrease < opts.cost_tol {
            converged = true;
            break;
        }
    }

    let mut wj = jac.clone();
    for (k, mut row) in wj.row_iter_mut().enumerate() {
        row *= w[k];
    }
    let condition = condition_estimate(&jac.tr_mul(&wj));
    let report = SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        converged,
        step_norms,
        condition,
        lambda_final: lambda,
    };
    Ok((x, report))
}
