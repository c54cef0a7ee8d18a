#![allow(dead_code)]

use array_calib::model::MeasurementBundle;
use array_calib::so3::{self, RotMat};
use array_calib::solver::{retract, GnProblem};
use array_calib::synth::{generate_scenario, synthesize_measurements, ScenarioConfig};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(v)
}

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> RotMat {
    let axis = random_unit(rng);
    let angle: f64 = rng.random_range(0.0..max_angle);
    so3::exp(&(axis * angle))
}

pub fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    Vector3::new(draw(), draw(), draw()) * sigma
}

/// Central finite-difference Jacobian, stepping rotation blocks
/// multiplicatively like the solver does.
pub fn finite_difference_jacobian<P: GnProblem>(
    problem: &P,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let blocks = problem.rotation_blocks();
    let mut jac = DMatrix::zeros(problem.residual_dim(), problem.param_dim());
    for col in 0..problem.param_dim() {
        let mut step = DVector::zeros(problem.param_dim());
        step[col] = h;
        let plus = problem
            .residual(&retract(x, &step, &blocks))
            .expect("residual evaluates");
        step[col] = -h;
        let minus = problem
            .residual(&retract(x, &step, &blocks))
            .expect("residual evaluates");
        jac.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// Largest entry-wise gap between two Jacobians, normalized by
/// `1 + max(|a|, |b|)`.
pub fn max_normalized_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((x - y).abs() / (1.0 + x.abs().max(y.abs())));
    }
    worst
}

/// Noiseless measurement bundle for an (n arrays, k events) random
/// scenario drawn from `seed`.
pub fn noiseless_bundle(n_arrays: usize, n_events: usize, seed: u64) -> MeasurementBundle {
    let mut cfg = ScenarioConfig::custom([(-2.0, 2.0); 3], n_events);
    cfg.n_arrays = n_arrays;
    cfg.seed = seed;
    let truth = generate_scenario(&cfg).expect("scenario generates");
    synthesize_measurements(&truth, &cfg).expect("measurements synthesize")
}
