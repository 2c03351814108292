//! Malliavin covariance matrices assembled from flow paths, and their
//! non-degeneracy diagnostics.
//!
//! The reduced matrix
//!
//!   C_{0,T} = int_0^T J_{0,s}^{-1} V(x_s) V^*(x_s) (J_{0,s}^{-1})^* ds
//!
//! has an adapted integrand, which is why it (rather than the full matrix
//! M = J C J^*) is the object every scaling diagnostic conditions on.
//! Quadrature is left-endpoint on the simulation grid, matching that
//! adaptedness; the quadrature error is folded into the scheme tolerance.

pub mod kde;
pub mod probe;
pub mod scaling;

pub use kde::kde_density;
pub use probe::{ibp_density_probe, ProbeReport};
pub use scaling::{tail_scaling, EtaPolicy, ScalingBin, ScalingReport};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sde::{FlowPath, SdeError, SdeSystem};
use crate::vfield::{FieldError, VectorField};

#[derive(Debug, Error, PartialEq)]
pub enum CovarianceError {
    #[error("flow horizon is {got}, expected {expected} (the reduced matrix is a fixed-horizon object)")]
    HorizonMismatch { got: f64, expected: f64 },
    #[error("{excluded} of {paths} paths excluded (> {percent_cap}% aborts)")]
    TooManyExcluded {
        excluded: usize,
        paths: usize,
        percent_cap: f64,
    },
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Eigenvalue floor below which a covariance sample counts as singular.
pub const EIGENVALUE_FLOOR: f64 = 1e-14;

/// One path's covariance data.
#[derive(Clone, Debug)]
pub struct CovarianceSample {
    /// Reduced matrix C (symmetrised).
    pub reduced: DMatrix<f64>,
    /// Full matrix M = J C J^T (symmetrised).
    pub full: DMatrix<f64>,
    pub lambda_min_reduced: f64,
    pub lambda_min_full: f64,
    /// Largest entry asymmetry before symmetrisation; construction keeps it
    /// at rounding level.
    pub asymmetry: f64,
    pub seed: u64,
    pub path_index: u64,
}

fn symmetrise(m: &mut DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = m[(i, j)];
            let b = m[(j, i)];
            worst = worst.max((a - b).abs());
            let avg = 0.5 * (a + b);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    worst
}

fn lambda_min(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min)
}

/// Left-endpoint quadrature of the reduced-matrix integrand over the flow's
/// own grid; `M` follows by congruence with the terminal Jacobian. Horizon
/// must equal `expected_horizon` (default 1).
pub fn reduced_matrix_with_horizon(
    flow: &FlowPath,
    system: &SdeSystem,
    expected_horizon: f64,
    provenance: (u64, u64),
) -> Result<CovarianceSample, CovarianceError> {
    let got = flow.grid.spec.horizon();
    if (got - expected_horizon).abs() > 1e-12 {
        return Err(CovarianceError::HorizonMismatch {
            got,
            expected: expected_horizon,
        });
    }
    let n = system.dim();
    let mut reduced = DMatrix::zeros(n, n);
    let mut z = DVector::zeros(n);
    for k in 0..flow.n_steps() {
        let dt = flow.grid.spec.dt(k);
        let y = &flow.inverse_jacobians[k];
        let x = flow.states[k].as_slice();
        for field in system.diffusions() {
            let v = DVector::from_vec(field.eval(x)?);
            y.mul_to(&v, &mut z);
            // reduced += dt * z z^T
            for i in 0..n {
                for jj in 0..n {
                    reduced[(i, jj)] += dt * z[i] * z[jj];
                }
            }
        }
    }
    let asym_c = symmetrise(&mut reduced);
    let j_t = flow.jacobians.last().unwrap();
    let mut full = j_t * &reduced * j_t.transpose();
    let asym_m = symmetrise(&mut full);
    Ok(CovarianceSample {
        lambda_min_reduced: lambda_min(&reduced),
        lambda_min_full: lambda_min(&full),
        reduced,
        full,
        asymmetry: asym_c.max(asym_m),
        seed: provenance.0,
        path_index: provenance.1,
    })
}

/// Fixed-horizon (T = 1) reduced matrix; the conventional normalisation.
pub fn reduced_matrix(
    flow: &FlowPath,
    system: &SdeSystem,
    provenance: (u64, u64),
) -> Result<CovarianceSample, CovarianceError> {
    reduced_matrix_with_horizon(flow, system, 1.0, provenance)
}

/// The scalar process Z_F(t) = <eta, J_{0,t}^{-1} F(x_t)> on the flow grid.
pub fn z_process(
    flow: &FlowPath,
    eta: &[f64],
    field: &VectorField,
) -> Result<Vec<f64>, CovarianceError> {
    let eta = DVector::from_column_slice(eta);
    let mut out = Vec::with_capacity(flow.states.len());
    for (x, y) in flow.states.iter().zip(&flow.inverse_jacobians) {
        let f = DVector::from_vec(field.eval(x.as_slice())?);
        out.push(eta.dot(&(y * f)));
    }
    Ok(out)
}

/// The quadratic form <eta, C eta> computed two independent ways: through
/// the assembled matrix, and as sum_k int |Z_{V_k}|^2 dt over the diffusion
/// fields. They agree to quadrature rounding.
pub fn quadratic_form_decomposition(
    flow: &FlowPath,
    system: &SdeSystem,
    eta: &[f64],
) -> Result<(f64, f64), CovarianceError> {
    let sample = reduced_matrix_with_horizon(flow, system, flow.grid.spec.horizon(), (0, 0))?;
    let eta_v = DVector::from_column_slice(eta);
    let matrix_route = eta_v.dot(&(&sample.reduced * &eta_v));

    let mut z_route = 0.0;
    for field in system.diffusions() {
        let z = z_process(flow, eta, field)?;
        for k in 0..flow.n_steps() {
            z_route += z[k] * z[k] * flow.grid.spec.dt(k);
        }
    }
    Ok((matrix_route, z_route))
}

/// Monte Carlo estimate of E |C^{-1}|^p via 1/lambda_min, with a decade
/// breakdown showing where the estimate's mass comes from. A heavy lower
/// tail of lambda_min dominating the sum is exactly the non-integrability
/// signal the tail-scaling exponent controls.
#[derive(Clone, Debug)]
pub struct InverseMomentReport {
    pub estimate: f64,
    pub p: f64,
    pub used: usize,
    pub excluded_singular: usize,
    /// (floor(log10 lambda_min), sample count, share of the estimate).
    pub decades: Vec<(i32, usize, f64)>,
}

pub fn inverse_moment_estimate(samples: &[CovarianceSample], p: f64) -> InverseMomentReport {
    let mut excluded = 0usize;
    let mut contributions: Vec<(i32, f64)> = Vec::new();
    for s in samples {
        if s.lambda_min_reduced < EIGENVALUE_FLOOR {
            excluded += 1;
            continue;
        }
        let decade = s.lambda_min_reduced.log10().floor() as i32;
        contributions.push((decade, s.lambda_min_reduced.powf(-p)));
    }
    let total: f64 = contributions.iter().map(|(_, v)| v).sum();
    let used = contributions.len();
    let mut decades: Vec<(i32, usize, f64)> = Vec::new();
    contributions.sort_by_key(|(d, _)| *d);
    for (d, v) in contributions {
        match decades.last_mut() {
            Some((dd, count, share)) if *dd == d => {
                *count += 1;
                *share += v;
            }
            _ => decades.push((d, 1, v)),
        }
    }
    for (_, _, share) in &mut decades {
        *share /= total.max(f64::MIN_POSITIVE);
    }
    InverseMomentReport {
        estimate: total / used.max(1) as f64,
        p,
        used,
        excluded_singular: excluded,
        decades,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{integrate, scenario, GridSpec, IncrementGrid, Scheme};
    use approx::assert_relative_eq;

    fn flow_for(
        sc: &scenario::Scenario,
        n_steps: usize,
        seed: u64,
        path: u64,
    ) -> (FlowPath, &SdeSystem) {
        let spec = GridSpec::uniform(1.0, n_steps);
        let grid = IncrementGrid::sample(&spec, sc.system.n_noise(), seed, path);
        let compiled = sc.system.compile();
        (
            integrate(&compiled, &sc.x0, &grid, Scheme::StratonovichHeun).unwrap(),
            &sc.system,
        )
    }

    #[test]
    fn brownian_reduced_matrix_is_identity() {
        let sc = scenario::brownian(2);
        let (flow, system) = flow_for(&sc, 64, 7, 0);
        let s = reduced_matrix(&flow, system, (7, 0)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(s.reduced[(i, j)], want, epsilon = 1e-14);
                assert_relative_eq!(s.full[(i, j)], want, epsilon = 1e-14);
            }
        }
        assert!(s.asymmetry <= 1e-12);
        assert_relative_eq!(s.lambda_min_reduced, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn horizon_mismatch_is_an_error() {
        let sc = scenario::brownian(2);
        let spec = GridSpec::uniform(2.0, 64);
        let grid = IncrementGrid::sample(&spec, 2, 7, 0);
        let flow = integrate(&sc.system.compile(), &sc.x0, &grid, Scheme::StratonovichHeun).unwrap();
        assert!(matches!(
            reduced_matrix(&flow, &sc.system, (7, 0)),
            Err(CovarianceError::HorizonMismatch { .. })
        ));
        // But the general-horizon entry point accepts it.
        assert!(reduced_matrix_with_horizon(&flow, &sc.system, 2.0, (7, 0)).is_ok());
    }

    /// Closed-form path algebra: for dx = x o dW, J_{0,s}^{-1} V(x_s) = x_0,
    /// so C = x_0^2 up to scheme tolerance.
    #[test]
    fn geometric_reduced_matrix_is_initial_square() {
        let sc = scenario::geometric();
        for p in 0..20 {
            let (flow, system) = flow_for(&sc, 1000, 11, p);
            let s = reduced_matrix(&flow, system, (11, p)).unwrap();
            assert_relative_eq!(s.reduced[(0, 0)], 1.0, max_relative = 2e-2);
        }
    }

    #[test]
    fn quadratic_form_routes_agree() {
        for sc in [
            scenario::brownian(2),
            scenario::geometric(),
            scenario::langevin(1.0, 1.0),
            scenario::counterexample(),
            scenario::degenerate(),
        ] {
            let (flow, system) = flow_for(&sc, 128, 5, 3);
            let eta = crate::rng::CounterRng::new(42)
                .derive(crate::rng::domain::ETA)
                .unit_vector(0, system.dim());
            let (a, b) = quadratic_form_decomposition(&flow, system, &eta).unwrap();
            let denom = a.abs().max(1e-30);
            assert!(
                (a - b).abs() / denom <= 1e-10,
                "{}: {a} vs {b}",
                sc.name
            );
        }
    }

    #[test]
    fn congruence_identity_per_path() {
        // <eta, M eta> = <J^T eta, C J^T eta>.
        let sc = scenario::langevin(1.0, 1.0);
        let (flow, system) = flow_for(&sc, 128, 9, 1);
        let s = reduced_matrix(&flow, system, (9, 1)).unwrap();
        let j_t = flow.jacobians.last().unwrap().transpose();
        let eta = DVector::from_vec(vec![0.6, -0.8]);
        let lhs = eta.dot(&(&s.full * &eta));
        let jeta = &j_t * &eta;
        let rhs = jeta.dot(&(&s.reduced * &jeta));
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn langevin_samples_are_positive_definite() {
        let sc = scenario::langevin(1.0, 1.0);
        for p in 0..50 {
            let (flow, system) = flow_for(&sc, 128, 3, p);
            let s = reduced_matrix(&flow, system, (3, p)).unwrap();
            assert!(s.lambda_min_reduced > 0.0, "path {p}");
            assert!(s.lambda_min_full > -1e-10);
        }
    }

    #[test]
    fn degenerate_direction_is_exactly_null() {
        let sc = scenario::degenerate();
        let (flow, system) = flow_for(&sc, 64, 13, 0);
        let s = reduced_matrix(&flow, system, (13, 0)).unwrap();
        // e_2 is in the kernel of C exactly: the second row/column is zero.
        assert_eq!(s.reduced[(1, 1)], 0.0);
        assert_eq!(s.reduced[(0, 1)], 0.0);
    }

    #[test]
    fn z_process_starts_at_projection() {
        let sc = scenario::langevin(1.0, 1.0);
        let (flow, system) = flow_for(&sc, 64, 17, 2);
        let eta = [0.28, -0.96];
        let field = &system.diffusions()[0];
        let z = z_process(&flow, &eta, field).unwrap();
        let v0 = field.eval(&sc.x0).unwrap();
        assert_relative_eq!(z[0], eta[0] * v0[0] + eta[1] * v0[1], epsilon = 1e-14);
    }

    #[test]
    fn inverse_moments_examples() {
        // Brownian: lambda_min = 1 exactly, estimate exactly 1 for any p.
        let sc = scenario::brownian(2);
        let samples: Vec<CovarianceSample> = (0..10)
            .map(|p| {
                let (flow, system) = flow_for(&sc, 64, 23, p);
                reduced_matrix(&flow, system, (23, p)).unwrap()
            })
            .collect();
        let rep = inverse_moment_estimate(&samples, 3.0);
        assert_relative_eq!(rep.estimate, 1.0, epsilon = 1e-10);
        assert_eq!(rep.excluded_singular, 0);

        // Geometric at x0 = 1: C = 1 up to scheme tolerance, p = 2.
        let sc = scenario::geometric();
        let samples: Vec<CovarianceSample> = (0..20)
            .map(|p| {
                let (flow, system) = flow_for(&sc, 1000, 29, p);
                reduced_matrix(&flow, system, (29, p)).unwrap()
            })
            .collect();
        let rep = inverse_moment_estimate(&samples, 2.0);
        assert_relative_eq!(rep.estimate, 1.0, max_relative = 5e-2);

        // Degenerate samples are excluded and counted.
        let sc = scenario::degenerate();
        let samples: Vec<CovarianceSample> = (0..5)
            .map(|p| {
                let (flow, system) = flow_for(&sc, 64, 31, p);
                reduced_matrix(&flow, system, (31, p)).unwrap()
            })
            .collect();
        let rep = inverse_moment_estimate(&samples, 1.0);
        assert_eq!(rep.excluded_singular, 5);
        assert_eq!(rep.used, 0);
    }
}
