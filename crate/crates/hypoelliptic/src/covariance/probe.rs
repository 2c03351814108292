//! First-order integration-by-parts density probe.
//!
//! Tests the identity E[d_j G(X_T)] = E[G(X_T) * skorokhod(u_j)] with
//! u_j(t) = sum_m D_t X_m M^{-1}_{mj}: the mechanism that trades a
//! derivative of the observable for an anticipating stochastic integral,
//! which is exactly what invertibility of the Malliavin matrix buys.
//!
//! The Skorokhod correction sum_{k,i} d_{k,i} u^i_k dt_k needs derivatives
//! of J_T and M with respect to each increment. Those are computed by
//! central bump differentiation with prefix reuse: the path, Jacobian and
//! inverse-Jacobian snapshots before the bumped step are unaffected, so only
//! the suffix is re-integrated. M^{-1} is differentiated through the matrix
//! rule d(M^{-1}) = -M^{-1} (dM) M^{-1}.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::expr::{self, Tape};
use crate::sde::{
    integrate_with, CompiledSde, GridSpec, IncrementGrid, Scheme, SdeSystem, Stepper, Workspace,
};
use crate::vfield::ScalarField;

use super::CovarianceError;

/// Condition-number cap on M; worse-conditioned paths are excluded (and
/// counted; an exclusion rate over 1% aborts the probe).
pub const CONDITION_CAP: f64 = 1e10;

/// Bump size for the increment derivatives of J and M.
pub const PROBE_BUMP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ProbeReport {
    /// Monte Carlo mean of d_j G(X_T).
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Monte Carlo mean of G(X_T) * skorokhod(u_j).
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// (lhs - rhs) / stderr of the per-path difference (the two estimators
    /// share paths, so the difference carries the combined uncertainty).
    pub z_score: f64,
    pub paths_used: usize,
    pub excluded: usize,
}

struct PathCtx<'a> {
    stepper: Stepper<'a>,
    ws: Workspace,
    stack: Vec<f64>,
    v_buf: DVector<f64>,
    z_buf: DVector<f64>,
}

/// One path's (lhs, rhs) contribution, or None if the path is excluded.
#[allow(clippy::too_many_arguments)]
fn probe_path(
    sys: &CompiledSde,
    ctx: &mut PathCtx,
    x0: &[f64],
    grid: &IncrementGrid,
    scheme: Scheme,
    g: &Tape,
    dg_j: &Tape,
    coord_j: usize,
) -> Result<Option<(f64, f64)>, CovarianceError> {
    let n = sys.dim();
    let m = sys.n_noise();
    let n_steps = grid.spec.n_steps();
    let _ = coord_j;

    let flow = match integrate_with(sys, x0, grid, scheme, &mut ctx.ws) {
        Ok(f) => f,
        Err(crate::sde::SdeError::Explosion { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };

    // Prefix sums of the reduced-matrix quadrature and the transported
    // diffusion vectors z[k][i] = Y_k V_i(x_k).
    let mut prefix_c = Vec::with_capacity(n_steps + 1);
    prefix_c.push(DMatrix::zeros(n, n));
    let mut z_vecs: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let dt = grid.spec.dt(k);
        let mut c_next = prefix_c[k].clone();
        let mut row = Vec::with_capacity(m);
        for i in 0..m {
            sys.diffusion_into(i, flow.states[k].as_slice(), &mut ctx.v_buf, &mut ctx.stack);
            flow.inverse_jacobians[k].mul_to(&ctx.v_buf, &mut ctx.z_buf);
            for a in 0..n {
                for b in 0..n {
                    c_next[(a, b)] += dt * ctx.z_buf[a] * ctx.z_buf[b];
                }
            }
            row.push(ctx.z_buf.clone());
        }
        z_vecs.push(row);
        prefix_c.push(c_next);
    }

    let j_t = flow.jacobians.last().unwrap();
    let mut m_mat = j_t * &prefix_c[n_steps] * j_t.transpose();
    super::symmetrise(&mut m_mat);
    let eig = m_mat.clone().symmetric_eigen().eigenvalues;
    let (lam_min, lam_max) = eig
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if lam_min <= 0.0 || lam_max / lam_min > CONDITION_CAP {
        return Ok(None);
    }
    let m_inv = match m_mat.clone().try_inverse() {
        Some(inv) => inv,
        None => return Ok(None),
    };
    let minv_col = m_inv.column(coord_j).into_owned();

    // Ito-looking sum over the unbumped path.
    let mut d_vecs: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_steps);
    let mut ito = 0.0;
    for k in 0..n_steps {
        let mut row = Vec::with_capacity(m);
        for i in 0..m {
            let d = j_t * &z_vecs[k][i];
            ito += d.dot(&minv_col) * grid.dw(k, i);
            row.push(d);
        }
        d_vecs.push(row);
    }

    // Trace correction by central bumps with prefix reuse.
    let mut correction = 0.0;
    let mut c_suffix = DMatrix::zeros(n, n);
    let mut bumped_j: [DMatrix<f64>; 2] = [DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    let mut bumped_m: [DMatrix<f64>; 2] = [DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    let mut dw_row = vec![0.0; m];
    for k in 0..n_steps {
        let dt_k = grid.spec.dt(k);
        for i in 0..m {
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                ctx.stepper.reset_from(
                    &flow.states[k],
                    &flow.jacobians[k],
                    &flow.inverse_jacobians[k],
                );
                // Step k with the bumped increment.
                dw_row.copy_from_slice(grid.dw_row(k));
                dw_row[i] += sign * PROBE_BUMP;
                if ctx.stepper.step(dt_k, &dw_row).is_err() {
                    return Ok(None);
                }
                // Remaining steps with the original increments, accumulating
                // the suffix part of C as we pass each left endpoint.
                c_suffix.fill(0.0);
                for s in (k + 1)..n_steps {
                    let dt_s = grid.spec.dt(s);
                    for ii in 0..m {
                        sys.diffusion_into(
                            ii,
                            ctx.stepper.state().as_slice(),
                            &mut ctx.v_buf,
                            &mut ctx.stack,
                        );
                        ctx.stepper
                            .inverse_jacobian()
                            .mul_to(&ctx.v_buf, &mut ctx.z_buf);
                        for a in 0..n {
                            for b in 0..n {
                                c_suffix[(a, b)] += dt_s * ctx.z_buf[a] * ctx.z_buf[b];
                            }
                        }
                    }
                    if ctx.stepper.step(dt_s, grid.dw_row(s)).is_err() {
                        return Ok(None);
                    }
                }
                let jb = ctx.stepper.jacobian();
                let cb = &prefix_c[k + 1] + &c_suffix;
                let mut mb = jb * cb * jb.transpose();
                super::symmetrise(&mut mb);
                bumped_j[side].copy_from(jb);
                bumped_m[side].copy_from(&mb);
            }
            let scale = 1.0 / (2.0 * PROBE_BUMP);
            let d_j = (&bumped_j[0] - &bumped_j[1]) * scale;
            let d_m = (&bumped_m[0] - &bumped_m[1]) * scale;
            // d(u^i_k) = (dJ z) . M^{-1} e_j - D . M^{-1} dM M^{-1} e_j
            let term1 = (&d_j * &z_vecs[k][i]).dot(&minv_col);
            let term2 = d_vecs[k][i].dot(&(&m_inv * (&d_m * &minv_col)));
            correction += (term1 - term2) * dt_k;
        }
    }

    let skorokhod = ito - correction;
    let x_t = flow.states[n_steps].as_slice();
    let lhs = dg_j.eval(x_t, &mut ctx.stack);
    let rhs = g.eval(x_t, &mut ctx.stack) * skorokhod;
    Ok(Some((lhs, rhs)))
}

/// Runs the probe over an ensemble. `g` is a smooth scalar observable over
/// the state coordinates; `coord_j` selects the differentiated coordinate.
#[allow(clippy::too_many_arguments)]
pub fn ibp_density_probe(
    system: &SdeSystem,
    x0: &[f64],
    g: &ScalarField,
    coord_j: usize,
    spec: &GridSpec,
    scheme: Scheme,
    paths: u64,
    seed: u64,
) -> Result<ProbeReport, CovarianceError> {
    assert!(coord_j < system.dim());
    let compiled = system.compile();
    let g_tape = Tape::compile(g);
    let dg_tape = Tape::compile(&expr::diff(g, &coord_j));

    let per_path: Vec<Option<(f64, f64)>> = (0..paths)
        .into_par_iter()
        .map_init(
            || PathCtx {
                stepper: Stepper::new(&compiled, scheme),
                ws: Workspace::new(system.dim(), system.n_noise()),
                stack: Vec::with_capacity(32),
                v_buf: DVector::zeros(system.dim()),
                z_buf: DVector::zeros(system.dim()),
            },
            |ctx, p| {
                let grid = IncrementGrid::sample(spec, system.n_noise(), seed, p);
                probe_path(
                    &compiled, ctx, x0, &grid, scheme, &g_tape, &dg_tape, coord_j,
                )
                .expect("probe setup error")
            },
        )
        .collect();

    let mut lhs_acc = Vec::new();
    let mut rhs_acc = Vec::new();
    let mut excluded = 0usize;
    for r in per_path {
        match r {
            Some((l, r)) => {
                lhs_acc.push(l);
                rhs_acc.push(r);
            }
            None => excluded += 1,
        }
    }
    let used = lhs_acc.len();
    if excluded * 100 > (used + excluded).max(1) {
        return Err(CovarianceError::TooManyExcluded {
            excluded,
            paths: used + excluded,
            percent_cap: 1.0,
        });
    }

    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (lhs, lhs_se) = mean_se(&lhs_acc);
    let (rhs, rhs_se) = mean_se(&rhs_acc);
    let diffs: Vec<f64> = lhs_acc
        .iter()
        .zip(&rhs_acc)
        .map(|(a, b)| a - b)
        .collect();
    let (dmean, dse) = mean_se(&diffs);
    Ok(ProbeReport {
        lhs,
        lhs_stderr: lhs_se,
        rhs,
        rhs_stderr: rhs_se,
        z_score: dmean / dse,
        paths_used: used,
        excluded,
    })
}
