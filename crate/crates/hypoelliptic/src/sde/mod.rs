//! Stratonovich SDE integration with co-evolved Jacobian and inverse-Jacobian
//! flows, pathwise noise derivatives, and deterministic ensembles.
//!
//! The default scheme is predictor-corrector Heun, which targets the
//! Stratonovich integral directly; an Euler scheme on the Ito-corrected drift
//! exists as an independent cross-check of the law. State, Jacobian and
//! inverse Jacobian advance jointly per step, the inverse via its own linear
//! equation rather than per-step matrix inversion; the drift of |J J^-1 - I|
//! is tracked and reported instead.

pub mod control;
pub mod scenario;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{self, Tape};
use crate::rng::{domain, CounterRng};
use crate::vfield::{FieldError, VectorField};

#[derive(Debug, Error, PartialEq)]
pub enum SdeError {
    #[error("nonfinite state at step {step} (path exploded)")]
    Explosion { step: usize },
    #[error("index {index} out of range (N = {n_steps})")]
    IndexOutOfRange { index: usize, n_steps: usize },
    #[error("grid carries {got} noise components, system drives {expected}")]
    NoiseMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Time discretisation of [0, T]. Times are primary so that the step sum
/// telescopes to the horizon exactly; the last step absorbs any rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    times: Vec<f64>,
}

impl GridSpec {
    /// Uniform grid with N steps; `times[N] == t_final` holds exactly.
    pub fn uniform(t_final: f64, n_steps: usize) -> Self {
        assert!(n_steps >= 1 && t_final > 0.0);
        let times = (0..=n_steps)
            .map(|k| t_final * (k as f64) / (n_steps as f64))
            .collect();
        GridSpec { times }
    }

    /// Grid from explicit strictly increasing times starting at 0.
    pub fn from_times(times: Vec<f64>) -> Self {
        assert!(times.len() >= 2, "need at least one step");
        assert_eq!(times[0], 0.0, "grid must start at t = 0");
        assert!(times.windows(2).all(|w| w[1] > w[0]), "times must increase");
        GridSpec { times }
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }
}

/// A discrete Wiener path: the grid plus Gaussian increments, one per
/// (step, noise component). Sampling is counter-based, so the increment at
/// (seed, path_index, k, j) is a pure function of those four integers.
#[derive(Clone, Debug)]
pub struct IncrementGrid {
    pub spec: GridSpec,
    m: usize,
    /// Row-major [step][component].
    dw: Vec<f64>,
}

impl IncrementGrid {
    pub fn sample(spec: &GridSpec, m: usize, seed: u64, path_index: u64) -> Self {
        let rng = CounterRng::new(seed)
            .derive(domain::INCREMENTS)
            .derive(path_index);
        let n = spec.n_steps();
        let mut dw = Vec::with_capacity(n * m);
        for k in 0..n {
            let scale = spec.dt(k).sqrt();
            for j in 0..m {
                dw.push(scale * rng.normal(k as u64, j as u64));
            }
        }
        IncrementGrid {
            spec: spec.clone(),
            m,
            dw,
        }
    }

    /// All increments zero (deterministic dynamics).
    pub fn zeros(spec: &GridSpec, m: usize) -> Self {
        let n = spec.n_steps();
        IncrementGrid {
            spec: spec.clone(),
            m,
            dw: vec![0.0; n * m],
        }
    }

    pub fn from_increments(spec: GridSpec, m: usize, dw: Vec<f64>) -> Self {
        assert_eq!(dw.len(), spec.n_steps() * m);
        IncrementGrid { spec, m, dw }
    }

    pub fn n_noise(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn dw(&self, k: usize, j: usize) -> f64 {
        self.dw[k * self.m + j]
    }

    #[inline]
    pub fn dw_row(&self, k: usize) -> &[f64] {
        &self.dw[k * self.m..(k + 1) * self.m]
    }

    /// Copy with component j of increment k shifted by `delta`.
    pub fn bumped(&self, k: usize, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.dw[k * self.m + j] += delta;
        out
    }

    /// Coarsened copy: groups of `factor` consecutive steps merge, their
    /// increments summing. The same Brownian path then drives every level of
    /// a strong-convergence ladder.
    pub fn coarsen(&self, factor: usize) -> Self {
        let n = self.spec.n_steps();
        assert!(factor >= 1 && n % factor == 0);
        let times: Vec<f64> = self.spec.times.iter().step_by(factor).cloned().collect();
        let coarse_n = n / factor;
        let mut dw = vec![0.0; coarse_n * self.m];
        for k in 0..n {
            for j in 0..self.m {
                dw[(k / factor) * self.m + j] += self.dw(k, j);
            }
        }
        IncrementGrid {
            spec: GridSpec { times },
            m: self.m,
            dw,
        }
    }

    /// Tail of the path starting at step `k`, with times re-based to 0.
    pub fn suffix(&self, k: usize) -> Self {
        let t0 = self.spec.times[k];
        let times = self.spec.times[k..].iter().map(|t| t - t0).collect();
        IncrementGrid {
            spec: GridSpec { times },
            m: self.m,
            dw: self.dw[k * self.m..].to_vec(),
        }
    }
}

/// Integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Predictor-corrector Heun targeting the Stratonovich integral.
    StratonovichHeun,
    /// Euler-Maruyama on the Ito-corrected drift; converges to the same law.
    ItoEulerCorrected,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "stratonovich-heun" | "heun" => Some(Scheme::StratonovichHeun),
            "ito-euler" | "ito-euler-on-corrected-drift" => Some(Scheme::ItoEulerCorrected),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::StratonovichHeun => "stratonovich-heun",
            Scheme::ItoEulerCorrected => "ito-euler",
        }
    }
}

/// Drift, diffusion fields, and the symbolically derived Ito-corrected drift
/// V0 + 1/2 sum_i (DV_i) V_i.
#[derive(Clone, Debug)]
pub struct SdeSystem {
    drift: VectorField,
    diffusions: Vec<VectorField>,
    ito_drift: VectorField,
}

impl SdeSystem {
    pub fn new(drift: VectorField, diffusions: Vec<VectorField>) -> Result<Self, FieldError> {
        let n = drift.dim();
        for v in &diffusions {
            if v.dim() != n {
                return Err(FieldError::DimensionMismatch {
                    expected: n,
                    got: v.dim(),
                });
            }
        }
        let ito_components: Vec<_> = (0..n)
            .map(|a| {
                let correction = diffusions.iter().flat_map(|vi| {
                    let comp = vi.components();
                    (0..n).map(move |b| {
                        expr::mul([
                            expr::constant(0.5),
                            expr::diff(&comp[a], &b),
                            comp[b].clone(),
                        ])
                    })
                });
                expr::add(
                    std::iter::once(drift.components()[a].clone()).chain(correction),
                )
            })
            .collect();
        let ito_drift = VectorField::new(ito_components)?;
        Ok(SdeSystem {
            drift,
            diffusions,
            ito_drift,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn n_noise(&self) -> usize {
        self.diffusions.len()
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn diffusions(&self) -> &[VectorField] {
        &self.diffusions
    }

    pub fn ito_drift(&self) -> &VectorField {
        &self.ito_drift
    }

    pub fn compile(&self) -> CompiledSde {
        CompiledSde::new(self)
    }
}

/// Tape-compiled fields and derivative matrices; the per-step hot path of
/// every integrator.
pub struct CompiledSde {
    n: usize,
    m: usize,
    drift: Vec<Tape>,
    ito_drift: Vec<Tape>,
    diffusions: Vec<Vec<Tape>>,
    d_drift: Vec<Tape>,
    d_ito_drift: Vec<Tape>,
    d_diffusions: Vec<Vec<Tape>>,
}

fn compile_field(f: &VectorField) -> Vec<Tape> {
    f.components().iter().map(Tape::compile).collect()
}

/// Row-major n*n tapes of the derivative matrix.
fn compile_jacobian(f: &VectorField) -> Vec<Tape> {
    let n = f.dim();
    f.components()
        .iter()
        .flat_map(|c| (0..n).map(|j| Tape::compile(&expr::diff(c, &j))))
        .collect()
}

impl CompiledSde {
    pub fn new(sys: &SdeSystem) -> Self {
        CompiledSde {
            n: sys.dim(),
            m: sys.n_noise(),
            drift: compile_field(sys.drift()),
            ito_drift: compile_field(sys.ito_drift()),
            diffusions: sys.diffusions().iter().map(compile_field).collect(),
            d_drift: compile_jacobian(sys.drift()),
            d_ito_drift: compile_jacobian(sys.ito_drift()),
            d_diffusions: sys.diffusions().iter().map(compile_jacobian).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_noise(&self) -> usize {
        self.m
    }

    fn eval_vec(tapes: &[Tape], x: &[f64], out: &mut DVector<f64>, stack: &mut Vec<f64>) {
        for (i, t) in tapes.iter().enumerate() {
            out[i] = t.eval(x, stack);
        }
    }

    /// Evaluates diffusion field `i` at `x` into `out`; tape-compiled hot path.
    pub fn diffusion_into(
        &self,
        i: usize,
        x: &[f64],
        out: &mut DVector<f64>,
        stack: &mut Vec<f64>,
    ) {
        Self::eval_vec(&self.diffusions[i], x, out, stack);
    }

    fn eval_mat(tapes: &[Tape], n: usize, x: &[f64], out: &mut DMatrix<f64>, stack: &mut Vec<f64>) {
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = tapes[i * n + j].eval(x, stack);
            }
        }
    }
}

/// Simulated trajectory with its Jacobian and inverse-Jacobian flows.
#[derive(Clone, Debug)]
pub struct FlowPath {
    pub grid: IncrementGrid,
    /// States x_{t_0..t_N}.
    pub states: Vec<DVector<f64>>,
    /// J_{0,t_k}; J_{0,0} = I exactly.
    pub jacobians: Vec<DMatrix<f64>>,
    /// J_{0,t_k}^{-1} integrated via its own flow; exact identity at t_0.
    pub inverse_jacobians: Vec<DMatrix<f64>>,
    /// max_k |J_{0,t_k} J_{0,t_k}^{-1} - I|_F, the inverse-flow drift monitor.
    pub inv_drift_max: f64,
    /// sup over k and i of |x_i(t_k)|.
    pub sup_abs_state: f64,
}

impl FlowPath {
    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Per-thread scratch buffers for the integrators.
pub struct Workspace {
    stack: Vec<f64>,
    a_x: DVector<f64>,
    a_xp: DVector<f64>,
    v_x: Vec<DVector<f64>>,
    v_xp: Vec<DVector<f64>>,
    b0_x: DMatrix<f64>,
    b0_xp: DMatrix<f64>,
    bi_x: Vec<DMatrix<f64>>,
    bi_xp: Vec<DMatrix<f64>>,
    xp: DVector<f64>,
    jp: DMatrix<f64>,
    yp: DMatrix<f64>,
    jn: DMatrix<f64>,
    yn: DMatrix<f64>,
    xn: DVector<f64>,
    prod: DMatrix<f64>,
}

impl Workspace {
    pub fn new(n: usize, m: usize) -> Self {
        Workspace {
            stack: Vec::with_capacity(32),
            a_x: DVector::zeros(n),
            a_xp: DVector::zeros(n),
            v_x: (0..m).map(|_| DVector::zeros(n)).collect(),
            v_xp: (0..m).map(|_| DVector::zeros(n)).collect(),
            b0_x: DMatrix::zeros(n, n),
            b0_xp: DMatrix::zeros(n, n),
            bi_x: (0..m).map(|_| DMatrix::zeros(n, n)).collect(),
            bi_xp: (0..m).map(|_| DMatrix::zeros(n, n)).collect(),
            xp: DVector::zeros(n),
            jp: DMatrix::zeros(n, n),
            yp: DMatrix::zeros(n, n),
            jn: DMatrix::zeros(n, n),
            yn: DMatrix::zeros(n, n),
            xn: DVector::zeros(n),
            prod: DMatrix::zeros(n, n),
        }
    }
}

fn frobenius_to_identity(prod: &DMatrix<f64>) -> f64 {
    let n = prod.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = prod[(i, j)] - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// One Heun step of the coupled (x, J, J^-1) system. The same
/// predictor-corrector is applied to all three; the Jacobian steps use DV
/// evaluated along the state path (current point and predictor point).
#[allow(clippy::too_many_arguments)]
fn heun_step(
    sys: &CompiledSde,
    h: f64,
    dw: &[f64],
    x: &mut DVector<f64>,
    j: &mut DMatrix<f64>,
    y: &mut DMatrix<f64>,
    ws: &mut Workspace,
) {
    let m = sys.m;
    let n = sys.n;

    CompiledSde::eval_vec(&sys.drift, x.as_slice(), &mut ws.a_x, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_vec(&sys.diffusions[i], x.as_slice(), &mut ws.v_x[i], &mut ws.stack);
    }
    CompiledSde::eval_mat(&sys.d_drift, n, x.as_slice(), &mut ws.b0_x, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_mat(
            &sys.d_diffusions[i],
            n,
            x.as_slice(),
            &mut ws.bi_x[i],
            &mut ws.stack,
        );
    }

    // Predictors.
    ws.xp.copy_from(x);
    ws.xp.axpy(h, &ws.a_x, 1.0);
    for i in 0..m {
        ws.xp.axpy(dw[i], &ws.v_x[i], 1.0);
    }
    ws.jp.copy_from(j);
    ws.jp.gemm(h, &ws.b0_x, j, 1.0);
    for i in 0..m {
        ws.jp.gemm(dw[i], &ws.bi_x[i], j, 1.0);
    }
    ws.yp.copy_from(y);
    ws.yp.gemm(-h, y, &ws.b0_x, 1.0);
    for i in 0..m {
        ws.yp.gemm(-dw[i], y, &ws.bi_x[i], 1.0);
    }

    // Field evaluations at the predictor point.
    CompiledSde::eval_vec(&sys.drift, ws.xp.as_slice(), &mut ws.a_xp, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_vec(
            &sys.diffusions[i],
            ws.xp.as_slice(),
            &mut ws.v_xp[i],
            &mut ws.stack,
        );
    }
    CompiledSde::eval_mat(&sys.d_drift, n, ws.xp.as_slice(), &mut ws.b0_xp, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_mat(
            &sys.d_diffusions[i],
            n,
            ws.xp.as_slice(),
            &mut ws.bi_xp[i],
            &mut ws.stack,
        );
    }

    // Correctors: average both endpoint evaluations.
    ws.xn.copy_from(x);
    ws.xn.axpy(0.5 * h, &ws.a_x, 1.0);
    ws.xn.axpy(0.5 * h, &ws.a_xp, 1.0);
    for i in 0..m {
        ws.xn.axpy(0.5 * dw[i], &ws.v_x[i], 1.0);
        ws.xn.axpy(0.5 * dw[i], &ws.v_xp[i], 1.0);
    }

    ws.jn.copy_from(j);
    ws.jn.gemm(0.5 * h, &ws.b0_x, j, 1.0);
    ws.jn.gemm(0.5 * h, &ws.b0_xp, &ws.jp, 1.0);
    for i in 0..m {
        ws.jn.gemm(0.5 * dw[i], &ws.bi_x[i], j, 1.0);
        ws.jn.gemm(0.5 * dw[i], &ws.bi_xp[i], &ws.jp, 1.0);
    }

    ws.yn.copy_from(y);
    ws.yn.gemm(-0.5 * h, y, &ws.b0_x, 1.0);
    ws.yn.gemm(-0.5 * h, &ws.yp, &ws.b0_xp, 1.0);
    for i in 0..m {
        ws.yn.gemm(-0.5 * dw[i], y, &ws.bi_x[i], 1.0);
        ws.yn.gemm(-0.5 * dw[i], &ws.yp, &ws.bi_xp[i], 1.0);
    }

    x.copy_from(&ws.xn);
    j.copy_from(&ws.jn);
    y.copy_from(&ws.yn);
}

/// One Euler step on the Ito-corrected drift. The Jacobian drift matrix is
/// the exact symbolic derivative of the corrected drift; the inverse flow
/// carries the matching Ito correction + sum_i Y B_i B_i.
#[allow(clippy::too_many_arguments)]
fn ito_euler_step(
    sys: &CompiledSde,
    h: f64,
    dw: &[f64],
    x: &mut DVector<f64>,
    j: &mut DMatrix<f64>,
    y: &mut DMatrix<f64>,
    ws: &mut Workspace,
) {
    let m = sys.m;
    let n = sys.n;

    CompiledSde::eval_vec(&sys.ito_drift, x.as_slice(), &mut ws.a_x, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_vec(&sys.diffusions[i], x.as_slice(), &mut ws.v_x[i], &mut ws.stack);
    }
    CompiledSde::eval_mat(&sys.d_ito_drift, n, x.as_slice(), &mut ws.b0_x, &mut ws.stack);
    for i in 0..m {
        CompiledSde::eval_mat(
            &sys.d_diffusions[i],
            n,
            x.as_slice(),
            &mut ws.bi_x[i],
            &mut ws.stack,
        );
    }

    ws.xn.copy_from(x);
    ws.xn.axpy(h, &ws.a_x, 1.0);
    for i in 0..m {
        ws.xn.axpy(dw[i], &ws.v_x[i], 1.0);
    }

    ws.jn.copy_from(j);
    ws.jn.gemm(h, &ws.b0_x, j, 1.0);
    for i in 0..m {
        ws.jn.gemm(dw[i], &ws.bi_x[i], j, 1.0);
    }

    ws.yn.copy_from(y);
    ws.yn.gemm(-h, y, &ws.b0_x, 1.0);
    for i in 0..m {
        // prod = Y B_i, then Y' += h prod B_i - dw_i prod.
        ws.prod.gemm(1.0, y, &ws.bi_x[i], 0.0);
        ws.yn.gemm(h, &ws.prod, &ws.bi_x[i], 1.0);
        let dwi = dw[i];
        ws.yn.zip_apply(&ws.prod, |yv, pv| *yv -= dwi * pv);
    }

    x.copy_from(&ws.xn);
    j.copy_from(&ws.jn);
    y.copy_from(&ws.yn);
}

fn all_finite(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Low-level single-path driver exposing the per-step state: the building
/// block for integrators and for diagnostics that re-integrate suffixes of
/// a path from stored (x, J, J^-1) snapshots.
pub struct Stepper<'a> {
    sys: &'a CompiledSde,
    scheme: Scheme,
    x: DVector<f64>,
    j: DMatrix<f64>,
    y: DMatrix<f64>,
    ws: Workspace,
    steps_taken: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a CompiledSde, scheme: Scheme) -> Self {
        let n = sys.n;
        Stepper {
            sys,
            scheme,
            x: DVector::zeros(n),
            j: DMatrix::identity(n, n),
            y: DMatrix::identity(n, n),
            ws: Workspace::new(n, sys.m),
            steps_taken: 0,
        }
    }

    /// Restarts at a fresh initial condition with identity flows.
    pub fn reset(&mut self, x0: &[f64]) {
        self.x.copy_from_slice(x0);
        self.j.fill_with_identity();
        self.y.fill_with_identity();
        self.steps_taken = 0;
    }

    /// Restarts mid-path from stored factors.
    pub fn reset_from(&mut self, x: &DVector<f64>, j: &DMatrix<f64>, y: &DMatrix<f64>) {
        self.x.copy_from(x);
        self.j.copy_from(j);
        self.y.copy_from(y);
        self.steps_taken = 0;
    }

    /// Advances the coupled system by one step.
    pub fn step(&mut self, h: f64, dw: &[f64]) -> Result<(), SdeError> {
        match self.scheme {
            Scheme::StratonovichHeun => {
                heun_step(self.sys, h, dw, &mut self.x, &mut self.j, &mut self.y, &mut self.ws)
            }
            Scheme::ItoEulerCorrected => {
                ito_euler_step(self.sys, h, dw, &mut self.x, &mut self.j, &mut self.y, &mut self.ws)
            }
        }
        let step = self.steps_taken;
        self.steps_taken += 1;
        if !all_finite(&self.x)
            || !self.j.iter().all(|v| v.is_finite())
            || !self.y.iter().all(|v| v.is_finite())
        {
            return Err(SdeError::Explosion { step });
        }
        Ok(())
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn inverse_jacobian(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// |J J^-1 - I|_F at the current step.
    pub fn inverse_drift(&mut self) -> f64 {
        self.ws.prod.gemm(1.0, &self.j, &self.y, 0.0);
        frobenius_to_identity(&self.ws.prod)
    }
}

/// Integrates state, Jacobian and inverse Jacobian jointly over the grid.
pub fn integrate(
    sys: &CompiledSde,
    x0: &[f64],
    grid: &IncrementGrid,
    scheme: Scheme,
) -> Result<FlowPath, SdeError> {
    let mut ws = Workspace::new(sys.n, sys.m);
    integrate_with(sys, x0, grid, scheme, &mut ws)
}

pub fn integrate_with(
    sys: &CompiledSde,
    x0: &[f64],
    grid: &IncrementGrid,
    scheme: Scheme,
    ws: &mut Workspace,
) -> Result<FlowPath, SdeError> {
    if grid.n_noise() != sys.m {
        return Err(SdeError::NoiseMismatch {
            expected: sys.m,
            got: grid.n_noise(),
        });
    }
    if x0.len() != sys.n {
        return Err(SdeError::Field(FieldError::DimensionMismatch {
            expected: sys.n,
            got: x0.len(),
        }));
    }
    let n_steps = grid.spec.n_steps();
    let mut x = DVector::from_column_slice(x0);
    let mut j = DMatrix::identity(sys.n, sys.n);
    let mut y = DMatrix::identity(sys.n, sys.n);

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut jacobians = Vec::with_capacity(n_steps + 1);
    let mut inverse_jacobians = Vec::with_capacity(n_steps + 1);
    states.push(x.clone());
    jacobians.push(j.clone());
    inverse_jacobians.push(y.clone());

    let mut inv_drift_max = 0.0f64;
    let mut sup_abs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    for k in 0..n_steps {
        let h = grid.spec.dt(k);
        let dw = grid.dw_row(k);
        match scheme {
            Scheme::StratonovichHeun => heun_step(sys, h, dw, &mut x, &mut j, &mut y, ws),
            Scheme::ItoEulerCorrected => ito_euler_step(sys, h, dw, &mut x, &mut j, &mut y, ws),
        }
        if !all_finite(&x) || !j.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(SdeError::Explosion { step: k });
        }
        ws.prod.gemm(1.0, &j, &y, 0.0);
        inv_drift_max = inv_drift_max.max(frobenius_to_identity(&ws.prod));
        sup_abs = x.iter().fold(sup_abs, |a, v| a.max(v.abs()));
        states.push(x.clone());
        jacobians.push(j.clone());
        inverse_jacobians.push(y.clone());
    }

    Ok(FlowPath {
        grid: grid.clone(),
        states,
        jacobians,
        inverse_jacobians,
        inv_drift_max,
        sup_abs_state: sup_abs,
    })
}

/// Terminal-only integration: returns (x_T, J_T, Y_T, drift monitor,
/// sup |x|). Used by large ensembles that do not need the stored path.
pub struct LightPath {
    pub terminal: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub inverse_jacobian: DMatrix<f64>,
    pub inv_drift_max: f64,
    pub sup_abs_state: f64,
}

pub fn integrate_light(
    sys: &CompiledSde,
    x0: &[f64],
    grid: &IncrementGrid,
    scheme: Scheme,
    ws: &mut Workspace,
) -> Result<LightPath, SdeError> {
    if grid.n_noise() != sys.m {
        return Err(SdeError::NoiseMismatch {
            expected: sys.m,
            got: grid.n_noise(),
        });
    }
    let n_steps = grid.spec.n_steps();
    let mut x = DVector::from_column_slice(x0);
    let mut j = DMatrix::identity(sys.n, sys.n);
    let mut y = DMatrix::identity(sys.n, sys.n);
    let mut inv_drift_max = 0.0f64;
    let mut sup_abs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    for k in 0..n_steps {
        let h = grid.spec.dt(k);
        let dw = grid.dw_row(k);
        match scheme {
            Scheme::StratonovichHeun => heun_step(sys, h, dw, &mut x, &mut j, &mut y, ws),
            Scheme::ItoEulerCorrected => ito_euler_step(sys, h, dw, &mut x, &mut j, &mut y, ws),
        }
        if !all_finite(&x) {
            return Err(SdeError::Explosion { step: k });
        }
        ws.prod.gemm(1.0, &j, &y, 0.0);
        inv_drift_max = inv_drift_max.max(frobenius_to_identity(&ws.prod));
        sup_abs = x.iter().fold(sup_abs, |a, v| a.max(v.abs()));
    }

    Ok(LightPath {
        terminal: x,
        jacobian: j,
        inverse_jacobian: y,
        inv_drift_max,
        sup_abs_state: sup_abs,
    })
}

/// Pathwise noise derivative of the terminal state: J_{0,T} J_{0,t_s}^{-1}
/// V_j(x_{t_s}) by the flow composition law, and the zero vector at the
/// terminal index (the derivative vanishes for s >= t).
pub fn malliavin_derivative_path(
    flow: &FlowPath,
    system: &SdeSystem,
    s_index: usize,
    j: usize,
) -> Result<DVector<f64>, SdeError> {
    let n_steps = flow.n_steps();
    if s_index > n_steps {
        return Err(SdeError::IndexOutOfRange {
            index: s_index,
            n_steps,
        });
    }
    if j >= system.n_noise() {
        return Err(SdeError::IndexOutOfRange {
            index: j,
            n_steps: system.n_noise(),
        });
    }
    if s_index == n_steps {
        return Ok(DVector::zeros(system.dim()));
    }
    let v = system.diffusions()[j].eval(flow.states[s_index].as_slice())?;
    let v = DVector::from_vec(v);
    Ok(flow.jacobians[n_steps].clone() * (&flow.inverse_jacobians[s_index] * v))
}

/// Central-difference oracle for the pathwise noise derivative: re-integrates
/// with component j of increment s bumped by +-`bump`, all other increments
/// identical.
pub fn bump_derivative(
    sys: &CompiledSde,
    x0: &[f64],
    grid: &IncrementGrid,
    s_index: usize,
    j: usize,
    bump: f64,
    scheme: Scheme,
) -> Result<DVector<f64>, SdeError> {
    assert!(bump > 0.0);
    if s_index >= grid.spec.n_steps() || j >= grid.n_noise() {
        return Err(SdeError::IndexOutOfRange {
            index: s_index,
            n_steps: grid.spec.n_steps(),
        });
    }
    let mut ws = Workspace::new(sys.n, sys.m);
    let up = integrate_light(sys, x0, &grid.bumped(s_index, j, bump), scheme, &mut ws)?;
    let dn = integrate_light(sys, x0, &grid.bumped(s_index, j, -bump), scheme, &mut ws)?;
    Ok((up.terminal - dn.terminal) / (2.0 * bump))
}

/// Ensemble outcome: per-path values in path order plus exploded paths
/// (index, failing step). Reductions over `values` are deterministic
/// regardless of thread count.
pub struct EnsembleResult<R> {
    pub values: Vec<(u64, R)>,
    pub exploded: Vec<(u64, usize)>,
}

impl<R> EnsembleResult<R> {
    pub fn n_ok(&self) -> usize {
        self.values.len()
    }
}

/// Runs `map` over an ensemble of paths. Each path is a pure function of
/// (seed, path_index); results are collected in path order.
pub fn run_ensemble<R: Send>(
    sys: &CompiledSde,
    x0: &[f64],
    spec: &GridSpec,
    seed: u64,
    paths: u64,
    scheme: Scheme,
    map: impl Fn(u64, &FlowPath) -> R + Sync,
) -> EnsembleResult<R> {
    let raw: Vec<(u64, Result<R, usize>)> = (0..paths)
        .into_par_iter()
        .map_init(
            || Workspace::new(sys.n, sys.m),
            |ws, p| {
                let grid = IncrementGrid::sample(spec, sys.m, seed, p);
                match integrate_with(sys, x0, &grid, scheme, ws) {
                    Ok(flow) => (p, Ok(map(p, &flow))),
                    Err(SdeError::Explosion { step }) => (p, Err(step)),
                    Err(e) => panic!("ensemble setup error: {e}"),
                }
            },
        )
        .collect();

    let mut values = Vec::with_capacity(raw.len());
    let mut exploded = Vec::new();
    for (p, r) in raw {
        match r {
            Ok(v) => values.push((p, v)),
            Err(step) => exploded.push((p, step)),
        }
    }
    EnsembleResult { values, exploded }
}

/// Terminal-only ensemble variant for large sample counts.
pub fn run_ensemble_light<R: Send>(
    sys: &CompiledSde,
    x0: &[f64],
    spec: &GridSpec,
    seed: u64,
    paths: u64,
    scheme: Scheme,
    map: impl Fn(u64, &LightPath) -> R + Sync,
) -> EnsembleResult<R> {
    let raw: Vec<(u64, Result<R, usize>)> = (0..paths)
        .into_par_iter()
        .map_init(
            || Workspace::new(sys.n, sys.m),
            |ws, p| {
                let grid = IncrementGrid::sample(spec, sys.m, seed, p);
                match integrate_light(sys, x0, &grid, scheme, ws) {
                    Ok(light) => (p, Ok(map(p, &light))),
                    Err(SdeError::Explosion { step }) => (p, Err(step)),
                    Err(e) => panic!("ensemble setup error: {e}"),
                }
            },
        )
        .collect();

    let mut values = Vec::with_capacity(raw.len());
    let mut exploded = Vec::new();
    for (p, r) in raw {
        match r {
            Ok(v) => values.push((p, v)),
            Err(step) => exploded.push((p, step)),
        }
    }
    EnsembleResult { values, exploded }
}
