//! Finite-N Malliavin calculus over Wiener increments.
//!
//! A functional is a computational graph over the Gaussian increments
//! dw_1..dw_N (tagged with a noise component when m > 1). The partial
//! derivative with respect to an increment is the discrete Malliavin
//! derivative; the Skorokhod integral of a family {F_k} is the Ito-looking
//! sum minus the trace correction,
//!
//!   sum_k F_k dw_k - sum_k d_k F_k dt_k,
//!
//! which reduces to the plain Ito sum on adapted integrands. Polynomial
//! functionals route to the exact Gaussian moment oracle in [`wick`], the
//! rest to counter-based Monte Carlo.

mod corpus;
mod wick;

pub use corpus::{
    default_corpus_layouts, monomials, parse_corpus_line, run_identity_corpus, CorpusConfig,
    CorpusRow, IdentityKind,
};
pub use wick::DEGREE_BUDGET;

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{self, ExprRef};
use crate::rng::{domain, CounterRng};
use crate::sde::GridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum WienerError {
    #[error("functionals live on different grids")]
    LayoutMismatch,
    #[error("expected {expected} family members, got {got}")]
    FamilySize { expected: usize, got: usize },
    #[error("increment ({step}, {component}) outside grid with {n_steps} steps, {m} components")]
    IncrementOutOfRange {
        step: usize,
        component: usize,
        n_steps: usize,
        m: usize,
    },
    #[error("non-polynomial node reached by the exact expectation route")]
    NonPolynomial,
    #[error("polynomial degree {degree} exceeds the oracle budget {budget}")]
    DegreeBudgetExceeded { degree: u64, budget: u64 },
    #[error("{nonfinite} of {samples} Monte Carlo evaluations were nonfinite (> 0.1% aborts)")]
    TooManyNonfinite { nonfinite: usize, samples: usize },
    #[error("invalid split: fraction must lie strictly between 0 and 1")]
    InvalidSplit,
}

/// One Gaussian increment symbol: step index and noise component (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Increment {
    pub step: usize,
    pub component: usize,
}

/// Expression over increment symbols.
pub type FunctionalExpr = ExprRef<Increment>;

/// Step variances dt_1..dt_N and the noise multiplicity m.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    dts: Vec<f64>,
    m: usize,
}

impl GridLayout {
    pub fn new(dts: Vec<f64>, m: usize) -> Self {
        assert!(!dts.is_empty() && dts.iter().all(|&d| d > 0.0));
        assert!(m >= 1);
        GridLayout { dts, m }
    }

    pub fn from_spec(spec: &GridSpec, m: usize) -> Self {
        GridLayout::new((0..spec.n_steps()).map(|k| spec.dt(k)).collect(), m)
    }

    pub fn n_steps(&self) -> usize {
        self.dts.len()
    }

    pub fn n_noise(&self) -> usize {
        self.m
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.dts[k]
    }

    pub fn horizon(&self) -> f64 {
        self.dts.iter().sum()
    }

    /// Flat slot count N*m; evaluation points are slices of this length,
    /// row-major (step, component).
    pub fn n_slots(&self) -> usize {
        self.dts.len() * self.m
    }

    fn slot(&self, inc: &Increment) -> usize {
        inc.step * self.m + inc.component
    }

    /// Gaussian sample of all increments, counter-based on (seed, sample).
    pub fn sample(&self, seed: u64, sample_index: u64) -> Vec<f64> {
        let rng = CounterRng::new(seed)
            .derive(domain::INCREMENTS)
            .derive(sample_index);
        let mut out = Vec::with_capacity(self.n_slots());
        for (k, dt) in self.dts.iter().enumerate() {
            let scale = dt.sqrt();
            for j in 0..self.m {
                out.push(scale * rng.normal(k as u64, j as u64));
            }
        }
        out
    }
}

/// A Wiener functional: graph plus the grid it lives on.
#[derive(Clone, Debug)]
pub struct Functional {
    expr: FunctionalExpr,
    layout: Arc<GridLayout>,
}

impl Functional {
    pub fn new(layout: Arc<GridLayout>, expr: FunctionalExpr) -> Result<Self, WienerError> {
        let mut bad = None;
        expr::for_each_var(&expr, &mut |inc: &Increment| {
            if (inc.step >= layout.n_steps() || inc.component >= layout.m) && bad.is_none() {
                bad = Some(*inc);
            }
        });
        if let Some(inc) = bad {
            return Err(WienerError::IncrementOutOfRange {
                step: inc.step,
                component: inc.component,
                n_steps: layout.n_steps(),
                m: layout.m,
            });
        }
        Ok(Functional { expr, layout })
    }

    pub fn constant(layout: Arc<GridLayout>, c: f64) -> Self {
        Functional {
            expr: expr::constant(c),
            layout,
        }
    }

    /// The coordinate functional dw_{k,j}.
    pub fn increment(layout: Arc<GridLayout>, step: usize, component: usize) -> Self {
        Functional::new(layout, expr::var(Increment { step, component })).unwrap()
    }

    pub fn expr(&self) -> &FunctionalExpr {
        &self.expr
    }

    pub fn layout(&self) -> &Arc<GridLayout> {
        &self.layout
    }

    /// Discrete Malliavin derivative d/d(dw_{k,j}); closed under repetition.
    pub fn partial(&self, step: usize, component: usize) -> Functional {
        Functional {
            expr: expr::diff(&self.expr, &Increment { step, component }),
            layout: self.layout.clone(),
        }
    }

    /// Total polynomial degree, or None for transcendental graphs. Routes
    /// expectation queries between the exact oracle and Monte Carlo.
    pub fn polynomial_degree(&self) -> Option<u64> {
        expr::polynomial_degree(&self.expr)
    }

    /// Evaluates at a flat increment vector (row-major (step, component)).
    pub fn eval(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.layout.n_slots());
        expr::eval_dag(&self.expr, &|inc: &Increment| w[self.layout.slot(inc)])
    }

    fn same_layout(&self, other: &Functional) -> Result<(), WienerError> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(WienerError::LayoutMismatch)
        }
    }
}

/// An integrand family {F_{k,j}}: one functional per (step, component) slot.
#[derive(Clone, Debug)]
pub struct Integrand {
    layout: Arc<GridLayout>,
    /// Row-major (step, component), length N*m.
    terms: Vec<FunctionalExpr>,
}

impl Integrand {
    pub fn new(layout: Arc<GridLayout>, terms: Vec<Functional>) -> Result<Self, WienerError> {
        if terms.len() != layout.n_slots() {
            return Err(WienerError::FamilySize {
                expected: layout.n_slots(),
                got: terms.len(),
            });
        }
        for t in &terms {
            if *t.layout != *layout {
                return Err(WienerError::LayoutMismatch);
            }
        }
        Ok(Integrand {
            layout,
            terms: terms.into_iter().map(|t| t.expr).collect(),
        })
    }

    /// Same functional in every slot.
    pub fn uniform(f: &Functional) -> Self {
        Integrand {
            layout: f.layout.clone(),
            terms: vec![f.expr.clone(); f.layout.n_slots()],
        }
    }

    /// All slots one.
    pub fn ones(layout: Arc<GridLayout>) -> Self {
        Integrand {
            layout: layout.clone(),
            terms: vec![expr::constant(1.0); layout.n_slots()],
        }
    }

    pub fn layout(&self) -> &Arc<GridLayout> {
        &self.layout
    }

    pub fn term(&self, step: usize, component: usize) -> Functional {
        Functional {
            expr: self.terms[step * self.layout.m + component].clone(),
            layout: self.layout.clone(),
        }
    }

    /// Slotwise Malliavin derivative d_{k,j} F_{l,i}.
    pub fn partial(&self, step: usize, component: usize) -> Integrand {
        let v = Increment { step, component };
        Integrand {
            layout: self.layout.clone(),
            terms: self.terms.iter().map(|t| expr::diff(t, &v)).collect(),
        }
    }
}

/// Skorokhod integral: sum_{k,j} F_{k,j} dw_{k,j} - sum_{k,j} d_{k,j} F_{k,j} dt_k.
/// On adapted integrands the correction vanishes node by node and the graph
/// is exactly the Ito sum.
pub fn skorokhod(f: &Integrand) -> Functional {
    let layout = &f.layout;
    let mut parts = Vec::with_capacity(2 * layout.n_slots());
    for k in 0..layout.n_steps() {
        for j in 0..layout.m {
            let inc = Increment {
                step: k,
                component: j,
            };
            let term = &f.terms[layout.slot(&inc)];
            parts.push(expr::mul([term.clone(), expr::var(inc)]));
            parts.push(expr::mul([
                expr::constant(-layout.dt(k)),
                expr::diff(term, &inc),
            ]));
        }
    }
    Functional {
        expr: expr::add(parts),
        layout: layout.clone(),
    }
}

/// Exact expectation of a polynomial functional via the moment oracle.
pub fn wick_expectation(f: &Functional) -> Result<f64, WienerError> {
    let poly = wick::expand(&f.expr)?;
    Ok(wick::wick_of_poly(&poly, &f.layout))
}

/// Monte Carlo estimate with standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub nonfinite: usize,
}

/// Sample-mean expectation under the grid's Gaussian law. Nonfinite
/// evaluations are counted; more than 0.1% aborts.
pub fn mc_expectation(f: &Functional, samples: usize, seed: u64) -> Result<McEstimate, WienerError> {
    assert!(samples >= 2);
    let layout = f.layout.clone();
    let values: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let w = layout.sample(seed, s);
            f.eval(&w)
        })
        .collect();
    let nonfinite = values.iter().filter(|v| !v.is_finite()).count();
    if nonfinite * 1000 > samples {
        return Err(WienerError::TooManyNonfinite { nonfinite, samples });
    }
    let finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        samples: finite.len(),
        nonfinite,
    })
}

/// lhs - rhs of the duality identity E<DG, F> = E[G * skorokhod(F)],
/// as a single functional (so one expectation query measures the residual).
fn ibp_residual_functional(g: &Functional, f: &Integrand) -> Result<Functional, WienerError> {
    if *g.layout != *f.layout {
        return Err(WienerError::LayoutMismatch);
    }
    let layout = &g.layout;
    let mut lhs_terms = Vec::with_capacity(layout.n_slots());
    for k in 0..layout.n_steps() {
        for j in 0..layout.m {
            let inc = Increment {
                step: k,
                component: j,
            };
            lhs_terms.push(expr::mul([
                expr::constant(layout.dt(k)),
                expr::diff(&g.expr, &inc),
                f.terms[layout.slot(&inc)].clone(),
            ]));
        }
    }
    let rhs = expr::mul([g.expr.clone(), skorokhod(f).expr]);
    Ok(Functional {
        expr: expr::sub(expr::add(lhs_terms), rhs),
        layout: layout.clone(),
    })
}

/// Integration-by-parts residual via the exact oracle; zero (to rounding)
/// on every square-integrable polynomial pair.
pub fn ibp_residual_exact(g: &Functional, f: &Integrand) -> Result<f64, WienerError> {
    wick_expectation(&ibp_residual_functional(g, f)?)
}

/// Monte Carlo integration-by-parts residual, for transcendental pairs.
pub fn ibp_residual_mc(
    g: &Functional,
    f: &Integrand,
    samples: usize,
    seed: u64,
) -> Result<McEstimate, WienerError> {
    mc_expectation(&ibp_residual_functional(g, f)?, samples, seed)
}

/// Both sides of the extended Ito isometry.
#[derive(Clone, Copy, Debug)]
pub struct IsometryCheck {
    /// E[skorokhod(F)^2].
    pub lhs: f64,
    /// E[sum F^2 dt] + E[sum d_k F_l d_l F_k dt_k dt_l] (the proof-form
    /// cross term with indices swapped).
    pub rhs: f64,
    /// Same with the index-symmetric cross term (d_k F_l)^2; differs from
    /// `rhs` for non-symmetric integrands and does NOT match `lhs`.
    pub rhs_symmetrised: f64,
    /// Upper bound E[sum F^2 dt] + E[sum |d_k F_l|^2 dt dt]; the inequality
    /// form satisfies `bound >= lhs`.
    pub bound: f64,
    pub residual: f64,
}

/// Extended isometry via the exact oracle.
pub fn check_isometry_exact(f: &Integrand) -> Result<IsometryCheck, WienerError> {
    let layout = &f.layout;
    let lhs = wick_expectation(&Functional {
        expr: expr::powi(skorokhod(f).expr, 2),
        layout: layout.clone(),
    })?;

    let mut base_terms = Vec::new();
    let mut cross_proof = Vec::new();
    let mut cross_sym = Vec::new();
    let slots: Vec<Increment> = (0..layout.n_steps())
        .flat_map(|k| {
            (0..layout.m).map(move |j| Increment {
                step: k,
                component: j,
            })
        })
        .collect();
    for a in &slots {
        base_terms.push(expr::mul([
            expr::constant(layout.dt(a.step)),
            expr::powi(f.terms[layout.slot(a)].clone(), 2),
        ]));
        for b in &slots {
            let dadb = expr::constant(layout.dt(a.step) * layout.dt(b.step));
            let da_fb = expr::diff(&f.terms[layout.slot(b)], a);
            let db_fa = expr::diff(&f.terms[layout.slot(a)], b);
            cross_proof.push(expr::mul([dadb.clone(), da_fb.clone(), db_fa]));
            cross_sym.push(expr::mul([dadb, expr::powi(da_fb, 2)]));
        }
    }
    let base = wick_expectation(&Functional {
        expr: expr::add(base_terms),
        layout: layout.clone(),
    })?;
    let cross = wick_expectation(&Functional {
        expr: expr::add(cross_proof),
        layout: layout.clone(),
    })?;
    let cross_sym = wick_expectation(&Functional {
        expr: expr::add(cross_sym),
        layout: layout.clone(),
    })?;

    Ok(IsometryCheck {
        lhs,
        rhs: base + cross,
        rhs_symmetrised: base + cross_sym,
        bound: base + cross_sym,
        residual: lhs - (base + cross),
    })
}

/// Mesh refinement: splits step `k` into fractions (a, 1-a) of dt_k and
/// substitutes dw_k -> dw_k^- + dw_k^+ throughout the graph. The Malliavin
/// derivative commutes with this identification.
pub fn refine(f: &Functional, split_index: usize, fraction: f64) -> Result<Functional, WienerError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(WienerError::InvalidSplit);
    }
    let old = &f.layout;
    if split_index >= old.n_steps() {
        return Err(WienerError::IncrementOutOfRange {
            step: split_index,
            component: 0,
            n_steps: old.n_steps(),
            m: old.m,
        });
    }
    let mut dts = Vec::with_capacity(old.n_steps() + 1);
    for (k, &dt) in old.dts.iter().enumerate() {
        if k == split_index {
            dts.push(fraction * dt);
            dts.push((1.0 - fraction) * dt);
        } else {
            dts.push(dt);
        }
    }
    let layout = Arc::new(GridLayout::new(dts, old.m));
    let expr = expr::substitute(&f.expr, &|inc: &Increment| {
        use std::cmp::Ordering::*;
        match inc.step.cmp(&split_index) {
            Less => expr::var(*inc),
            Equal => expr::add([
                expr::var(Increment {
                    step: split_index,
                    component: inc.component,
                }),
                expr::var(Increment {
                    step: split_index + 1,
                    component: inc.component,
                }),
            ]),
            Greater => expr::var(Increment {
                step: inc.step + 1,
                component: inc.component,
            }),
        }
    });
    Ok(Functional { expr, layout })
}

/// Refines every member of a family; the slot at `split_index` doubles (the
/// piecewise-constant integrand keeps its value on both halves).
pub fn refine_integrand(
    f: &Integrand,
    split_index: usize,
    fraction: f64,
) -> Result<Integrand, WienerError> {
    let mut terms = Vec::new();
    let mut layout = None;
    for k in 0..f.layout.n_steps() {
        let block: Vec<Functional> = (0..f.layout.m)
            .map(|j| refine(&f.term(k, j), split_index, fraction))
            .collect::<Result<_, _>>()?;
        layout = Some(block[0].layout.clone());
        if k == split_index {
            terms.extend(block.iter().cloned());
        }
        terms.extend(block);
    }
    Integrand::new(layout.unwrap(), terms)
}

/// Max |d_k skorokhod(F) - (F_k + skorokhod(d_k F))| over `points` random
/// increment draws; the two graphs agree identically.
pub fn dint_identity_residual(
    f: &Integrand,
    step: usize,
    component: usize,
    points: usize,
    seed: u64,
) -> f64 {
    let lhs = skorokhod(f).partial(step, component);
    let rhs_int = skorokhod(&f.partial(step, component));
    let rhs = expr::add([
        f.terms[f.layout.slot(&Increment { step, component })].clone(),
        rhs_int.expr,
    ]);
    let rhs = Functional {
        expr: rhs,
        layout: f.layout.clone(),
    };
    let mut worst = 0.0f64;
    for s in 0..points as u64 {
        let w = f.layout.sample(seed, s);
        worst = worst.max((lhs.eval(&w) - rhs.eval(&w)).abs());
    }
    worst
}

/// Samplable discrete Malliavin covariance of a vector functional:
/// M_ij(w) = sum_{k,c} d_{k,c} X_i d_{k,c} X_j dt_k, symmetric PSD.
pub struct MalliavinMatrix {
    layout: Arc<GridLayout>,
    /// partials[i][slot]
    partials: Vec<Vec<FunctionalExpr>>,
}

impl MalliavinMatrix {
    pub fn new(components: &[Functional]) -> Result<Self, WienerError> {
        assert!(!components.is_empty());
        let layout = components[0].layout.clone();
        for c in components {
            c.same_layout(&components[0])?;
        }
        let partials = components
            .iter()
            .map(|c| {
                (0..layout.n_steps())
                    .flat_map(|k| {
                        (0..layout.m).map(|j| {
                            expr::diff(
                                &c.expr,
                                &Increment {
                                    step: k,
                                    component: j,
                                },
                            )
                        })
                        .collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        Ok(MalliavinMatrix { layout, partials })
    }

    pub fn dim(&self) -> usize {
        self.partials.len()
    }

    pub fn layout(&self) -> &Arc<GridLayout> {
        &self.layout
    }

    /// Evaluates the matrix at one increment draw.
    pub fn eval(&self, w: &[f64]) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let lookup = |inc: &Increment| w[self.layout.slot(inc)];
        let grads: Vec<Vec<f64>> = self
            .partials
            .iter()
            .map(|row| row.iter().map(|p| expr::eval_dag(p, &lookup)).collect())
            .collect();
        let mut out = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..self.layout.n_steps() {
                    let dt = self.layout.dt(k);
                    for c in 0..self.layout.m {
                        let s = k * self.layout.m + c;
                        acc += grads[i][s] * grads[j][s] * dt;
                    }
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }
}
