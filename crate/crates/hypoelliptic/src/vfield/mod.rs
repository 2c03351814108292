//! Symbolic vector fields on R^n, exact Lie brackets, and the pointwise
//! parabolic bracket-condition checker.
//!
//! A vector field is a vector of expression trees over the coordinates
//! x_1..x_n. Brackets are computed by exact symbolic differentiation and
//! returned in canonical form, so structurally identical fields deduplicate
//! when the bracket family is generated.
//!
//! The bracket condition itself quantifies over every point of R^n; no
//! finite procedure decides that, so the checker reports pointwise results
//! at user-supplied points and never answers "false", only "satisfied at
//! level k" or "undetermined up to the level cap".

pub mod parse;

pub use parse::{parse_scalar, parse_vector_field, ParseError};

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{self, ExprRef};

/// Scalar expression over 0-based coordinate indices.
pub type ScalarField = ExprRef<usize>;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("component {component} references x{var} but the field lives on R^{dim}")]
    VariableOutOfRange {
        component: usize,
        var: usize,
        dim: usize,
    },
    #[error("bracket family exceeded the generation cap of {cap} fields")]
    GenerationCapExceeded { cap: usize },
    #[error("level {level} exceeds the family depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
}

/// A smooth vector field on R^n given by n expression-tree components,
/// with an optional provenance label (the bracket word that produced it).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VectorField {
    components: Vec<ScalarField>,
    label: Option<String>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self, FieldError> {
        let dim = components.len();
        for (i, c) in components.iter().enumerate() {
            let mut bad = None;
            expr::for_each_var(c, &mut |v: &usize| {
                if *v >= dim && bad.is_none() {
                    bad = Some(*v);
                }
            });
            if let Some(var) = bad {
                return Err(FieldError::VariableOutOfRange {
                    component: i,
                    var,
                    dim,
                });
            }
        }
        Ok(VectorField {
            components,
            label: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Constant field with the given value vector.
    pub fn constant(values: &[f64]) -> Self {
        VectorField {
            components: values.iter().map(|&v| expr::constant(v)).collect(),
            label: None,
        }
    }

    /// The zero field on R^n.
    pub fn zero(dim: usize) -> Self {
        Self::constant(&vec![0.0; dim])
    }

    /// Coordinate field e_i (0-based) on R^n.
    pub fn axis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self::constant(&v)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|c| expr::is_zero(c))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        if x.len() != self.dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| expr::eval(c, &|i: &usize| x[*i]))
            .collect())
    }

    /// Symbolic Jacobian: entry (i, j) is the expression for d(component i)/dx_j.
    pub fn jacobian_exprs(&self) -> Vec<Vec<ScalarField>> {
        let n = self.dim();
        self.components
            .iter()
            .map(|c| (0..n).map(|j| expr::diff(c, &j)).collect())
            .collect()
    }

    /// Derivative matrix (DU)_{ij} = d_j U_i by exact differentiation, then
    /// evaluation at `x`.
    pub fn jacobian_at(&self, x: &[f64]) -> Result<DMatrix<f64>, FieldError> {
        if x.len() != self.dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (i, c) in self.components.iter().enumerate() {
            for j in 0..n {
                out[(i, j)] = expr::eval(&expr::diff(c, &j), &|v: &usize| x[*v]);
            }
        }
        Ok(out)
    }

    /// Scaled sum a*self + b*other, canonicalised componentwise.
    pub fn linear_combination(&self, a: f64, other: &VectorField, b: f64) -> Result<Self, FieldError> {
        if self.dim() != other.dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(u, v)| {
                expr::add([
                    expr::mul([expr::constant(a), u.clone()]),
                    expr::mul([expr::constant(b), v.clone()]),
                ])
            })
            .collect();
        Ok(VectorField {
            components,
            label: None,
        })
    }

    /// First-order operator A_U f = <U, grad f> applied symbolically.
    pub fn apply_to(&self, f: &ScalarField) -> ScalarField {
        expr::add(
            self.components
                .iter()
                .enumerate()
                .map(|(j, u_j)| expr::mul([u_j.clone(), expr::diff(f, &j)])),
        )
    }

    /// Canonical structural key, ignoring the provenance label.
    fn key(&self) -> Vec<ScalarField> {
        self.components.clone()
    }
}

impl fmt::Display for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rendered: Vec<String> = self
            .components
            .iter()
            .map(|c| expr::format_expr(c, &|i: &usize| format!("x{}", i + 1)))
            .collect();
        write!(f, "({})", rendered.join(" ; "))
    }
}

/// Lie bracket [U, V] = DV·U - DU·V, computed symbolically and canonicalised.
/// The provenance label records the bracket word.
pub fn lie_bracket(u: &VectorField, v: &VectorField) -> Result<VectorField, FieldError> {
    if u.dim() != v.dim() {
        return Err(FieldError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let n = u.dim();
    let components: Vec<ScalarField> = (0..n)
        .map(|i| {
            let dv_u = expr::add((0..n).map(|j| {
                expr::mul([expr::diff(&v.components[i], &j), u.components[j].clone()])
            }));
            let du_v = expr::add((0..n).map(|j| {
                expr::mul([expr::diff(&u.components[i], &j), v.components[j].clone()])
            }));
            expr::sub(dv_u, du_v)
        })
        .collect();
    let label = format!(
        "[{},{}]",
        u.label().unwrap_or("?"),
        v.label().unwrap_or("?")
    );
    Ok(VectorField { components, label: None }.with_label(label))
}

/// Default cap on the total number of fields a bracket family may hold; the
/// recursion is exponential and has no natural truncation.
pub const DEFAULT_GENERATION_CAP: usize = 512;

/// Default relative singular-value cutoff for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Absolute singular-value floor. Evaluating a symbolic zero like cos(x) at
/// x = pi/2 leaves an O(1e-16) residue; without a floor the relative rule
/// would report phantom rank for a matrix whose only content is that residue.
pub const RANK_ABS_FLOOR: f64 = 1e-12;

/// Bracket generations V_0 subset V_1 subset ... built from a drift and
/// diffusion fields. Level 0 holds the diffusion fields only; each later
/// level adds brackets of the previous level with every field, drift
/// included. Structurally identical fields are stored once.
#[derive(Clone, Debug)]
pub struct BracketFamily {
    /// New fields first appearing at each level.
    new_at_level: Vec<Vec<VectorField>>,
    dim: usize,
    n_noise: usize,
}

impl BracketFamily {
    /// Builds generations up to `k_max` with the default cap.
    pub fn build(
        drift: &VectorField,
        diffusions: &[VectorField],
        k_max: usize,
    ) -> Result<Self, FieldError> {
        Self::build_capped(drift, diffusions, k_max, DEFAULT_GENERATION_CAP)
    }

    pub fn build_capped(
        drift: &VectorField,
        diffusions: &[VectorField],
        k_max: usize,
        cap: usize,
    ) -> Result<Self, FieldError> {
        let dim = drift.dim();
        for v in diffusions {
            if v.dim() != dim {
                return Err(FieldError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
        }
        let drift = drift.clone().with_label("V0");
        let diffusions: Vec<VectorField> = diffusions
            .iter()
            .enumerate()
            .map(|(i, v)| v.clone().with_label(format!("V{}", i + 1)))
            .collect();

        let mut seen: HashSet<Vec<ScalarField>> = HashSet::new();
        let mut new_at_level: Vec<Vec<VectorField>> = Vec::new();
        let mut total = 0usize;

        // Level 0: the diffusion fields, drift excluded.
        let mut level0 = Vec::new();
        for v in &diffusions {
            if seen.insert(v.key()) {
                level0.push(v.clone());
                total += 1;
            }
        }
        if total > cap {
            return Err(FieldError::GenerationCapExceeded { cap });
        }
        new_at_level.push(level0);

        // All bracket partners: drift and every diffusion field.
        let partners: Vec<&VectorField> =
            std::iter::once(&drift).chain(diffusions.iter()).collect();

        for level in 1..=k_max {
            let mut fresh = Vec::new();
            // Brackets of older fields with partners were already formed, so
            // only the previous level's new fields generate candidates.
            for u in &new_at_level[level - 1] {
                for v in &partners {
                    let b = lie_bracket(u, v)?;
                    if seen.insert(b.key()) {
                        total += 1;
                        if total > cap {
                            return Err(FieldError::GenerationCapExceeded { cap });
                        }
                        fresh.push(b);
                    }
                }
            }
            new_at_level.push(fresh);
        }

        Ok(BracketFamily {
            new_at_level,
            dim,
            n_noise: diffusions.len(),
        })
    }

    pub fn depth(&self) -> usize {
        self.new_at_level.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    /// Fields newly introduced at exactly `level`.
    pub fn new_fields_at(&self, level: usize) -> &[VectorField] {
        &self.new_at_level[level]
    }

    /// All fields of generation `level` (cumulative union).
    pub fn fields_up_to(&self, level: usize) -> impl Iterator<Item = &VectorField> {
        self.new_at_level[..=level].iter().flatten()
    }

    /// Numerical dimension of span{V(x) : V in generation `level`}: the count
    /// of singular values above `tol` times the largest one.
    pub fn spanned_dimension(
        &self,
        level: usize,
        x: &[f64],
        tol: f64,
    ) -> Result<usize, FieldError> {
        if level > self.depth() {
            return Err(FieldError::LevelOutOfRange {
                level,
                depth: self.depth(),
            });
        }
        let cols: Vec<Vec<f64>> = self
            .fields_up_to(level)
            .map(|v| v.eval(x))
            .collect::<Result<_, _>>()?;
        if cols.is_empty() {
            return Ok(0);
        }
        let mat = DMatrix::from_fn(self.dim, cols.len(), |i, j| cols[j][i]);
        Ok(numerical_rank(&mat, tol))
    }
}

/// Rank by SVD: singular values above `tol` times the largest one count,
/// subject to the absolute floor. The zero matrix has rank 0.
pub fn numerical_rank(mat: &DMatrix<f64>, tol: f64) -> usize {
    let svals = mat.clone().svd(false, false).singular_values;
    let max = svals.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = (tol * max).max(RANK_ABS_FLOOR);
    svals.iter().filter(|&&s| s > cutoff).count()
}

/// Outcome of the pointwise bracket-condition check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HormanderStatus {
    /// Smallest level whose generation spans R^n at the point.
    SatisfiedAt { level: usize },
    /// No generation up to the cap spans; records the best dimension seen.
    /// Never "false": the condition is a union over all levels.
    Undetermined { max_level: usize, spanned: usize },
}

impl BracketFamily {
    /// Smallest level whose generation spans R^n at `x`, within the family
    /// depth; also reports the best spanned dimension seen.
    pub fn pointwise_level(&self, x: &[f64], tol: f64) -> Result<HormanderStatus, FieldError> {
        let mut best = 0;
        for level in 0..=self.depth() {
            let d = self.spanned_dimension(level, x, tol)?;
            best = best.max(d);
            if d == self.dim {
                return Ok(HormanderStatus::SatisfiedAt { level });
            }
        }
        Ok(HormanderStatus::Undetermined {
            max_level: self.depth(),
            spanned: best,
        })
    }
}

/// Checks the parabolic bracket condition at a single point, with
/// generations built up to `k_max`.
pub fn check_parabolic_hormander(
    drift: &VectorField,
    diffusions: &[VectorField],
    x: &[f64],
    k_max: usize,
    tol: f64,
) -> Result<HormanderStatus, FieldError> {
    BracketFamily::build(drift, diffusions, k_max)?.pointwise_level(x, tol)
}

/// Smallest level that spans at *every* supplied test point. This is the
/// honest finite surrogate for the condition's "for every x": a level-0
/// span can hold at generic points yet fail at special ones (the 1-d
/// trigonometric system spans at x = 0 but needs its bracket at x = pi/2).
pub fn uniform_hormander_level(
    drift: &VectorField,
    diffusions: &[VectorField],
    points: &[Vec<f64>],
    k_max: usize,
    tol: f64,
) -> Result<HormanderStatus, FieldError> {
    let family = BracketFamily::build(drift, diffusions, k_max)?;
    let n = family.dim();
    let mut worst_spanned = n;
    for level in 0..=k_max {
        let mut all = true;
        for x in points {
            let d = family.spanned_dimension(level, x, tol)?;
            if level == k_max {
                worst_spanned = worst_spanned.min(d);
            }
            if d < n {
                all = false;
                if level < k_max {
                    break;
                }
            }
        }
        if all {
            return Ok(HormanderStatus::SatisfiedAt { level });
        }
    }
    Ok(HormanderStatus::Undetermined {
        max_level: k_max,
        spanned: worst_spanned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{constant, cos, mul, powi, sin, var};
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;

    fn field(components: Vec<ScalarField>) -> VectorField {
        VectorField::new(components).unwrap()
    }

    /// Rotation field (x2, -x1).
    fn rotation() -> VectorField {
        field(vec![var(1), mul([constant(-1.0), var(0)])])
    }

    /// Finite-difference Jacobian oracle.
    fn fd_jacobian(v: &VectorField, x: &[f64], h: f64) -> DMatrix<f64> {
        let n = v.dim();
        DMatrix::from_fn(n, n, |i, j| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[j] += h;
            dn[j] -= h;
            (v.eval(&up).unwrap()[i] - v.eval(&dn).unwrap()[i]) / (2.0 * h)
        })
    }

    /// Finite-difference bracket oracle: DV·U - DU·V with numerical DV, DU.
    fn fd_bracket(u: &VectorField, v: &VectorField, x: &[f64]) -> Vec<f64> {
        let du = fd_jacobian(u, x, 1e-5);
        let dv = fd_jacobian(v, x, 1e-5);
        let ux = nalgebra::DVector::from_vec(u.eval(x).unwrap());
        let vx = nalgebra::DVector::from_vec(v.eval(x).unwrap());
        (&dv * &ux - &du * &vx).iter().cloned().collect()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(rotation().eval(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
        let cos_field = field(vec![cos(var(0))]);
        assert_eq!(cos_field.eval(&[0.0]).unwrap(), vec![1.0]);
        let msin = field(vec![mul([constant(-1.0), sin(var(0))])]);
        assert_relative_eq!(
            msin.eval(&[std::f64::consts::FRAC_PI_2]).unwrap()[0],
            -1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        assert_eq!(
            rotation().eval(&[1.0]).unwrap_err(),
            FieldError::DimensionMismatch {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn construction_rejects_out_of_range_vars() {
        let err = VectorField::new(vec![var(2), var(0)]).unwrap_err();
        assert_eq!(
            err,
            FieldError::VariableOutOfRange {
                component: 0,
                var: 2,
                dim: 2
            }
        );
    }

    #[test]
    fn jacobian_examples() {
        let j = rotation().jacobian_at(&[3.0, -1.5]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));

        let j = field(vec![cos(var(0))]).jacobian_at(&[0.0]).unwrap();
        assert_eq!(j[(0, 0)], 0.0);

        // (x1 x2, x1^2) at (1, 2): [[2, 1], [2, 0]]; cross-checked against
        // the finite-difference oracle.
        let f = field(vec![mul([var(0), var(1)]), powi(var(0), 2)]);
        let x = [1.0, 2.0];
        let j = f.jacobian_at(&x).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 2.0, 0.0]));
        let fd = fd_jacobian(&f, &x, 1e-6);
        for i in 0..2 {
            for jj in 0..2 {
                assert_relative_eq!(j[(i, jj)], fd[(i, jj)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn bracket_of_field_with_itself_is_zero() {
        let f = field(vec![mul([var(0), var(1)]), sin(var(0))]);
        let b = lie_bracket(&f, &f).unwrap();
        assert!(b.is_zero());
    }

    #[test]
    fn bracket_trig_counterexample_pair() {
        // U = (cos x), V = (-sin x): [U, V] = -cos^2 - sin^2 = -1.
        let u = field(vec![cos(var(0))]);
        let v = field(vec![mul([constant(-1.0), sin(var(0))])]);
        let b = lie_bracket(&u, &v).unwrap();
        let rng = CounterRng::new(11).derive(crate::rng::domain::POINTS);
        for k in 0..10 {
            let x = [3.0 * (rng.uniform(k, 0) - 0.5)];
            let got = b.eval(&x).unwrap()[0];
            assert_relative_eq!(got, -1.0, epsilon = 1e-12);
            assert_relative_eq!(got, fd_bracket(&u, &v, &x)[0], epsilon = 1e-5);
        }
    }

    #[test]
    fn bracket_of_linear_fields_is_commutator() {
        // U = Ax, V = Bx => [U, V] = (BA - AB)x.
        let rng = CounterRng::new(5).derive(crate::rng::domain::POINTS);
        let n = 3;
        let entry = |k: u64, l: u64| 2.0 * rng.uniform(k, l) - 1.0;
        let a = DMatrix::from_fn(n, n, |i, j| entry(0, (i * n + j) as u64));
        let b = DMatrix::from_fn(n, n, |i, j| entry(1, (i * n + j) as u64));
        let linear_field = |m: &DMatrix<f64>| {
            field(
                (0..n)
                    .map(|i| {
                        crate::expr::add(
                            (0..n).map(|j| mul([constant(m[(i, j)]), var(j)])),
                        )
                    })
                    .collect(),
            )
        };
        let u = linear_field(&a);
        let v = linear_field(&b);
        let bracket = lie_bracket(&u, &v).unwrap();
        let comm = &b * &a - &a * &b;
        for k in 10..15 {
            let x: Vec<f64> = (0..n).map(|l| 2.0 * rng.uniform(k, l as u64) - 1.0).collect();
            let got = bracket.eval(&x).unwrap();
            let want = &comm * nalgebra::DVector::from_vec(x.clone());
            for i in 0..n {
                assert_relative_eq!(got[i], want[i], epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn antisymmetry_at_random_points() {
        let u = field(vec![mul([var(0), var(1)]), cos(var(0))]);
        let v = field(vec![sin(var(1)), powi(var(0), 2)]);
        let uv = lie_bracket(&u, &v).unwrap();
        let vu = lie_bracket(&v, &u).unwrap();
        let rng = CounterRng::new(17).derive(crate::rng::domain::POINTS);
        for k in 0..100 {
            let x = [2.0 * rng.uniform(k, 0) - 1.0, 2.0 * rng.uniform(k, 1) - 1.0];
            let a = uv.eval(&x).unwrap();
            let b = vu.eval(&x).unwrap();
            for i in 0..2 {
                assert!((a[i] + b[i]).abs() <= 1e-12, "antisymmetry failed at {x:?}");
            }
        }
    }

    #[test]
    fn operator_commutator_consistency() {
        // (A_U A_V - A_V A_U) f == A_[U,V] f for polynomial f.
        let u = field(vec![mul([var(0), var(1)]), powi(var(0), 2)]);
        let v = field(vec![var(1), mul([constant(2.0), var(0)])]);
        let f: ScalarField = mul([powi(var(0), 2), var(1)]);
        let lhs = crate::expr::sub(u.apply_to(&v.apply_to(&f)), v.apply_to(&u.apply_to(&f)));
        let rhs = lie_bracket(&u, &v).unwrap().apply_to(&f);
        let rng = CounterRng::new(23).derive(crate::rng::domain::POINTS);
        for k in 0..100 {
            let x = [2.0 * rng.uniform(k, 0) - 1.0, 2.0 * rng.uniform(k, 1) - 1.0];
            let l = crate::expr::eval(&lhs, &|i: &usize| x[*i]);
            let r = crate::expr::eval(&rhs, &|i: &usize| x[*i]);
            assert!((l - r).abs() <= 1e-9, "operator consistency failed at {x:?}");
        }
    }

    #[test]
    fn family_elliptic_system() {
        // V_i = e_i: level 0 already spans.
        let n = 3;
        let drift = VectorField::zero(n);
        let diffusions: Vec<_> = (0..n).map(|i| VectorField::axis(n, i)).collect();
        let fam = BracketFamily::build(&drift, &diffusions, 1).unwrap();
        assert_eq!(fam.new_fields_at(0).len(), n);
        assert_eq!(fam.spanned_dimension(0, &[0.3, -0.1, 2.0], 1e-9).unwrap(), n);
        // Brackets of constants all vanish: level 1 adds at most the zero field.
        assert!(fam.new_fields_at(1).iter().all(|f| f.is_zero()));
    }

    #[test]
    fn family_counterexample_system() {
        // V_0 = (-sin x), V_1 = (cos x): level 1 contains the constant -1.
        let drift = field(vec![mul([constant(-1.0), sin(var(0))])]);
        let diff = field(vec![cos(var(0))]);
        let fam = BracketFamily::build(&drift, &[diff], 1).unwrap();
        let rng = CounterRng::new(31).derive(crate::rng::domain::POINTS);
        let minus_one = fam.new_fields_at(1).iter().find(|f| {
            (0..10).all(|k| {
                let x = [4.0 * (rng.uniform(k, 0) - 0.5)];
                (f.eval(&x).unwrap()[0] + 1.0).abs() < 1e-12
            })
        });
        assert!(minus_one.is_some(), "level 1 should contain the constant field -1");
    }

    #[test]
    fn family_langevin_system() {
        // V_0 = (p, -q - p), V_1 = (0, sqrt(2)): [V_1, V_0] = (sqrt2, -sqrt2).
        let s2 = 2.0_f64.sqrt();
        let drift = field(vec![
            var(1),
            crate::expr::sub(mul([constant(-1.0), var(0)]), var(1)),
        ]);
        let diff = VectorField::constant(&[0.0, s2]);
        let fam = BracketFamily::build(&drift, &[diff], 1).unwrap();
        let expect = VectorField::constant(&[s2, -s2]);
        assert!(
            fam.new_fields_at(1)
                .iter()
                .any(|f| f.components() == expect.components()),
            "level 1 should contain (sqrt2, -sqrt2)"
        );
        // Spanned dimensions: level 0 -> 1, level 1 -> 2 at any point.
        assert_eq!(fam.spanned_dimension(0, &[0.7, -0.2], 1e-9).unwrap(), 1);
        assert_eq!(fam.spanned_dimension(1, &[0.7, -0.2], 1e-9).unwrap(), 2);
    }

    #[test]
    fn spanned_dimension_monotone_in_level() {
        let drift = field(vec![
            var(1),
            crate::expr::sub(mul([constant(-1.0), var(0)]), var(1)),
        ]);
        let diff = VectorField::constant(&[0.0, 1.0]);
        let fam = BracketFamily::build(&drift, &[diff], 3).unwrap();
        let x = [0.4, 0.9];
        let dims: Vec<usize> = (0..=3)
            .map(|k| fam.spanned_dimension(k, &x, 1e-9).unwrap())
            .collect();
        for w in dims.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn hormander_statuses() {
        // Elliptic: k* = 0.
        let n = 2;
        let es: Vec<_> = (0..n).map(|i| VectorField::axis(n, i)).collect();
        assert_eq!(
            check_parabolic_hormander(&VectorField::zero(n), &es, &[1.0, 2.0], 2, 1e-9).unwrap(),
            HormanderStatus::SatisfiedAt { level: 0 }
        );

        // Langevin: k* = 1.
        let drift = field(vec![
            var(1),
            crate::expr::sub(mul([constant(-1.0), var(0)]), var(1)),
        ]);
        let diff = VectorField::constant(&[0.0, 2.0_f64.sqrt()]);
        assert_eq!(
            check_parabolic_hormander(&drift, &[diff], &[0.0, 0.0], 3, 1e-9).unwrap(),
            HormanderStatus::SatisfiedAt { level: 1 }
        );

        // Counterexample: level 0 spans at generic points (cos x != 0) but
        // the bracket is needed at x = pi/2; the uniform level over the
        // test-point set is 1.
        let drift = field(vec![mul([constant(-1.0), sin(var(0))])]);
        let diff = field(vec![cos(var(0))]);
        assert_eq!(
            check_parabolic_hormander(&drift, &[diff.clone()], &[0.0], 3, 1e-9).unwrap(),
            HormanderStatus::SatisfiedAt { level: 0 }
        );
        assert_eq!(
            check_parabolic_hormander(
                &drift,
                &[diff.clone()],
                &[std::f64::consts::FRAC_PI_2],
                3,
                1e-9
            )
            .unwrap(),
            HormanderStatus::SatisfiedAt { level: 1 }
        );
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0],
            vec![0.3],
            vec![std::f64::consts::FRAC_PI_2],
            vec![-std::f64::consts::FRAC_PI_2],
        ];
        assert_eq!(
            uniform_hormander_level(&drift, &[diff.clone()], &pts, 3, 1e-9).unwrap(),
            HormanderStatus::SatisfiedAt { level: 1 }
        );

        // Degenerate: V_1 = e_1, V_0 = 0 on R^2; all brackets vanish.
        let status = check_parabolic_hormander(
            &VectorField::zero(2),
            &[VectorField::axis(2, 0)],
            &[0.0, 0.0],
            4,
            1e-9,
        )
        .unwrap();
        assert_eq!(
            status,
            HormanderStatus::Undetermined {
                max_level: 4,
                spanned: 1
            }
        );
    }

    #[test]
    fn generation_cap_is_enforced() {
        // A wildly non-commuting pair overflows a tiny cap.
        let u = field(vec![sin(var(1)), cos(var(0))]);
        let v = field(vec![powi(var(0), 2), mul([var(0), var(1)])]);
        let err = BracketFamily::build_capped(&u, &[v], 6, 8).unwrap_err();
        assert_eq!(err, FieldError::GenerationCapExceeded { cap: 8 });
    }

    #[test]
    fn jacobi_identity_on_random_quadratic_fields() {
        let rng = CounterRng::new(41).derive(crate::rng::domain::POINTS);
        // Random polynomial fields of degree <= 2 on R^2.
        let rand_field = |tag: u64| {
            let coeff = |k: u64, l: u64| 2.0 * rng.uniform(tag * 1000 + k, l) - 1.0;
            field(
                (0..2)
                    .map(|i| {
                        crate::expr::add([
                            constant(coeff(i as u64, 0)),
                            mul([constant(coeff(i as u64, 1)), var(0)]),
                            mul([constant(coeff(i as u64, 2)), var(1)]),
                            mul([constant(coeff(i as u64, 3)), var(0), var(1)]),
                            mul([constant(coeff(i as u64, 4)), powi(var(0), 2)]),
                            mul([constant(coeff(i as u64, 5)), powi(var(1), 2)]),
                        ])
                    })
                    .collect(),
            )
        };
        let (u, v, w) = (rand_field(1), rand_field(2), rand_field(3));
        let t1 = lie_bracket(&u, &lie_bracket(&v, &w).unwrap()).unwrap();
        let t2 = lie_bracket(&v, &lie_bracket(&w, &u).unwrap()).unwrap();
        let t3 = lie_bracket(&w, &lie_bracket(&u, &v).unwrap()).unwrap();
        for k in 0..100 {
            let x = [2.0 * rng.uniform(k, 7) - 1.0, 2.0 * rng.uniform(k, 8) - 1.0];
            for i in 0..2 {
                let s = t1.eval(&x).unwrap()[i] + t2.eval(&x).unwrap()[i] + t3.eval(&x).unwrap()[i];
                assert!(s.abs() <= 1e-9, "Jacobi identity failed at {x:?}: {s}");
            }
        }
    }
}
