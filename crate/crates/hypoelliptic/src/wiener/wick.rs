//! Exact Gaussian moment oracle for polynomial functionals.
//!
//! Expands the computational graph into monomials over the increments and
//! applies the independent-Gaussian moment rule E[dw^(2p)] = (2p-1)!! dt^p,
//! E[dw^odd] = 0. Everything is exact modulo f64 rounding, which is what
//! makes zero-tolerance identity tests possible.

use std::collections::HashMap;
use std::sync::Arc;

use crate::expr::Expr;

use super::{FunctionalExpr, GridLayout, Increment, WienerError};

/// Sorted exponent list; the canonical monomial key.
type Monomial = Vec<(Increment, u32)>;

/// Sparse multivariate polynomial over increments.
#[derive(Clone, Debug, Default)]
pub(super) struct Poly {
    terms: HashMap<Monomial, f64>,
}

/// Total-degree budget for expansion. Beyond this the monomial count (and
/// the equivalent pairing enumeration) stops being desk-scale.
pub const DEGREE_BUDGET: u64 = 12;

impl Poly {
    fn constant(c: f64) -> Poly {
        let mut terms = HashMap::new();
        if c != 0.0 {
            terms.insert(Vec::new(), c);
        }
        Poly { terms }
    }

    fn variable(v: Increment) -> Poly {
        let mut terms = HashMap::new();
        terms.insert(vec![(v, 1)], 1.0);
        Poly { terms }
    }

    fn degree(&self) -> u64 {
        self.terms
            .keys()
            .map(|m| m.iter().map(|(_, p)| *p as u64).sum())
            .max()
            .unwrap_or(0)
    }

    fn add_assign(&mut self, other: &Poly) {
        for (m, c) in &other.terms {
            let e = self.terms.entry(m.clone()).or_insert(0.0);
            *e += c;
            if *e == 0.0 {
                self.terms.remove(m);
            }
        }
    }

    fn mul(&self, other: &Poly) -> Result<Poly, WienerError> {
        let mut out: HashMap<Monomial, f64> = HashMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let mono = merge_monomials(ma, mb);
                let deg: u64 = mono.iter().map(|(_, p)| *p as u64).sum();
                if deg > DEGREE_BUDGET {
                    return Err(WienerError::DegreeBudgetExceeded {
                        degree: deg,
                        budget: DEGREE_BUDGET,
                    });
                }
                let e = out.entry(mono).or_insert(0.0);
                *e += ca * cb;
                if *e == 0.0 {
                    out.remove(&merge_monomials(ma, mb));
                }
            }
        }
        Ok(Poly { terms: out })
    }

    fn powi(&self, n: u32) -> Result<Poly, WienerError> {
        let mut out = Poly::constant(1.0);
        for _ in 0..n {
            out = out.mul(self)?;
        }
        Ok(out)
    }
}

fn merge_monomials(a: &Monomial, b: &Monomial) -> Monomial {
    let mut out: Monomial = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push((a[i].0, a[i].1 + b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Expands a graph into a polynomial; shared subgraphs expand once.
pub(super) fn expand(e: &FunctionalExpr) -> Result<Poly, WienerError> {
    let mut cache: HashMap<usize, Poly> = HashMap::new();
    expand_inner(e, &mut cache)
}

fn expand_inner(
    e: &FunctionalExpr,
    cache: &mut HashMap<usize, Poly>,
) -> Result<Poly, WienerError> {
    let key = Arc::as_ptr(e) as usize;
    if let Some(p) = cache.get(&key) {
        return Ok(p.clone());
    }
    let poly = match &**e {
        Expr::Const(c) => Poly::constant(c.0),
        Expr::Var(v) => Poly::variable(*v),
        Expr::Sum(ts) => {
            let mut acc = Poly::default();
            for t in ts {
                acc.add_assign(&expand_inner(t, cache)?);
            }
            acc
        }
        Expr::Prod(fs) => {
            let mut acc = Poly::constant(1.0);
            for f in fs {
                acc = acc.mul(&expand_inner(f, cache)?)?;
            }
            acc
        }
        Expr::Pow(b, n) => expand_inner(b, cache)?.powi(*n)?,
        Expr::Sin(_) | Expr::Cos(_) | Expr::Exp(_) => return Err(WienerError::NonPolynomial),
    };
    if poly.degree() > DEGREE_BUDGET {
        return Err(WienerError::DegreeBudgetExceeded {
            degree: poly.degree(),
            budget: DEGREE_BUDGET,
        });
    }
    cache.insert(key, poly.clone());
    Ok(poly)
}

fn double_factorial(n: u32) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// Exact expectation of a polynomial functional under independent centred
/// Gaussians with variances dt. Summation order is canonical so repeated
/// runs are bit-identical.
pub(super) fn wick_of_poly(poly: &Poly, layout: &GridLayout) -> f64 {
    let mut contributions: Vec<(Monomial, f64)> = Vec::new();
    for (mono, coeff) in &poly.terms {
        let mut value = *coeff;
        let mut odd = false;
        for (inc, p) in mono {
            if p % 2 == 1 {
                odd = true;
                break;
            }
            value *= double_factorial(p - 1) * layout.dt(inc.step).powi((p / 2) as i32);
        }
        if !odd {
            contributions.push((mono.clone(), value));
        }
    }
    contributions.sort_by(|a, b| a.0.cmp(&b.0));
    contributions.iter().map(|(_, v)| v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr;

    fn w(step: usize) -> FunctionalExpr {
        expr::var(Increment { step, component: 0 })
    }

    #[test]
    fn moment_rule_matches_double_factorials() {
        let layout = GridLayout::new(vec![0.3, 0.5], 1);
        // E[w0^4] = 3 dt^2; E[w0] = 0; E[w0^2 w1^2] = dt0 dt1.
        let p4 = expand(&expr::powi(w(0), 4)).unwrap();
        assert_eq!(wick_of_poly(&p4, &layout), 3.0 * 0.3f64.powi(2));
        let p1 = expand(&w(0)).unwrap();
        assert_eq!(wick_of_poly(&p1, &layout), 0.0);
        let cross = expand(&expr::mul([
            expr::powi(w(0), 2),
            expr::powi(w(1), 2),
        ]))
        .unwrap();
        assert_eq!(wick_of_poly(&cross, &layout), 0.3 * 0.5);
    }

    #[test]
    fn degree_budget_enforced() {
        let e = expr::powi(w(0), 13);
        assert!(matches!(
            expand(&e),
            Err(WienerError::DegreeBudgetExceeded { degree: 13, .. })
        ));
    }

    #[test]
    fn transcendental_nodes_are_rejected() {
        let e = expr::sin(w(0));
        assert!(matches!(expand(&e), Err(WienerError::NonPolynomial)));
    }
}
