//! The polynomial identity corpus and its runner.
//!
//! The built-in corpus enumerates every monomial of total degree <= 4 over
//! the increment variables of a handful of small grids (N <= 3, m <= 2) and
//! checks the duality, isometry, and derivative-of-integral identities on
//! all (G, F) pairs via the exact oracle. User corpora come from description
//! files: one entry per line, `G ; F_1 ; ... ; F_N` in the expression
//! grammar extended with the symbols w1..wN.

use std::sync::Arc;

use crate::expr::{self, ExprRef};
use crate::vfield::parse::parse_components;
use crate::vfield::ParseError;

use super::{
    check_isometry_exact, dint_identity_residual, ibp_residual_exact, ibp_residual_mc,
    mc_expectation, skorokhod, wick_expectation, Functional, GridLayout, Increment, Integrand,
    WienerError,
};

/// One grid configuration of the built-in corpus.
#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub layout: Arc<GridLayout>,
    pub max_degree: u32,
}

/// The default desk-scale corpus: all (N, m) with N <= 3, m <= 2.
pub fn default_corpus_layouts() -> Vec<CorpusConfig> {
    let dts = [0.3, 0.5, 0.2];
    let mut out = Vec::new();
    for m in 1..=2usize {
        for n in 1..=3usize {
            out.push(CorpusConfig {
                layout: Arc::new(GridLayout::new(dts[..n].to_vec(), m)),
                max_degree: 4,
            });
        }
    }
    out
}

/// All monomials of total degree <= `max_degree` over the layout's
/// increments, the constant 1 included, in a fixed deterministic order.
pub fn monomials(layout: &Arc<GridLayout>, max_degree: u32) -> Vec<Functional> {
    let vars: Vec<Increment> = (0..layout.n_steps())
        .flat_map(|k| {
            (0..layout.n_noise()).map(move |j| Increment {
                step: k,
                component: j,
            })
        })
        .collect();
    let mut exprs: Vec<ExprRef<Increment>> = Vec::new();
    let mut current = vec![0u32; vars.len()];
    fn rec(
        vars: &[Increment],
        at: usize,
        left: u32,
        current: &mut Vec<u32>,
        out: &mut Vec<ExprRef<Increment>>,
    ) {
        if at == vars.len() {
            let factors: Vec<_> = vars
                .iter()
                .zip(current.iter())
                .filter(|(_, &p)| p > 0)
                .map(|(v, &p)| expr::powi(expr::var(*v), p))
                .collect();
            out.push(if factors.is_empty() {
                expr::constant(1.0)
            } else {
                expr::mul(factors)
            });
            return;
        }
        for p in 0..=left {
            current[at] = p;
            rec(vars, at + 1, left - p, current, out);
        }
        current[at] = 0;
    }
    rec(&vars, 0, max_degree, &mut current, &mut exprs);
    exprs.sort();
    exprs.dedup();
    exprs
        .into_iter()
        .map(|e| Functional::new(layout.clone(), e).unwrap())
        .collect()
}

/// Which identity a corpus row checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdentityKind {
    IntegrationByParts,
    Isometry,
    DerivativeOfIntegral,
}

impl IdentityKind {
    pub fn name(&self) -> &'static str {
        match self {
            IdentityKind::IntegrationByParts => "ibp",
            IdentityKind::Isometry => "isometry",
            IdentityKind::DerivativeOfIntegral => "dint",
        }
    }
}

/// One corpus result row (CSV: id, route, lhs, rhs, residual, stderr).
#[derive(Clone, Debug)]
pub struct CorpusRow {
    pub id: String,
    pub kind: IdentityKind,
    pub route: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub stderr: f64,
}

/// Runs the three identities over the full monomial corpus of one layout.
///
/// Pairing: the duality check ranges over all ordered pairs (G, phi) with
/// the family F_k = phi in every slot (both sides are linear in F, so
/// uniform families witness the identity for arbitrary ones); isometry and
/// the derivative identity range over the single functionals.
pub fn run_identity_corpus(config: &CorpusConfig) -> Result<Vec<CorpusRow>, WienerError> {
    let layout = &config.layout;
    let monos = monomials(layout, config.max_degree);
    let mut rows = Vec::new();
    let tag = format!("N{}m{}", layout.n_steps(), layout.n_noise());

    for (gi, g) in monos.iter().enumerate() {
        for (fi, phi) in monos.iter().enumerate() {
            let fam = Integrand::uniform(phi);
            let residual = ibp_residual_exact(g, &fam)?;
            rows.push(CorpusRow {
                id: format!("{tag}-ibp-g{gi}-f{fi}"),
                kind: IdentityKind::IntegrationByParts,
                route: "wick",
                lhs: residual,
                rhs: 0.0,
                residual,
                stderr: 0.0,
            });
        }
    }

    for (fi, phi) in monos.iter().enumerate() {
        // Isometry needs degree(phi)^2 within the oracle budget.
        if 2 * (phi.polynomial_degree().unwrap_or(0) + 1) > super::wick::DEGREE_BUDGET {
            continue;
        }
        let fam = Integrand::uniform(phi);
        let chk = check_isometry_exact(&fam)?;
        rows.push(CorpusRow {
            id: format!("{tag}-isometry-f{fi}"),
            kind: IdentityKind::Isometry,
            route: "wick",
            lhs: chk.lhs,
            rhs: chk.rhs,
            residual: chk.residual,
            stderr: 0.0,
        });

        for k in 0..layout.n_steps() {
            let r = dint_identity_residual(&fam, k, 0, 20, 1234 + fi as u64);
            rows.push(CorpusRow {
                id: format!("{tag}-dint-f{fi}-k{k}"),
                kind: IdentityKind::DerivativeOfIntegral,
                route: "pointwise",
                lhs: r,
                rhs: 0.0,
                residual: r,
                stderr: 0.0,
            });
        }
    }
    Ok(rows)
}

/// A parsed corpus entry: the test functional G and its integrand family.
#[derive(Debug)]
pub struct CorpusEntry {
    pub g: Functional,
    pub family: Integrand,
}

/// Parses `G ; F_1 ; ... ; F_N` over symbols w1..wN (single-noise grids).
pub fn parse_corpus_line(
    line: &str,
    layout: &Arc<GridLayout>,
) -> Result<CorpusEntry, ParseError> {
    assert_eq!(layout.n_noise(), 1, "description files are single-noise");
    let n = layout.n_steps();
    let resolver = |name: &str| -> Option<ExprRef<Increment>> {
        let idx: usize = name.strip_prefix('w')?.parse().ok()?;
        if idx >= 1 && idx <= n {
            Some(expr::var(Increment {
                step: idx - 1,
                component: 0,
            }))
        } else {
            None
        }
    };
    let comps = parse_components(line, &resolver)?;
    if comps.len() != n + 1 {
        return Err(ParseError {
            line: 1,
            column: 1,
            message: format!(
                "corpus entry needs 1 + N = {} components (G then F_1..F_N), found {}",
                n + 1,
                comps.len()
            ),
        });
    }
    let mut it = comps.into_iter();
    let g = Functional::new(layout.clone(), it.next().unwrap()).map_err(wrap_err)?;
    let family = Integrand::new(
        layout.clone(),
        it.map(|e| Functional::new(layout.clone(), e))
            .collect::<Result<Vec<_>, _>>()
            .map_err(wrap_err)?,
    )
    .map_err(wrap_err)?;
    Ok(CorpusEntry { g, family })
}

fn wrap_err(e: WienerError) -> ParseError {
    ParseError {
        line: 1,
        column: 1,
        message: e.to_string(),
    }
}

/// Runs one parsed entry, choosing the exact route for polynomial pairs and
/// Monte Carlo otherwise.
pub fn run_corpus_entry(
    id: &str,
    entry: &CorpusEntry,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<CorpusRow>, WienerError> {
    let mut rows = Vec::new();
    let poly = entry.g.polynomial_degree().is_some()
        && (0..entry.family.layout().n_steps())
            .all(|k| entry.family.term(k, 0).polynomial_degree().is_some());
    if poly {
        let residual = ibp_residual_exact(&entry.g, &entry.family)?;
        rows.push(CorpusRow {
            id: format!("{id}-ibp"),
            kind: IdentityKind::IntegrationByParts,
            route: "wick",
            lhs: residual,
            rhs: 0.0,
            residual,
            stderr: 0.0,
        });
        let chk = check_isometry_exact(&entry.family)?;
        rows.push(CorpusRow {
            id: format!("{id}-isometry"),
            kind: IdentityKind::Isometry,
            route: "wick",
            lhs: chk.lhs,
            rhs: chk.rhs,
            residual: chk.residual,
            stderr: 0.0,
        });
    } else {
        let mc = ibp_residual_mc(&entry.g, &entry.family, mc_samples, seed)?;
        rows.push(CorpusRow {
            id: format!("{id}-ibp"),
            kind: IdentityKind::IntegrationByParts,
            route: "mc",
            lhs: mc.mean,
            rhs: 0.0,
            residual: mc.mean,
            stderr: mc.stderr,
        });
        // Monitor the p = 2 moment inequality on the Monte Carlo route:
        // E[skorokhod(F)^2] <= E[sum F^2 dt] + E[sum |dF|^2 dt dt].
        let layout = entry.family.layout().clone();
        let s2 = Functional::new(layout.clone(), expr::powi(skorokhod(&entry.family).expr.clone(), 2))?;
        let lhs = mc_expectation(&s2, mc_samples, seed ^ 0x5eed)?;
        let mut bound_terms = Vec::new();
        for k in 0..layout.n_steps() {
            let fk = entry.family.term(k, 0);
            bound_terms.push(expr::mul([
                expr::constant(layout.dt(k)),
                expr::powi(fk.expr().clone(), 2),
            ]));
            for l in 0..layout.n_steps() {
                let dfl = entry.family.term(l, 0).partial(k, 0);
                bound_terms.push(expr::mul([
                    expr::constant(layout.dt(k) * layout.dt(l)),
                    expr::powi(dfl.expr().clone(), 2),
                ]));
            }
        }
        let bound = mc_expectation(
            &Functional::new(layout.clone(), expr::add(bound_terms))?,
            mc_samples,
            seed ^ 0xb0b,
        )?;
        rows.push(CorpusRow {
            id: format!("{id}-moment-bound"),
            kind: IdentityKind::Isometry,
            route: "mc",
            lhs: lhs.mean,
            rhs: bound.mean,
            residual: lhs.mean - bound.mean,
            stderr: (lhs.stderr.powi(2) + bound.stderr.powi(2)).sqrt(),
        });
    }
    for k in 0..entry.family.layout().n_steps() {
        let r = dint_identity_residual(&entry.family, k, 0, 50, seed ^ (k as u64));
        rows.push(CorpusRow {
            id: format!("{id}-dint-k{k}"),
            kind: IdentityKind::DerivativeOfIntegral,
            route: "pointwise",
            lhs: r,
            rhs: 0.0,
            residual: r,
            stderr: 0.0,
        });
    }
    Ok(rows)
}

/// Convenience: wick_expectation with the Monte Carlo fallback.
pub fn expectation_auto(
    f: &Functional,
    mc_samples: usize,
    seed: u64,
) -> Result<(f64, f64, &'static str), WienerError> {
    match f.polynomial_degree() {
        Some(d) if d <= super::wick::DEGREE_BUDGET => {
            Ok((wick_expectation(f)?, 0.0, "wick"))
        }
        _ => {
            let mc = mc_expectation(f, mc_samples, seed)?;
            Ok((mc.mean, mc.stderr, "mc"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts_are_binomial() {
        // C(vars + 4, 4) monomials of degree <= 4.
        let l = Arc::new(GridLayout::new(vec![0.3, 0.5], 1));
        assert_eq!(monomials(&l, 4).len(), 15);
        let l = Arc::new(GridLayout::new(vec![0.3, 0.5], 2));
        assert_eq!(monomials(&l, 4).len(), 70);
    }

    #[test]
    fn small_corpus_is_exact() {
        let config = CorpusConfig {
            layout: Arc::new(GridLayout::new(vec![0.3, 0.5], 1)),
            max_degree: 3,
        };
        let rows = run_identity_corpus(&config).unwrap();
        assert!(!rows.is_empty());
        let worst = rows
            .iter()
            .map(|r| r.residual.abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "worst residual {worst}");
    }

    #[test]
    fn corpus_lines_parse_and_run() {
        let layout = Arc::new(GridLayout::new(vec![0.4, 0.6], 1));
        let entry = parse_corpus_line("w1^2*w2 ; w1 ; w2", &layout).unwrap();
        let rows = run_corpus_entry("demo", &entry, 1000, 7).unwrap();
        assert!(rows
            .iter()
            .filter(|r| r.route == "wick")
            .all(|r| r.residual.abs() <= 1e-12));

        let err = parse_corpus_line("w1 ; w1", &layout).unwrap_err();
        assert!(err.message.contains("1 + N"));
        let err = parse_corpus_line("w3 ; w1 ; w2", &layout).unwrap_err();
        assert!(err.message.contains("unknown variable"));
    }

    #[test]
    fn transcendental_lines_route_to_mc() {
        let layout = Arc::new(GridLayout::new(vec![0.5], 1));
        let entry = parse_corpus_line("sin(w1) ; 1", &layout).unwrap();
        let rows = run_corpus_entry("demo", &entry, 50_000, 11).unwrap();
        let ibp = rows
            .iter()
            .find(|r| r.kind == IdentityKind::IntegrationByParts)
            .unwrap();
        assert_eq!(ibp.route, "mc");
        assert!(ibp.residual.abs() < 4.0 * ibp.stderr);
        // Moment inequality monitored with slack >= 0 (up to noise).
        let bound = rows
            .iter()
            .find(|r| r.kind == IdentityKind::Isometry)
            .unwrap();
        assert!(bound.residual <= 4.0 * bound.stderr);
    }
}
