//! Immutable expression trees over a generic symbol type.
//!
//! The same node kinds serve two symbol domains: state coordinates (vector
//! fields on R^n) and Wiener increments (functionals of the discrete noise).
//! All construction goes through smart constructors that keep trees in
//! canonical form: sums and products flattened, constants folded, like terms
//! collected, operands sorted by the derived structural order. Canonical form
//! is what makes structural equality usable for deduplication and for the
//! antisymmetry checks downstream.
//!
//! There are deliberately no division or root nodes, so every expression is
//! globally smooth and closed under differentiation.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::sync::Arc;

use ordered_float::OrderedFloat;

/// Shared handle to an expression node. Subtrees are reused freely, so
/// derivatives of large graphs form DAGs rather than exploding trees.
pub type ExprRef<S> = Arc<Expr<S>>;

/// Bound on symbols usable in expressions.
pub trait Symbol: Clone + Eq + Ord + Hash + Debug {}
impl<T: Clone + Eq + Ord + Hash + Debug> Symbol for T {}

/// Expression node. Variant order matters: the derived `Ord` is the
/// structural order used to sort operands, and it puts constants first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expr<S> {
    Const(OrderedFloat<f64>),
    Var(S),
    /// Integer power with exponent >= 2; lower exponents are normalised away.
    Pow(ExprRef<S>, u32),
    /// Product of >= 2 factors, at most one constant (sorted first), no
    /// nested products, repeated bases collected into powers.
    Prod(Vec<ExprRef<S>>),
    /// Sum of >= 2 terms, at most one constant, no nested sums, like terms
    /// collected into a single coefficient.
    Sum(Vec<ExprRef<S>>),
    Sin(ExprRef<S>),
    Cos(ExprRef<S>),
    Exp(ExprRef<S>),
}

pub fn constant<S: Symbol>(c: f64) -> ExprRef<S> {
    debug_assert!(c.is_finite(), "expression constants must be finite");
    // Collapse -0.0 so structural equality matches numeric equality.
    let c = if c == 0.0 { 0.0 } else { c };
    Arc::new(Expr::Const(OrderedFloat(c)))
}

pub fn var<S: Symbol>(s: S) -> ExprRef<S> {
    Arc::new(Expr::Var(s))
}

/// Splits a canonical term into (coefficient, core-without-coefficient).
/// The core of a bare constant is `None`.
fn split_coeff<S: Symbol>(e: &ExprRef<S>) -> (f64, Option<ExprRef<S>>) {
    match &**e {
        Expr::Const(c) => (c.0, None),
        Expr::Prod(fs) => {
            if let Expr::Const(c) = &*fs[0] {
                let rest: Vec<_> = fs[1..].to_vec();
                let core = if rest.len() == 1 {
                    rest.into_iter().next().unwrap()
                } else {
                    Arc::new(Expr::Prod(rest))
                };
                (c.0, Some(core))
            } else {
                (1.0, Some(e.clone()))
            }
        }
        _ => (1.0, Some(e.clone())),
    }
}

/// Attaches a coefficient to a coefficient-free core term.
fn with_coeff<S: Symbol>(coeff: f64, core: ExprRef<S>) -> ExprRef<S> {
    if coeff == 1.0 {
        return core;
    }
    let mut factors = match &*core {
        Expr::Prod(fs) => fs.clone(),
        _ => vec![core],
    };
    factors.push(constant(coeff));
    factors.sort();
    Arc::new(Expr::Prod(factors))
}

/// Canonical sum: flattens, folds constants, collects like terms. Constant
/// coefficients distribute over nested sums so that a - a cancels even when
/// a is itself a sum.
pub fn add<S: Symbol>(terms: impl IntoIterator<Item = ExprRef<S>>) -> ExprRef<S> {
    let mut const_acc = 0.0;
    // Insert-ordered (core, coeff) accumulation keeps the pass deterministic;
    // the final sort restores canonical order.
    let mut cores: Vec<(ExprRef<S>, f64)> = Vec::new();
    let mut index: HashMap<ExprRef<S>, usize> = HashMap::new();

    fn absorb<S: Symbol>(
        e: ExprRef<S>,
        scale: f64,
        const_acc: &mut f64,
        cores: &mut Vec<(ExprRef<S>, f64)>,
        index: &mut HashMap<ExprRef<S>, usize>,
    ) {
        if let Expr::Sum(ts) = &*e {
            for t in ts {
                absorb(t.clone(), scale, const_acc, cores, index);
            }
            return;
        }
        let (coeff, core) = split_coeff(&e);
        match core {
            None => *const_acc += scale * coeff,
            Some(core) => {
                if matches!(&*core, Expr::Sum(_)) {
                    absorb(core, scale * coeff, const_acc, cores, index);
                    return;
                }
                match index.get(&core) {
                    Some(&i) => cores[i].1 += scale * coeff,
                    None => {
                        index.insert(core.clone(), cores.len());
                        cores.push((core, scale * coeff));
                    }
                }
            }
        }
    }

    for t in terms {
        absorb(t, 1.0, &mut const_acc, &mut cores, &mut index);
    }

    let mut out: Vec<ExprRef<S>> = cores
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(core, c)| with_coeff(c, core))
        .collect();
    if const_acc != 0.0 {
        out.push(constant(const_acc));
    }
    out.sort();
    match out.len() {
        0 => constant(0.0),
        1 => out.into_iter().next().unwrap(),
        _ => Arc::new(Expr::Sum(out)),
    }
}

/// Canonical product: flattens, folds constants, collects repeated bases
/// into integer powers.
pub fn mul<S: Symbol>(factors: impl IntoIterator<Item = ExprRef<S>>) -> ExprRef<S> {
    let mut const_acc = 1.0;
    let mut bases: Vec<(ExprRef<S>, u32)> = Vec::new();
    let mut index: HashMap<ExprRef<S>, usize> = HashMap::new();

    fn absorb<S: Symbol>(
        e: ExprRef<S>,
        exp: u32,
        const_acc: &mut f64,
        bases: &mut Vec<(ExprRef<S>, u32)>,
        index: &mut HashMap<ExprRef<S>, usize>,
    ) {
        match &*e {
            Expr::Const(c) => *const_acc *= c.0.powi(exp as i32),
            Expr::Prod(fs) => {
                for f in fs {
                    absorb(f.clone(), exp, const_acc, bases, index);
                }
            }
            Expr::Pow(b, n) => absorb(b.clone(), n * exp, const_acc, bases, index),
            _ => match index.get(&e) {
                Some(&i) => bases[i].1 += exp,
                None => {
                    index.insert(e.clone(), bases.len());
                    bases.push((e, exp));
                }
            },
        }
    }

    for f in factors {
        absorb(f, 1, &mut const_acc, &mut bases, &mut index);
    }
    if const_acc == 0.0 {
        return constant(0.0);
    }

    let mut out: Vec<ExprRef<S>> = bases
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(b, n)| if n == 1 { b } else { Arc::new(Expr::Pow(b, n)) })
        .collect();
    if const_acc != 1.0 || out.is_empty() {
        out.push(constant(const_acc));
    }
    out.sort();
    match out.len() {
        0 => unreachable!(),
        1 => out.into_iter().next().unwrap(),
        _ => Arc::new(Expr::Prod(out)),
    }
}

pub fn neg<S: Symbol>(e: ExprRef<S>) -> ExprRef<S> {
    mul([constant(-1.0), e])
}

pub fn sub<S: Symbol>(a: ExprRef<S>, b: ExprRef<S>) -> ExprRef<S> {
    add([a, neg(b)])
}

pub fn powi<S: Symbol>(base: ExprRef<S>, n: u32) -> ExprRef<S> {
    match n {
        0 => constant(1.0),
        1 => base,
        _ => match &*base {
            Expr::Const(c) => constant(c.0.powi(n as i32)),
            // (a*b)^n = a^n b^n and (a^m)^n = a^(mn), handled by mul.
            Expr::Prod(_) | Expr::Pow(..) => {
                mul(std::iter::repeat(base.clone()).take(n as usize))
            }
            _ => Arc::new(Expr::Pow(base, n)),
        },
    }
}

pub fn sin<S: Symbol>(e: ExprRef<S>) -> ExprRef<S> {
    match &*e {
        Expr::Const(c) => constant(c.0.sin()),
        _ => Arc::new(Expr::Sin(e)),
    }
}

pub fn cos<S: Symbol>(e: ExprRef<S>) -> ExprRef<S> {
    match &*e {
        Expr::Const(c) => constant(c.0.cos()),
        _ => Arc::new(Expr::Cos(e)),
    }
}

pub fn exp<S: Symbol>(e: ExprRef<S>) -> ExprRef<S> {
    match &*e {
        Expr::Const(c) => constant(c.0.exp()),
        _ => Arc::new(Expr::Exp(e)),
    }
}

/// Exact partial derivative with respect to `v`. Closure: the result is
/// another canonical expression, so derivatives can be nested freely.
pub fn diff<S: Symbol>(e: &ExprRef<S>, v: &S) -> ExprRef<S> {
    match &**e {
        Expr::Const(_) => constant(0.0),
        Expr::Var(s) => constant(if s == v { 1.0 } else { 0.0 }),
        Expr::Sum(ts) => add(ts.iter().map(|t| diff(t, v))),
        Expr::Prod(fs) => add((0..fs.len()).map(|i| {
            let mut factors = fs.clone();
            factors[i] = diff(&fs[i], v);
            mul(factors)
        })),
        Expr::Pow(b, n) => mul([
            constant(*n as f64),
            powi(b.clone(), n - 1),
            diff(b, v),
        ]),
        Expr::Sin(a) => mul([cos(a.clone()), diff(a, v)]),
        Expr::Cos(a) => mul([constant(-1.0), sin(a.clone()), diff(a, v)]),
        Expr::Exp(a) => mul([exp(a.clone()), diff(a, v)]),
    }
}

/// Plain recursive evaluation. Fine for the small trees of vector fields.
pub fn eval<S: Symbol>(e: &ExprRef<S>, lookup: &impl Fn(&S) -> f64) -> f64 {
    match &**e {
        Expr::Const(c) => c.0,
        Expr::Var(s) => lookup(s),
        Expr::Sum(ts) => ts.iter().map(|t| eval(t, lookup)).sum(),
        Expr::Prod(fs) => fs.iter().map(|f| eval(f, lookup)).product(),
        Expr::Pow(b, n) => eval(b, lookup).powi(*n as i32),
        Expr::Sin(a) => eval(a, lookup).sin(),
        Expr::Cos(a) => eval(a, lookup).cos(),
        Expr::Exp(a) => eval(a, lookup).exp(),
    }
}

/// Evaluation with per-call memoisation keyed on node identity. Needed for
/// derivative graphs where subtrees are heavily shared.
pub fn eval_dag<S: Symbol>(e: &ExprRef<S>, lookup: &impl Fn(&S) -> f64) -> f64 {
    let mut cache: HashMap<usize, f64> = HashMap::new();
    eval_dag_inner(e, lookup, &mut cache)
}

fn eval_dag_inner<S: Symbol>(
    e: &ExprRef<S>,
    lookup: &impl Fn(&S) -> f64,
    cache: &mut HashMap<usize, f64>,
) -> f64 {
    let key = Arc::as_ptr(e) as usize;
    if let Some(&v) = cache.get(&key) {
        return v;
    }
    let v = match &**e {
        Expr::Const(c) => c.0,
        Expr::Var(s) => lookup(s),
        Expr::Sum(ts) => ts.iter().map(|t| eval_dag_inner(t, lookup, cache)).sum(),
        Expr::Prod(fs) => fs
            .iter()
            .map(|f| eval_dag_inner(f, lookup, cache))
            .product(),
        Expr::Pow(b, n) => eval_dag_inner(b, lookup, cache).powi(*n as i32),
        Expr::Sin(a) => eval_dag_inner(a, lookup, cache).sin(),
        Expr::Cos(a) => eval_dag_inner(a, lookup, cache).cos(),
        Expr::Exp(a) => eval_dag_inner(a, lookup, cache).exp(),
    };
    cache.insert(key, v);
    v
}

/// Rewrites every symbol through `f`, rebuilding canonically. Shared
/// subgraphs are rewritten once.
pub fn substitute<S: Symbol, T: Symbol>(
    e: &ExprRef<S>,
    f: &impl Fn(&S) -> ExprRef<T>,
) -> ExprRef<T> {
    let mut cache: HashMap<usize, ExprRef<T>> = HashMap::new();
    substitute_inner(e, f, &mut cache)
}

fn substitute_inner<S: Symbol, T: Symbol>(
    e: &ExprRef<S>,
    f: &impl Fn(&S) -> ExprRef<T>,
    cache: &mut HashMap<usize, ExprRef<T>>,
) -> ExprRef<T> {
    let key = Arc::as_ptr(e) as usize;
    if let Some(v) = cache.get(&key) {
        return v.clone();
    }
    let v = match &**e {
        Expr::Const(c) => constant(c.0),
        Expr::Var(s) => f(s),
        Expr::Sum(ts) => add(ts.iter().map(|t| substitute_inner(t, f, cache))),
        Expr::Prod(fs) => mul(fs.iter().map(|x| substitute_inner(x, f, cache))),
        Expr::Pow(b, n) => powi(substitute_inner(b, f, cache), *n),
        Expr::Sin(a) => sin(substitute_inner(a, f, cache)),
        Expr::Cos(a) => cos(substitute_inner(a, f, cache)),
        Expr::Exp(a) => exp(substitute_inner(a, f, cache)),
    };
    cache.insert(key, v.clone());
    v
}

/// Visits every distinct symbol once.
pub fn for_each_var<S: Symbol>(e: &ExprRef<S>, f: &mut impl FnMut(&S)) {
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut vars: HashMap<S, ()> = HashMap::new();
    walk(e, &mut seen, &mut vars);
    fn walk<S: Symbol>(e: &ExprRef<S>, seen: &mut HashMap<usize, ()>, vars: &mut HashMap<S, ()>) {
        if seen.insert(Arc::as_ptr(e) as usize, ()).is_some() {
            return;
        }
        match &**e {
            Expr::Const(_) => {}
            Expr::Var(s) => {
                vars.entry(s.clone()).or_insert(());
            }
            Expr::Sum(ts) | Expr::Prod(ts) => ts.iter().for_each(|t| walk(t, seen, vars)),
            Expr::Pow(b, _) => walk(b, seen, vars),
            Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => walk(a, seen, vars),
        }
    }
    let mut collected: Vec<S> = vars.into_keys().collect();
    collected.sort();
    for s in &collected {
        f(s);
    }
}

/// Total degree if the expression is polynomial in its symbols, else `None`.
pub fn polynomial_degree<S: Symbol>(e: &ExprRef<S>) -> Option<u64> {
    match &**e {
        Expr::Const(_) => Some(0),
        Expr::Var(_) => Some(1),
        Expr::Sum(ts) => ts.iter().map(polynomial_degree).try_fold(0, |m, d| d.map(|d| m.max(d))),
        Expr::Prod(fs) => fs.iter().map(polynomial_degree).try_fold(0, |s, d| d.map(|d| s + d)),
        Expr::Pow(b, n) => polynomial_degree(b).map(|d| d * *n as u64),
        Expr::Sin(_) | Expr::Cos(_) | Expr::Exp(_) => None,
    }
}

pub fn is_zero<S>(e: &Expr<S>) -> bool {
    matches!(e, Expr::Const(c) if c.0 == 0.0)
}

/// Renders the expression with `namer` for symbols. Output parses back under
/// the module grammar when the names do.
pub fn format_expr<S: Symbol>(e: &ExprRef<S>, namer: &impl Fn(&S) -> String) -> String {
    fmt_prec(e, namer, 0)
}

fn fmt_prec<S: Symbol>(e: &ExprRef<S>, namer: &impl Fn(&S) -> String, prec: u8) -> String {
    let (s, p) = match &**e {
        Expr::Const(c) => {
            let v = c.0;
            (format!("{v}"), if v < 0.0 { 1 } else { 4 })
        }
        Expr::Var(s) => (namer(s), 4),
        Expr::Sum(ts) => {
            let mut out = String::new();
            for (i, t) in ts.iter().enumerate() {
                let r = fmt_prec(t, namer, 1);
                if i == 0 {
                    out.push_str(&r);
                } else if let Some(stripped) = r.strip_prefix('-') {
                    out.push_str(" - ");
                    out.push_str(stripped);
                } else {
                    out.push_str(" + ");
                    out.push_str(&r);
                }
            }
            (out, 1)
        }
        Expr::Prod(fs) => {
            // Render a leading -1 coefficient as a sign.
            let (head, tail) = match &*fs[0] {
                Expr::Const(c) if c.0 == -1.0 && fs.len() > 1 => ("-".to_string(), &fs[1..]),
                _ => (String::new(), &fs[..]),
            };
            let body = tail
                .iter()
                .map(|f| fmt_prec(f, namer, 2))
                .collect::<Vec<_>>()
                .join("*");
            (format!("{head}{body}"), if head.is_empty() { 2 } else { 1 })
        }
        Expr::Pow(b, n) => (format!("{}^{}", fmt_prec(b, namer, 3), n), 3),
        Expr::Sin(a) => (format!("sin({})", fmt_prec(a, namer, 0)), 4),
        Expr::Cos(a) => (format!("cos({})", fmt_prec(a, namer, 0)), 4),
        Expr::Exp(a) => (format!("exp({})", fmt_prec(a, namer, 0)), 4),
    };
    if p < prec {
        format!("({s})")
    } else {
        s
    }
}

/// Flat postfix program compiled from an expression over `usize`-indexed
/// variables. This is the hot path of the SDE integrators: evaluating the
/// tape avoids pointer chasing through the tree on every step.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<TapeOp>,
}

#[derive(Clone, Copy, Debug)]
enum TapeOp {
    Const(f64),
    Var(u32),
    /// Pop n values, push their sum.
    Add(u32),
    /// Pop n values, push their product.
    Mul(u32),
    PowI(i32),
    Sin,
    Cos,
    Exp,
}

impl Tape {
    pub fn compile(e: &ExprRef<usize>) -> Tape {
        let mut ops = Vec::new();
        fn walk(e: &ExprRef<usize>, ops: &mut Vec<TapeOp>) {
            match &**e {
                Expr::Const(c) => ops.push(TapeOp::Const(c.0)),
                Expr::Var(i) => ops.push(TapeOp::Var(*i as u32)),
                Expr::Sum(ts) => {
                    ts.iter().for_each(|t| walk(t, ops));
                    ops.push(TapeOp::Add(ts.len() as u32));
                }
                Expr::Prod(fs) => {
                    fs.iter().for_each(|f| walk(f, ops));
                    ops.push(TapeOp::Mul(fs.len() as u32));
                }
                Expr::Pow(b, n) => {
                    walk(b, ops);
                    ops.push(TapeOp::PowI(*n as i32));
                }
                Expr::Sin(a) => {
                    walk(a, ops);
                    ops.push(TapeOp::Sin);
                }
                Expr::Cos(a) => {
                    walk(a, ops);
                    ops.push(TapeOp::Cos);
                }
                Expr::Exp(a) => {
                    walk(a, ops);
                    ops.push(TapeOp::Exp);
                }
            }
        }
        walk(e, &mut ops);
        Tape { ops }
    }

    /// Evaluates against `vars`; `stack` is caller-owned scratch.
    pub fn eval(&self, vars: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for op in &self.ops {
            match *op {
                TapeOp::Const(c) => stack.push(c),
                TapeOp::Var(i) => stack.push(vars[i as usize]),
                TapeOp::Add(n) => {
                    let at = stack.len() - n as usize;
                    let s = stack[at..].iter().sum();
                    stack.truncate(at);
                    stack.push(s);
                }
                TapeOp::Mul(n) => {
                    let at = stack.len() - n as usize;
                    let p = stack[at..].iter().product();
                    stack.truncate(at);
                    stack.push(p);
                }
                TapeOp::PowI(n) => {
                    let v = stack.last_mut().unwrap();
                    *v = v.powi(n);
                }
                TapeOp::Sin => {
                    let v = stack.last_mut().unwrap();
                    *v = v.sin();
                }
                TapeOp::Cos => {
                    let v = stack.last_mut().unwrap();
                    *v = v.cos();
                }
                TapeOp::Exp => {
                    let v = stack.last_mut().unwrap();
                    *v = v.exp();
                }
            }
        }
        debug_assert_eq!(stack.len(), 1);
        stack[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type E = ExprRef<usize>;

    fn x(i: usize) -> E {
        var(i)
    }

    fn eval_at(e: &E, vals: &[f64]) -> f64 {
        eval(e, &|i: &usize| vals[*i])
    }

    /// Central-difference oracle for `diff`.
    fn fd_partial(e: &E, vals: &[f64], i: usize, h: f64) -> f64 {
        let mut up = vals.to_vec();
        let mut dn = vals.to_vec();
        up[i] += h;
        dn[i] -= h;
        (eval_at(e, &up) - eval_at(e, &dn)) / (2.0 * h)
    }

    #[test]
    fn canonical_like_terms_cancel() {
        let e = sub(mul([x(0), x(1)]), mul([x(1), x(0)]));
        assert!(is_zero(&e));
    }

    #[test]
    fn canonical_collects_powers() {
        let a = mul([x(0), x(0), x(0)]);
        let b = powi(x(0), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_constant_folding() {
        let e = add([constant(2.0), mul([constant(3.0), constant(4.0)]), x(0)]);
        // 2 + 12 + x0
        match &*e {
            Expr::Sum(ts) => {
                assert_eq!(ts.len(), 2);
                assert_eq!(ts[0], constant::<usize>(14.0));
            }
            other => panic!("expected sum, got {other:?}"),
        }
    }

    #[test]
    fn negation_is_structural() {
        let e = add([x(0), neg(x(0))]);
        assert!(is_zero(&e));
        let twice = add([x(0), x(0)]);
        assert_eq!(twice, mul([constant(2.0), x(0)]));
    }

    #[test]
    fn diff_matches_finite_differences() {
        // (x0^2 sin(x1) + exp(x0 x1)) cos(x0) and friends
        let cases: Vec<E> = vec![
            mul([powi(x(0), 2), sin(x(1))]),
            exp(mul([x(0), x(1)])),
            mul([add([x(0), powi(x(1), 3)]), cos(x(0))]),
            add([sin(sin(x(0))), mul([constant(2.5), x(1), exp(x(0))])]),
        ];
        let pts = [[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]];
        for e in &cases {
            for p in &pts {
                for i in 0..2 {
                    let sym = eval_at(&diff(e, &i), p);
                    let num = fd_partial(e, p, i, 1e-6);
                    assert_relative_eq!(sym, num, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn second_derivatives_nest() {
        let e = mul([powi(x(0), 3), x(1)]);
        let d2 = diff(&diff(&e, &0), &0); // 6 x0 x1
        assert_eq!(d2, mul([constant(6.0), x(0), x(1)]));
    }

    #[test]
    fn polynomial_degree_routes() {
        assert_eq!(polynomial_degree(&powi(x(0), 4)), Some(4));
        assert_eq!(
            polynomial_degree(&mul([powi(x(0), 2), powi(x(1), 3)])),
            Some(5)
        );
        assert_eq!(polynomial_degree(&sin(x(0))), None);
        assert_eq!(polynomial_degree(&constant::<usize>(4.0)), Some(0));
    }

    #[test]
    fn substitution_rebuilds_canonically() {
        // x0 -> a + b under the map, then d/da agrees with chain rule result.
        let e = powi(x(0), 2);
        let s = substitute(&e, &|_: &usize| add([var(10usize), var(11usize)]));
        let expect = add([
            powi(var(10usize), 2),
            mul([constant(2.0), var(10usize), var(11usize)]),
            powi(var(11usize), 2),
        ]);
        // (a+b)^2 stays as Pow of a Sum; expand both sides numerically.
        for (a, b) in [(0.2, 0.3), (-1.0, 0.7)] {
            let lookup = |i: &usize| if *i == 10 { a } else { b };
            assert_relative_eq!(eval(&s, &lookup), eval(&expect, &lookup), epsilon = 1e-14);
        }
    }

    #[test]
    fn tape_matches_tree_eval() {
        let e = add([
            mul([powi(x(0), 2), sin(x(1))]),
            exp(mul([constant(-0.5), x(0)])),
            constant(1.25),
        ]);
        let tape = Tape::compile(&e);
        let mut stack = Vec::new();
        for p in [[0.1, 0.2], [-0.7, 1.3], [2.0, -0.4]] {
            assert_relative_eq!(tape.eval(&p, &mut stack), eval_at(&e, &p), epsilon = 1e-15);
        }
    }

    #[test]
    fn dag_eval_matches_tree_eval() {
        // Build a deliberately shared graph: f = g^2 + sin(g), g = x0 x1 + x1.
        let g = add([mul([x(0), x(1)]), x(1)]);
        let f = add([powi(g.clone(), 2), sin(g)]);
        let p = [0.6, -1.2];
        assert_relative_eq!(
            eval_dag(&f, &|i: &usize| p[*i]),
            eval_at(&f, &p),
            epsilon = 1e-15
        );
    }
}
