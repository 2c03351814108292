//! Tail-scaling diagnostics: the empirical surrogate for the superpolynomial
//! bound sup_eta P(<eta, C eta> < eps) <= C_p eps^p.
//!
//! The sup over unit directions is approximated by the worst of a finite set
//! of directions (random draws, optionally the coordinate axes, plus any
//! user-fixed directions); the report records the policy. Fitted log-log
//! slopes over the resolvable bins play the role of the non-constructive
//! exponents: calibrated once, then enforced as regressions.

use nalgebra::DVector;
use serde::Serialize;

use crate::rng::{domain, CounterRng};
use crate::sde::{run_ensemble, GridSpec, Scheme, SdeSystem};

use super::{reduced_matrix_with_horizon, CovarianceError};

/// How the unit direction(s) eta are chosen.
#[derive(Clone, Debug)]
pub enum EtaPolicy {
    /// Fixed user directions (normalised on use).
    Fixed(Vec<Vec<f64>>),
    /// Worst of: `random` seed-derived directions, the coordinate axes if
    /// `include_axes`, and any extra fixed directions.
    WorstOf {
        random: usize,
        include_axes: bool,
        extra: Vec<Vec<f64>>,
    },
}

impl EtaPolicy {
    pub fn worst_of(random: usize) -> Self {
        EtaPolicy::WorstOf {
            random,
            include_axes: true,
            extra: Vec::new(),
        }
    }

    /// Materialises the direction set; deterministic in (seed, dim).
    pub fn directions(&self, seed: u64, dim: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        match self {
            EtaPolicy::Fixed(dirs) => {
                for d in dirs {
                    out.push(DVector::from_column_slice(d).normalize());
                }
            }
            EtaPolicy::WorstOf {
                random,
                include_axes,
                extra,
            } => {
                let rng = CounterRng::new(seed).derive(domain::ETA);
                for k in 0..*random {
                    out.push(DVector::from_vec(rng.unit_vector(k as u64, dim)));
                }
                if *include_axes {
                    for i in 0..dim {
                        let mut e = DVector::zeros(dim);
                        e[i] = 1.0;
                        out.push(e);
                    }
                }
                for d in extra {
                    out.push(DVector::from_column_slice(d).normalize());
                }
            }
        }
        out
    }

    pub fn describe(&self) -> String {
        match self {
            EtaPolicy::Fixed(dirs) => format!("fixed({} directions)", dirs.len()),
            EtaPolicy::WorstOf {
                random,
                include_axes,
                extra,
            } => format!(
                "worst-of({} random{}{})",
                random,
                if *include_axes { " + axes" } else { "" },
                if extra.is_empty() {
                    String::new()
                } else {
                    format!(" + {} fixed", extra.len())
                }
            ),
        }
    }
}

/// One epsilon bin with its Wilson 95% interval.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingBin {
    pub epsilon: f64,
    pub hits: u64,
    pub paths: u64,
    pub p_lo: f64,
    pub p_hat: f64,
    pub p_hi: f64,
}

/// Empirical tail report with the fitted log-log decay exponent.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub bins: Vec<ScalingBin>,
    /// Least-squares slope of log2 p over log2 eps across resolvable bins
    /// (>= `MIN_HITS_FOR_FIT` hits); None if fewer than two such bins.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    /// Epsilon range actually used by the fit.
    pub fit_range: Option<(f64, f64)>,
    /// Bins censored for having too few hits.
    pub censored_bins: usize,
    pub policy: String,
    pub seed: u64,
    pub paths: u64,
    /// Smallest quadratic form seen; anything below the smallest epsilon is
    /// unresolvable at this path count.
    pub min_quadratic_form: f64,
}

/// Bins need at least this many hits to enter the slope fit.
pub const MIN_HITS_FOR_FIT: u64 = 10;

fn wilson_interval(hits: u64, n: u64) -> (f64, f64, f64) {
    let z = 1.959963984540054f64; // 95%
    let n_f = n as f64;
    let p = hits as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((centre - half).max(0.0), p, (centre + half).min(1.0))
}

/// Geometric epsilon grid 2^-hi .. 2^-lo (inclusive), descending.
pub fn dyadic_epsilons(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(|k| 2.0f64.powi(-(k as i32))).collect()
}

/// Runs the ensemble and tallies P(min_eta <eta, C eta> < eps) per bin.
#[allow(clippy::too_many_arguments)]
pub fn tail_scaling(
    system: &SdeSystem,
    x0: &[f64],
    spec: &GridSpec,
    scheme: Scheme,
    policy: &EtaPolicy,
    epsilons: &[f64],
    paths: u64,
    seed: u64,
) -> Result<ScalingReport, CovarianceError> {
    assert!(paths >= 1);
    let compiled = system.compile();
    let directions = policy.directions(seed, system.dim());
    assert!(!directions.is_empty(), "eta policy produced no directions");
    let horizon = spec.horizon();

    let ensemble = run_ensemble(&compiled, x0, spec, seed, paths, scheme, |p, flow| {
        let sample = reduced_matrix_with_horizon(flow, system, horizon, (seed, p))
            .expect("horizon matches by construction");
        directions
            .iter()
            .map(|eta| eta.dot(&(&sample.reduced * eta)))
            .fold(f64::MAX, f64::min)
    });
    if !ensemble.exploded.is_empty() {
        return Err(CovarianceError::TooManyExcluded {
            excluded: ensemble.exploded.len(),
            paths: paths as usize,
            percent_cap: 0.0,
        });
    }

    let quad_forms: Vec<f64> = ensemble.values.iter().map(|(_, q)| *q).collect();
    let min_q = quad_forms.iter().cloned().fold(f64::MAX, f64::min);
    let n = quad_forms.len() as u64;

    let mut bins = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let hits = quad_forms.iter().filter(|&&q| q < eps).count() as u64;
        let (p_lo, p_hat, p_hi) = wilson_interval(hits, n);
        bins.push(ScalingBin {
            epsilon: eps,
            hits,
            paths: n,
            p_lo,
            p_hat,
            p_hi,
        });
    }

    let fit: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.hits >= MIN_HITS_FOR_FIT)
        .map(|b| (b.epsilon.log2(), (b.hits as f64 / b.paths as f64).log2()))
        .collect();
    let censored = bins.len() - fit.len();
    let (slope, slope_stderr, fit_range) = if fit.len() >= 2 {
        let (s, se) = least_squares_slope(&fit);
        let lo = fit.iter().map(|(x, _)| *x).fold(f64::MAX, f64::min);
        let hi = fit.iter().map(|(x, _)| *x).fold(f64::MIN, f64::max);
        (Some(s), Some(se), Some((2.0f64.powf(lo), 2.0f64.powf(hi))))
    } else {
        (None, None, None)
    };

    Ok(ScalingReport {
        bins,
        slope,
        slope_stderr,
        fit_range,
        censored_bins: censored,
        policy: policy.describe(),
        seed,
        paths: n,
        min_quadratic_form: min_q,
    })
}

/// Slope and its standard error from simple linear regression.
fn least_squares_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if points.len() <= 2 {
        return (slope, 0.0);
    }
    let ss_res: f64 = points
        .iter()
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    let se = (ss_res / (n - 2.0) / sxx).sqrt();
    (slope, se)
}
