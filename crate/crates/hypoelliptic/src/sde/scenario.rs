//! Named SDE scenarios shared by the CLI, the examples, and the test suites.
//!
//! Each scenario fixes a system, a default initial condition, and the test
//! points at which bracket conditions are checked. The degenerate system is
//! the standing counterexample where the bracket condition fails and every
//! diagnostic is expected to flag non-decay.

use serde::{Deserialize, Serialize};

use crate::expr::{constant, mul, sin, sub, var};
use crate::vfield::VectorField;

use super::SdeSystem;

/// Tunable scenario parameters; unused entries are ignored by scenarios that
/// do not consume them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Quadratic-potential coefficient c in V(q) = c q^2 / 2 (langevin).
    pub potential: f64,
    /// Temperature (langevin noise strength sqrt(2 T)).
    pub temperature: f64,
    /// State dimension for the elliptic Brownian scenario.
    pub dim: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            potential: 1.0,
            temperature: 1.0,
            dim: 2,
        }
    }
}

/// A registry entry: the system plus its conventional starting data.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub system: SdeSystem,
    pub x0: Vec<f64>,
    /// Points at which bracket spans are evaluated; chosen to include the
    /// degenerate points of the fields where they exist.
    pub hormander_points: Vec<Vec<f64>>,
    /// Levels to build when checking the bracket condition.
    pub bracket_depth: usize,
}

pub const SCENARIO_NAMES: [&str; 5] = [
    "brownian",
    "geometric",
    "langevin",
    "counterexample",
    "degenerate",
];

/// Builds a scenario by registry name. Returns `None` for unknown names.
pub fn by_name(name: &str, params: &ScenarioParams) -> Option<Scenario> {
    match name {
        "brownian" => Some(brownian(params.dim)),
        "geometric" => Some(geometric()),
        "langevin" => Some(langevin(params.potential, params.temperature)),
        "counterexample" => Some(counterexample()),
        "degenerate" => Some(degenerate()),
        _ => None,
    }
}

/// Elliptic reference: dx_i = dW_i, V_i = e_i.
pub fn brownian(dim: usize) -> Scenario {
    let system = SdeSystem::new(
        VectorField::zero(dim),
        (0..dim).map(|i| VectorField::axis(dim, i)).collect(),
    )
    .unwrap();
    Scenario {
        name: "brownian".into(),
        system,
        x0: vec![0.0; dim],
        hormander_points: vec![vec![0.0; dim], vec![1.0; dim]],
        bracket_depth: 2,
    }
}

/// dx = x o dW with exact solution x_t = x0 exp(W_t).
pub fn geometric() -> Scenario {
    let system = SdeSystem::new(
        VectorField::zero(1),
        vec![VectorField::new(vec![var(0)]).unwrap()],
    )
    .unwrap();
    Scenario {
        name: "geometric".into(),
        system,
        x0: vec![1.0],
        hormander_points: vec![vec![1.0], vec![-0.5]],
        bracket_depth: 2,
    }
}

/// Kinetic Langevin with quadratic potential: dq = p dt,
/// dp = (-c q - p) dt + sqrt(2T) dW. Hypoelliptic, bracket level 1.
pub fn langevin(potential: f64, temperature: f64) -> Scenario {
    let drift = VectorField::new(vec![
        var(1),
        sub(mul([constant(-potential), var(0)]), var(1)),
    ])
    .unwrap();
    let noise = VectorField::constant(&[0.0, (2.0 * temperature).sqrt()]);
    let system = SdeSystem::new(drift, vec![noise]).unwrap();
    Scenario {
        name: "langevin".into(),
        system,
        x0: vec![0.0, 0.0],
        hormander_points: vec![vec![0.0, 0.0], vec![0.7, -0.3], vec![2.0, 1.0]],
        bracket_depth: 3,
    }
}

/// dx = -sin(x) dt + cos(x) o dW from x0 = 0: satisfies the bracket
/// condition yet never exits [-pi/2, pi/2].
pub fn counterexample() -> Scenario {
    let drift = VectorField::new(vec![mul([constant(-1.0), sin(var(0))])]).unwrap();
    let noise = VectorField::new(vec![crate::expr::cos(var(0))]).unwrap();
    let system = SdeSystem::new(drift, vec![noise]).unwrap();
    Scenario {
        name: "counterexample".into(),
        system,
        x0: vec![0.0],
        hormander_points: vec![
            vec![0.0],
            vec![0.3],
            vec![std::f64::consts::FRAC_PI_2],
            vec![-std::f64::consts::FRAC_PI_2],
        ],
        bracket_depth: 3,
    }
}

/// Bracket-degenerate control system: V_1 = e_1, V_0 = 0 on R^2. The second
/// coordinate never moves; all brackets vanish identically.
pub fn degenerate() -> Scenario {
    let system = SdeSystem::new(VectorField::zero(2), vec![VectorField::axis(2, 0)]).unwrap();
    Scenario {
        name: "degenerate".into(),
        system,
        x0: vec![0.0, 0.0],
        hormander_points: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        bracket_depth: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfield::{uniform_hormander_level, HormanderStatus, DEFAULT_RANK_TOL};

    #[test]
    fn registry_round_trip() {
        let params = ScenarioParams::default();
        for name in SCENARIO_NAMES {
            let sc = by_name(name, &params).unwrap();
            assert_eq!(sc.name, name);
            assert_eq!(sc.x0.len(), sc.system.dim());
        }
        assert!(by_name("unknown", &params).is_none());
    }

    #[test]
    fn bracket_levels_match_theory() {
        let params = ScenarioParams::default();
        let expect = [
            ("brownian", Some(0)),
            ("geometric", Some(0)),
            ("langevin", Some(1)),
            ("counterexample", Some(1)),
            ("degenerate", None),
        ];
        for (name, want) in expect {
            let sc = by_name(name, &params).unwrap();
            let status = uniform_hormander_level(
                sc.system.drift(),
                sc.system.diffusions(),
                &sc.hormander_points,
                sc.bracket_depth,
                DEFAULT_RANK_TOL,
            )
            .unwrap();
            match (want, status) {
                (Some(k), HormanderStatus::SatisfiedAt { level }) => {
                    assert_eq!(level, k, "scenario {name}")
                }
                (None, HormanderStatus::Undetermined { .. }) => {}
                (want, got) => panic!("scenario {name}: wanted {want:?}, got {got:?}"),
            }
        }
    }
}
