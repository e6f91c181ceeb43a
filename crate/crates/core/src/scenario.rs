//! JSON scenario format: dynamics, initial measure, budget, target, cost and
//! solver settings, validated into a [`Scenario`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{default_probes, ControlSet, ControlSystem, DynamicsError, FieldSpec, VectorField};
use crate::ensemble::{BudgetMode, ControlSignal};
use crate::measures::{DiscreteMeasure, TargetSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: &str, message: impl ToString) -> Self {
        ScenarioError::Invalid {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub d: usize,
    pub m: usize,
    pub f0: FieldSpec,
    pub columns: Vec<FieldSpec>,
    pub control_set: ControlSet,
    /// Probe points for the rank and growth checks; a Halton set by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub mode: BudgetMode,
    pub alpha: f64,
    #[serde(default)]
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    MinTime,
    /// `∫ μ_t(R^d ∖ S) dt` with `S` the (set) target.
    AveragedMinTime,
    /// Effort plus `min W2` to the target list over a fixed horizon.
    TerminalW2PlusEffort { horizon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSpec {
    pub t_lo: f64,
    pub t_hi: f64,
    pub dt: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    pub tol_target: f64,
    /// Finite per-particle control menu enabling the exhaustive cross-check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub menu: Option<Vec<Vec<f64>>>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            t_lo: 0.0,
            t_hi: 10.0,
            dt: 0.02,
            restarts: 8,
            seed: 0,
            max_sweeps: 5000,
            tol_target: crate::measures::TOL_TARGET,
            menu: None,
        }
    }
}

/// Open-loop controls for `simulate`, `controls[i][k]` on `steps` cells of `[t0, t1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub controls: ControlSignal,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dynamics: DynamicsSpec,
    pub initial: DiscreteMeasure,
    pub budget: BudgetSpec,
    pub target: TargetSpec,
    pub cost: CostSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub sys: ControlSystem,
    pub mu0: DiscreteMeasure,
    pub budget: BudgetSpec,
    pub target: TargetSpec,
    pub cost: CostSpec,
    pub solver: SolverSpec,
}

impl Scenario {
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        let dy = &spec.dynamics;
        let field = |name: &str, f: &FieldSpec| -> Result<VectorField, ScenarioError> {
            let v = VectorField::from_spec(dy.d, f).map_err(|e| ScenarioError::invalid(name, e))?;
            if v.dim() != dy.d {
                return Err(ScenarioError::invalid(name, format!("field has dimension {}, expected {}", v.dim(), dy.d)));
            }
            Ok(v)
        };
        if dy.columns.len() != dy.m {
            return Err(ScenarioError::invalid(
                "dynamics.columns",
                format!("{} columns for m = {}", dy.columns.len(), dy.m),
            ));
        }
        dy.control_set.check(dy.m).map_err(|e| ScenarioError::invalid("dynamics.control_set", e))?;
        let f0 = field("dynamics.f0", &dy.f0)?;
        let columns = dy
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| field(&format!("dynamics.columns[{j}]"), c))
            .collect::<Result<Vec<_>, _>>()?;
        let probes = dy.probes.clone().unwrap_or_else(|| default_probes(dy.d));
        let sys = ControlSystem::with_probes(f0, columns, dy.control_set.clone(), &probes).map_err(|e| match e {
            DynamicsError::InvalidControlSet(_) => ScenarioError::invalid("dynamics.control_set", e),
            other => ScenarioError::invalid("dynamics", other),
        })?;

        let mu0 = spec.initial.clone();
        if mu0.dim() != dy.d {
            return Err(ScenarioError::invalid("initial", format!("points in R^{}, system in R^{}", mu0.dim(), dy.d)));
        }
        let budget = spec.budget;
        if !(budget.alpha >= 0.0) || !budget.alpha.is_finite() {
            return Err(ScenarioError::invalid("budget.alpha", "must be finite and >= 0"));
        }
        if !(budget.omega0 >= 0.0 && budget.omega0 <= budget.alpha) {
            return Err(ScenarioError::invalid("budget.omega0", "must lie in [0, alpha]"));
        }
        let target = spec.target.clone();
        check_target(&target, dy.d)?;
        let cost = spec.cost;
        match cost {
            CostSpec::AveragedMinTime if !target.is_set() => {
                return Err(ScenarioError::invalid("cost", "averaged_min_time needs a box or ball target"));
            }
            CostSpec::TerminalW2PlusEffort { horizon } => {
                if target.is_set() {
                    return Err(ScenarioError::invalid("cost", "terminal_w2_plus_effort needs a list of target measures"));
                }
                if !(horizon >= 0.0) || !horizon.is_finite() {
                    return Err(ScenarioError::invalid("cost.horizon", "must be finite and >= 0"));
                }
            }
            _ => {}
        }
        let solver = spec.solver.clone();
        if !(solver.dt > 0.0) || !solver.dt.is_finite() {
            return Err(ScenarioError::invalid("solver.dt", "must be positive"));
        }
        if !(solver.t_lo >= 0.0 && solver.t_hi > solver.t_lo) || !solver.t_hi.is_finite() {
            return Err(ScenarioError::invalid("solver", "need 0 <= t_lo < t_hi < inf"));
        }
        if solver.restarts == 0 {
            return Err(ScenarioError::invalid("solver.restarts", "must be >= 1"));
        }
        if !(solver.tol_target >= 0.0) {
            return Err(ScenarioError::invalid("solver.tol_target", "must be >= 0"));
        }
        Ok(Scenario {
            sys,
            mu0,
            budget,
            target,
            cost,
            solver,
            spec,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_spec(spec)
    }

    /// Canonical JSON of the scenario as given, used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("scenario serializes")
    }
}

fn check_target(target: &TargetSpec, d: usize) -> Result<(), ScenarioError> {
    match target {
        TargetSpec::Measures { measures } => {
            if measures.is_empty() {
                return Err(ScenarioError::invalid("target.measures", "empty list"));
            }
            if let Some(bad) = measures.iter().position(|m| m.dim() != d) {
                return Err(ScenarioError::invalid(&format!("target.measures[{bad}]"), "wrong dimension"));
            }
        }
        TargetSpec::Box { lo, hi } => {
            if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(ScenarioError::invalid("target", "box bounds must have length d with lo <= hi"));
            }
        }
        TargetSpec::Ball { center, radius } => {
            if center.len() != d || !(*radius >= 0.0) {
                return Err(ScenarioError::invalid("target", "ball needs a center in R^d and radius >= 0"));
            }
        }
    }
    Ok(())
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Scenario::parse_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLANAR: &str = r#"{
        "dynamics": {"d": 2, "m": 1,
            "f0": {"kind": "constant", "value": [1, 0]},
            "columns": [{"kind": "constant", "value": [0, 1]}],
            "control_set": {"kind": "ball", "radius": 1}},
        "initial": {"points": [[0, 1], [0, -1]]},
        "budget": {"mode": "linf", "alpha": 2},
        "target": {"kind": "measures", "measures": [{"points": [[2, 1], [2, -1]]}]},
        "cost": {"kind": "min_time"}
    }"#;

    #[test]
    fn parses_example() {
        let sc = Scenario::parse_str(PLANAR).unwrap();
        assert_eq!(sc.budget.alpha, 2.0);
        assert_eq!(sc.sys.dim(), 2);
        assert_eq!(sc.mu0.weights(), &[0.5, 0.5]);
        assert_eq!(sc.solver, SolverSpec::default());
    }

    #[test]
    fn rejects_bad_input() {
        match Scenario::parse_str("") {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let shifted = PLANAR.replace(r#"{"kind": "ball", "radius": 1}"#, r#"{"kind": "box", "lo": [0.1], "hi": [1]}"#);
        let err = Scenario::parse_str(&shifted).unwrap_err();
        assert!(err.to_string().contains("0 ∉ U"), "{err}");
        let l1 = PLANAR.replace(r#""mode": "linf", "alpha": 2"#, r#""mode": "l1", "alpha": 1, "omega0": 2"#);
        assert!(matches!(Scenario::parse_str(&l1), Err(ScenarioError::Invalid { .. })));
        let avg = PLANAR.replace(r#""kind": "min_time""#, r#""kind": "averaged_min_time""#);
        assert!(Scenario::parse_str(&avg).is_err());
    }
}
