//! Generalized control systems `(X, Σ, c, c_f)` on finite state sets: value
//! function, dynamic programming checks and admissible trajectories.
//!
//! `Σ` is represented by the explicit transition list; a pair `(x, y)` with
//! no listed transition has infinite cost.

mod measure;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extended::ExtReal;

pub use measure::{wrap_measure_problem, MeasureInstance, MeasureState, WrapOptions};

/// Comparison slack for sums of costs.
pub const TOL_DPP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GdppError {
    #[error("unknown state {0:?}")]
    UnknownState(String),
    #[error("duplicate state {0:?}")]
    DuplicateState(String),
    #[error("transition {index} has a negative or NaN cost")]
    BadCost { index: usize },
    #[error("composition fails: {first} then {second} has no composite of cost <= {bound}")]
    Composition { first: usize, second: usize, bound: f64 },
    #[error("splitting fails: transition {index} admits no splitting")]
    Splitting { index: usize },
    #[error("state {0:?} has no zero-cost self-transition")]
    MissingSelfLoop(String),
    #[error("trajectory is not admissible: {0}")]
    NotAdmissible(String),
    #[error("unsupported problem: {0}")]
    Unsupported(String),
    #[error("reachable set exceeds the cap of {cap} states")]
    StateExplosion { cap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: String,
    pub to: String,
    pub sigma: String,
    pub cost: ExtReal,
}

/// Serialized instance; states missing from `exit` have infinite exit cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub states: Vec<String>,
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub exit: BTreeMap<String, ExtReal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub sigma: String,
    pub cost: ExtReal,
}

/// A validated instance: composition and splitting hold.
#[derive(Debug, Clone)]
pub struct GeneralizedInstance {
    names: Vec<String>,
    transitions: Vec<Transition>,
    exit: Vec<ExtReal>,
    /// Finite-cost transitions leaving each state, sorted by `(to, sigma)`.
    outgoing: Vec<Vec<usize>>,
    values: Vec<ExtReal>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueResult {
    pub value: ExtReal,
    /// Transition realizing the infimum together with the exit cost of its
    /// endpoint, lexicographically smallest `(to, sigma)` among ties.
    pub transition: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppCheck {
    pub value: ExtReal,
    pub rhs: ExtReal,
    pub holds: bool,
}

fn leq(a: ExtReal, b: ExtReal) -> bool {
    match (a, b) {
        (_, ExtReal::Infinite) => true,
        (ExtReal::Infinite, ExtReal::Finite(_)) => false,
        (ExtReal::Finite(x), ExtReal::Finite(y)) => x <= y + TOL_DPP * (1.0 + y.abs()),
    }
}

fn close(a: ExtReal, b: ExtReal) -> bool {
    leq(a, b) && leq(b, a)
}

impl GeneralizedInstance {
    pub fn new(names: Vec<String>, transitions: Vec<Transition>, exit: Vec<ExtReal>) -> Result<Self, GdppError> {
        let inst = Self::unchecked(names, transitions, exit)?;
        inst.check_composition()?;
        inst.check_splitting()?;
        Ok(inst)
    }

    /// Builds the instance without checking composition and splitting.
    pub fn unchecked(names: Vec<String>, transitions: Vec<Transition>, exit: Vec<ExtReal>) -> Result<Self, GdppError> {
        let n = names.len();
        let mut seen = HashMap::new();
        for name in &names {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(GdppError::DuplicateState(name.clone()));
            }
        }
        assert_eq!(exit.len(), n, "one exit cost per state");
        let mut outgoing = vec![Vec::new(); n];
        for (index, t) in transitions.iter().enumerate() {
            if t.from >= n || t.to >= n {
                return Err(GdppError::UnknownState(format!("#{}", t.from.max(t.to))));
            }
            if let ExtReal::Finite(c) = t.cost {
                if c.is_nan() || c < 0.0 {
                    return Err(GdppError::BadCost { index });
                }
                outgoing[t.from].push(index);
            }
        }
        for out in &mut outgoing {
            out.sort_by(|&a, &b| (transitions[a].to, &transitions[a].sigma).cmp(&(transitions[b].to, &transitions[b].sigma)));
        }
        let mut inst = GeneralizedInstance {
            names,
            transitions,
            exit,
            outgoing,
            values: Vec::new(),
        };
        inst.values = inst.relax_values();
        Ok(inst)
    }

    pub fn from_spec(spec: &InstanceSpec) -> Result<Self, GdppError> {
        let index: HashMap<&str, usize> = spec.states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let lookup = |s: &str| index.get(s).copied().ok_or_else(|| GdppError::UnknownState(s.to_string()));
        let transitions = spec
            .transitions
            .iter()
            .map(|t| {
                Ok(Transition {
                    from: lookup(&t.from)?,
                    to: lookup(&t.to)?,
                    sigma: t.sigma.clone(),
                    cost: t.cost,
                })
            })
            .collect::<Result<Vec<_>, GdppError>>()?;
        let mut exit = vec![ExtReal::Infinite; spec.states.len()];
        for (name, &c) in &spec.exit {
            exit[lookup(name)?] = c;
        }
        Self::new(spec.states.clone(), transitions, exit)
    }

    pub fn to_spec(&self) -> InstanceSpec {
        InstanceSpec {
            states: self.names.clone(),
            transitions: self
                .transitions
                .iter()
                .map(|t| TransitionSpec {
                    from: self.names[t.from].clone(),
                    to: self.names[t.to].clone(),
                    sigma: t.sigma.clone(),
                    cost: t.cost,
                })
                .collect(),
            exit: self
                .names
                .iter()
                .zip(&self.exit)
                .filter(|(_, c)| c.is_finite())
                .map(|(n, &c)| (n.clone(), c))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn state(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, t: usize) -> &Transition {
        &self.transitions[t]
    }

    pub fn exit_cost(&self, x: usize) -> ExtReal {
        self.exit[x]
    }

    /// Finite-cost transitions leaving `x`, sorted by `(to, sigma)`.
    pub fn outgoing(&self, x: usize) -> &[usize] {
        &self.outgoing[x]
    }

    /// Cheapest finite transition `x -> y`, first in `(to, sigma)` order among ties.
    pub fn cheapest(&self, x: usize, y: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for &t in self.outgoing[x].iter().filter(|&&t| self.transitions[t].to == y) {
            if best.map_or(true, |b| self.transitions[t].cost < self.transitions[b].cost) {
                best = Some(t);
            }
        }
        best
    }

    pub fn has_zero_self_loop(&self, x: usize) -> bool {
        self.cheapest(x, x)
            .is_some_and(|t| self.transitions[t].cost == ExtReal::ZERO)
    }

    fn min_cost_matrix(&self) -> Vec<Vec<ExtReal>> {
        let n = self.len();
        let mut m = vec![vec![ExtReal::Infinite; n]; n];
        for t in self.transitions.iter().filter(|t| t.cost.is_finite()) {
            m[t.from][t.to] = m[t.from][t.to].min(t.cost);
        }
        m
    }

    /// Composition: every composable pair of finite transitions has a direct
    /// transition no more expensive than their sum.
    pub fn check_composition(&self) -> Result<(), GdppError> {
        let direct = self.min_cost_matrix();
        for (first, a) in self.transitions.iter().enumerate().filter(|(_, t)| t.cost.is_finite()) {
            for &second in &self.outgoing[a.to] {
                let b = &self.transitions[second];
                let bound = a.cost + b.cost;
                if !leq(direct[a.from][b.to], bound) {
                    return Err(GdppError::Composition {
                        first,
                        second,
                        bound: bound.to_f64(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Splitting: every finite transition splits through some intermediate state
    /// at no extra cost.
    pub fn check_splitting(&self) -> Result<(), GdppError> {
        let direct = self.min_cost_matrix();
        for (index, t) in self.transitions.iter().enumerate().filter(|(_, t)| t.cost.is_finite()) {
            let ok = (0..self.len()).any(|y| leq(direct[t.from][y] + direct[y][t.to], t.cost));
            if !ok {
                return Err(GdppError::Splitting { index });
            }
        }
        Ok(())
    }

    /// Relaxation to a fixpoint starting from the one-transition values.
    fn relax_values(&self) -> Vec<ExtReal> {
        let n = self.len();
        let mut w: Vec<ExtReal> = (0..n)
            .map(|x| {
                self.outgoing[x]
                    .iter()
                    .map(|&t| self.transitions[t].cost + self.exit[self.transitions[t].to])
                    .fold(ExtReal::Infinite, ExtReal::min)
            })
            .collect();
        for _ in 0..=n {
            let mut changed = false;
            for t in self.transitions.iter().filter(|t| t.cost.is_finite()) {
                let cand = t.cost + w[t.to];
                if cand < w[t.from] {
                    w[t.from] = cand;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        w
    }

    /// `V(x) = inf{c(x, y, σ) + c_f(y)}`.
    pub fn value(&self, x: usize) -> ValueResult {
        let value = self.values[x];
        let transition = if value.is_finite() {
            self.outgoing[x]
                .iter()
                .copied()
                .find(|&t| close(self.transitions[t].cost + self.exit[self.transitions[t].to], value))
        } else {
            None
        };
        ValueResult { value, transition }
    }

    pub fn values(&self) -> &[ExtReal] {
        &self.values
    }

    /// Compares `V(x)` with `inf{c(x, y, σ) + V(y)}`.
    pub fn check_dpp(&self, x: usize) -> DppCheck {
        let rhs = self.outgoing[x]
            .iter()
            .map(|&t| self.transitions[t].cost + self.values[self.transitions[t].to])
            .fold(ExtReal::Infinite, ExtReal::min);
        let value = self.values[x];
        DppCheck {
            value,
            rhs,
            holds: close(value, rhs),
        }
    }

    /// `σ` is optimal from `x` to `y` when `V(x) = c(x, y, σ) + V(y)`.
    pub fn is_optimal_transition(&self, t: usize) -> bool {
        let tr = &self.transitions[t];
        self.values[tr.from].is_finite() && close(self.values[tr.from], tr.cost + self.values[tr.to])
    }
}

/// A trajectory on the index grid `0..len`: `gamma[k]` is the state and
/// `sigma[k]` a transition from `gamma[0]` to `gamma[k]`. `witnesses[(k1, k2)]`
/// is a transition `gamma[k1] -> gamma[k2]` for the monotone splitting
/// property, recorded for every pair `k1 <= k2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizedTrajectory {
    pub gamma: Vec<usize>,
    pub sigma: Vec<usize>,
    pub witnesses: BTreeMap<(usize, usize), usize>,
}

impl GeneralizedTrajectory {
    /// Checks admissibility against `inst`.
    pub fn new(
        inst: &GeneralizedInstance,
        gamma: Vec<usize>,
        sigma: Vec<usize>,
        witnesses: BTreeMap<(usize, usize), usize>,
    ) -> Result<Self, GdppError> {
        let traj = GeneralizedTrajectory { gamma, sigma, witnesses };
        traj.validate(inst)?;
        Ok(traj)
    }

    /// Follows the transitions `walk` from `start`. The witness of a step is
    /// the walk's own transition, other witnesses are the cheapest direct
    /// transition between the two states, and `σ(k)` is the
    /// cheapest direct transition `start -> γ(k)` costing at least
    /// `c(σ(j)) + c(witness(j, k))` for every `j < k`.
    pub fn from_walk(inst: &GeneralizedInstance, start: usize, walk: &[usize]) -> Result<Self, GdppError> {
        let loop0 = inst
            .cheapest(start, start)
            .filter(|&t| inst.transition(t).cost == ExtReal::ZERO)
            .ok_or_else(|| GdppError::MissingSelfLoop(inst.names()[start].clone()))?;
        let mut gamma = vec![start];
        let mut here = start;
        for &t in walk {
            let tr = inst.transition(t);
            if tr.from != here {
                return Err(GdppError::NotAdmissible(format!("walk step {t} does not leave state {here}")));
            }
            here = tr.to;
            gamma.push(here);
        }
        let mut witnesses = BTreeMap::new();
        for k1 in 0..gamma.len() {
            for k2 in k1..gamma.len() {
                let w = if k2 == k1 + 1 {
                    walk[k1]
                } else {
                    inst.cheapest(gamma[k1], gamma[k2])
                        .ok_or_else(|| GdppError::NotAdmissible(format!("no transition for pair ({k1}, {k2})")))?
                };
                witnesses.insert((k1, k2), w);
            }
        }
        let mut sigma = vec![loop0];
        for k in 1..gamma.len() {
            let bound = (0..k)
                .map(|j| inst.transition(sigma[j]).cost + inst.transition(witnesses[&(j, k)]).cost)
                .fold(ExtReal::ZERO, |a, b| if b > a { b } else { a });
            let choice = inst
                .outgoing(start)
                .iter()
                .copied()
                .filter(|&s| {
                    let c = inst.transition(s).cost;
                    inst.transition(s).to == gamma[k] && c.is_finite() && leq(bound, c)
                })
                .min_by(|&a, &b| inst.transition(a).cost.partial_cmp(&inst.transition(b).cost).unwrap())
                .ok_or_else(|| GdppError::NotAdmissible(format!("no direct transition to step {k} above the splitting bound")))?;
            sigma.push(choice);
        }
        Self::new(inst, gamma, sigma, witnesses)
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn validate(&self, inst: &GeneralizedInstance) -> Result<(), GdppError> {
        let n = self.gamma.len();
        if n == 0 || self.sigma.len() != n {
            return Err(GdppError::NotAdmissible("gamma and sigma must be nonempty and of equal length".into()));
        }
        let x = self.gamma[0];
        for k in 0..n {
            let t = inst.transition(self.sigma[k]);
            if t.from != x || t.to != self.gamma[k] || !t.cost.is_finite() {
                return Err(GdppError::NotAdmissible(format!("sigma({k}) is not a finite transition from the start")));
            }
        }
        if inst.transition(self.sigma[0]).cost != ExtReal::ZERO {
            return Err(GdppError::NotAdmissible("sigma(0) must have zero cost".into()));
        }
        for k1 in 0..n {
            for k2 in k1..n {
                let w = *self
                    .witnesses
                    .get(&(k1, k2))
                    .ok_or_else(|| GdppError::NotAdmissible(format!("missing witness ({k1}, {k2})")))?;
                let wt = inst.transition(w);
                if wt.from != self.gamma[k1] || wt.to != self.gamma[k2] {
                    return Err(GdppError::NotAdmissible(format!("witness ({k1}, {k2}) joins the wrong states")));
                }
                let lhs = inst.transition(self.sigma[k2]).cost;
                let rhs = inst.transition(self.sigma[k1]).cost + wt.cost;
                if !leq(rhs, lhs) {
                    return Err(GdppError::NotAdmissible(format!("splitting fails for ({k1}, {k2})")));
                }
            }
        }
        Ok(())
    }

    /// `h(k) = c(γ(0), γ(k), σ(k)) + V(γ(k))`.
    pub fn h(&self, inst: &GeneralizedInstance) -> Vec<ExtReal> {
        self.gamma
            .iter()
            .zip(&self.sigma)
            .map(|(&g, &s)| inst.transition(s).cost + inst.values()[g])
            .collect()
    }

    /// Every `σ(k)` is an optimal transition from the start.
    pub fn is_optimal(&self, inst: &GeneralizedInstance) -> bool {
        let v0 = inst.values()[self.gamma[0]];
        v0.is_finite()
            && self
                .gamma
                .iter()
                .zip(&self.sigma)
                .all(|(&g, &s)| close(v0, inst.transition(s).cost + inst.values()[g]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub h: Vec<ExtReal>,
    pub monotone: bool,
    pub constant: bool,
    pub optimal: bool,
    /// On optimal trajectories, whether every recorded witness is an optimal
    /// transition; `true` otherwise.
    pub witnesses_optimal: bool,
}

impl MonotoneReport {
    /// Constancy and optimality agree.
    pub fn consistent(&self) -> bool {
        self.monotone && self.constant == self.optimal && self.witnesses_optimal
    }
}

pub fn check_h_monotone(inst: &GeneralizedInstance, traj: &GeneralizedTrajectory) -> MonotoneReport {
    let h = traj.h(inst);
    let monotone = h.windows(2).all(|w| leq(w[0], w[1]));
    let constant = h.iter().all(|&v| v.is_finite() && close(v, h[0]));
    let optimal = traj.is_optimal(inst);
    let witnesses_optimal = !optimal || traj.witnesses.values().all(|&w| inst.is_optimal_transition(w));
    MonotoneReport {
        h,
        monotone,
        constant,
        optimal,
        witnesses_optimal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalReport {
    /// `V(γ(b)) <= c_f(γ(b))`.
    pub value_below_exit: bool,
    /// `V(γ(b)) = c_f(γ(b))`.
    pub exit_attained: bool,
    /// `V(γ(a)) = c(γ(a), γ(b), σ(b)) + c_f(γ(b))`.
    pub infimum_attained: bool,
    pub optimal: bool,
    /// Optimal with `V(γ(b)) = c_f(γ(b))` implies the infimum is attained.
    pub optimal_implies_attained: bool,
    /// An attained infimum implies optimality.
    pub attained_implies_optimal: bool,
}

impl TerminalReport {
    pub fn holds(&self) -> bool {
        self.value_below_exit && self.optimal_implies_attained && self.attained_implies_optimal
    }
}

pub fn check_terminal(inst: &GeneralizedInstance, traj: &GeneralizedTrajectory) -> Result<TerminalReport, GdppError> {
    let b = *traj.gamma.last().expect("nonempty trajectory");
    if !inst.has_zero_self_loop(b) {
        return Err(GdppError::MissingSelfLoop(inst.names()[b].clone()));
    }
    let a = traj.gamma[0];
    let vb = inst.values()[b];
    let cf = inst.exit_cost(b);
    let exit_attained = close(vb, cf);
    let sigma_b = inst.transition(*traj.sigma.last().expect("nonempty trajectory"));
    let infimum_attained = inst.values()[a].is_finite() && close(inst.values()[a], sigma_b.cost + cf);
    let optimal = traj.is_optimal(inst);
    Ok(TerminalReport {
        value_below_exit: leq(vb, cf),
        exit_attained,
        infimum_attained,
        optimal,
        optimal_implies_attained: !(optimal && exit_attained) || infimum_attained,
        attained_implies_optimal: !infimum_attained || optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(states: &[&str], edges: &[(&str, &str, &str, f64)], exit: &[(&str, f64)]) -> InstanceSpec {
        InstanceSpec {
            states: states.iter().map(|s| s.to_string()).collect(),
            transitions: edges
                .iter()
                .map(|&(f, t, s, c)| TransitionSpec {
                    from: f.into(),
                    to: t.into(),
                    sigma: s.into(),
                    cost: ExtReal::from_f64(c),
                })
                .collect(),
            exit: exit.iter().map(|&(s, c)| (s.to_string(), ExtReal::from_f64(c))).collect(),
        }
    }

    fn chain() -> GeneralizedInstance {
        GeneralizedInstance::from_spec(&spec(
            &["a", "b", "c"],
            &[
                ("a", "a", "stay", 0.0),
                ("b", "b", "stay", 0.0),
                ("c", "c", "stay", 0.0),
                ("a", "b", "s1", 1.0),
                ("b", "c", "s2", 2.0),
                ("a", "c", "s12", 3.0),
            ],
            &[("c", 5.0)],
        ))
        .unwrap()
    }

    #[test]
    fn value_examples() {
        let single = GeneralizedInstance::from_spec(&spec(&["x"], &[("x", "x", "stay", 0.0)], &[("x", 0.0)])).unwrap();
        assert_eq!(single.value(0).value, ExtReal::ZERO);

        let inst = chain();
        assert_eq!(inst.value(0).value, ExtReal::Finite(8.0));
        assert_eq!(inst.value(1).value, ExtReal::Finite(7.0));
        assert_eq!(inst.value(2).value, ExtReal::Finite(5.0));
        let t = inst.value(0).transition.unwrap();
        assert_eq!(inst.transition(t).sigma, "s12");

        let isolated = GeneralizedInstance::from_spec(&spec(&["x", "y"], &[("y", "y", "stay", 0.0)], &[("y", 1.0)])).unwrap();
        assert_eq!(isolated.value(0).value, ExtReal::Infinite);
        let dpp = isolated.check_dpp(0);
        assert!(dpp.holds);
        assert_eq!(dpp.rhs, ExtReal::Infinite);
    }

    #[test]
    fn dpp_on_chain() {
        let inst = chain();
        for x in 0..3 {
            assert!(inst.check_dpp(x).holds);
        }
        assert_eq!(inst.check_dpp(0).rhs, ExtReal::Finite(8.0));
    }

    #[test]
    fn validation_rejects_broken_axioms() {
        let no_composite = spec(
            &["a", "b", "c"],
            &[("a", "a", "s", 0.0), ("b", "b", "s", 0.0), ("c", "c", "s", 0.0), ("a", "b", "s1", 1.0), ("b", "c", "s2", 2.0)],
            &[],
        );
        assert!(matches!(GeneralizedInstance::from_spec(&no_composite), Err(GdppError::Composition { .. })));
        let no_split = spec(&["a", "b"], &[("a", "b", "s", 1.0)], &[]);
        assert!(matches!(GeneralizedInstance::from_spec(&no_split), Err(GdppError::Splitting { .. })));
        let unknown = spec(&["a"], &[("a", "z", "s", 1.0)], &[]);
        assert_eq!(
            GeneralizedInstance::from_spec(&unknown).unwrap_err(),
            GdppError::UnknownState("z".into())
        );
    }

    #[test]
    fn h_along_trajectories() {
        let inst = chain();
        let ab = 3;
        let bc = 4;
        let ac = 5;
        let via_b = GeneralizedTrajectory::from_walk(&inst, 0, &[ab, bc]).unwrap();
        let r = check_h_monotone(&inst, &via_b);
        assert_eq!(r.h, vec![ExtReal::Finite(8.0); 3]);
        assert!(r.constant && r.optimal && r.consistent());

        let direct = GeneralizedTrajectory::from_walk(&inst, 0, &[ac]).unwrap();
        let r = check_h_monotone(&inst, &direct);
        assert!(r.constant && r.optimal);

        // an extra unit-cost loop at b
        let mut wasteful = spec(
            &["a", "b", "c"],
            &[
                ("a", "a", "stay", 0.0),
                ("b", "b", "stay", 0.0),
                ("c", "c", "stay", 0.0),
                ("a", "b", "s1", 1.0),
                ("b", "c", "s2", 2.0),
                ("a", "c", "s12", 3.0),
                ("b", "b", "waste", 1.0),
                ("a", "b", "s1w", 2.0),
                ("a", "c", "s12w", 4.0),
            ],
            &[("c", 5.0)],
        );
        wasteful.transitions.sort_by(|x, y| x.sigma.cmp(&y.sigma));
        let inst = GeneralizedInstance::from_spec(&wasteful).unwrap();
        let id = |s: &str| inst.transitions().iter().position(|t| t.sigma == s).unwrap();
        let traj = GeneralizedTrajectory::from_walk(&inst, 0, &[id("s1"), id("waste"), id("s2")]).unwrap();
        let r = check_h_monotone(&inst, &traj);
        assert_eq!(r.h, vec![ExtReal::Finite(8.0), ExtReal::Finite(8.0), ExtReal::Finite(9.0), ExtReal::Finite(9.0)]);
        assert!(r.monotone && !r.constant && !r.optimal && r.consistent());
    }

    #[test]
    fn terminal_checks() {
        let inst = chain();
        let direct = GeneralizedTrajectory::from_walk(&inst, 0, &[5]).unwrap();
        let r = check_terminal(&inst, &direct).unwrap();
        assert!(r.exit_attained && r.infimum_attained && r.optimal && r.holds());

        // stopping at b where V(b) = 7 < c_f(b) = 9
        let cheaper = GeneralizedInstance::from_spec(&spec(
            &["a", "b", "c"],
            &[
                ("a", "a", "stay", 0.0),
                ("b", "b", "stay", 0.0),
                ("c", "c", "stay", 0.0),
                ("a", "b", "s1", 1.0),
                ("b", "c", "s2", 2.0),
                ("a", "c", "s12", 3.0),
            ],
            &[("b", 9.0), ("c", 5.0)],
        ))
        .unwrap();
        let stop_b = GeneralizedTrajectory::from_walk(&cheaper, 0, &[3]).unwrap();
        let r = check_terminal(&cheaper, &stop_b).unwrap();
        assert!(r.value_below_exit && !r.exit_attained && !r.infimum_attained && r.holds());

        let no_loop = GeneralizedInstance::from_spec(&spec(
            &["a", "b"],
            &[("a", "a", "stay", 0.0), ("a", "b", "go", 1.0)],
            &[("b", 0.0)],
        ))
        .unwrap();
        let go = GeneralizedTrajectory::from_walk(&no_loop, 0, &[1]).unwrap_err();
        assert!(matches!(go, GdppError::NotAdmissible(_)));
        let stay = GeneralizedTrajectory::from_walk(&no_loop, 0, &[]).unwrap();
        assert!(check_terminal(&no_loop, &stay).is_ok());
        let manual = GeneralizedTrajectory {
            gamma: vec![0, 1],
            sigma: vec![0, 1],
            witnesses: BTreeMap::new(),
        };
        assert_eq!(check_terminal(&no_loop, &manual).unwrap_err(), GdppError::MissingSelfLoop("b".into()));
    }

    #[test]
    fn json_round_trip() {
        let s = chain().to_spec();
        let text = serde_json::to_string(&s).unwrap();
        let back: InstanceSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let parsed: InstanceSpec = serde_json::from_str(
            r#"{"states":["p"],"transitions":[{"from":"p","to":"p","sigma":"z","cost":0}],"exit":{"p":"+inf"}}"#,
        )
        .unwrap();
        let inst = GeneralizedInstance::from_spec(&parsed).unwrap();
        assert_eq!(inst.value(0).value, ExtReal::Infinite);
    }
}
