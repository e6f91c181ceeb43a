//! Finite generalized instances built from a scenario by exhaustive search
//! over a per-particle control menu.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use super::{GdppError, GeneralizedInstance, Transition};
use crate::dynamics::TOL_U;
use crate::ensemble::{BudgetMode, Stepper, TOL_FEAS};
use crate::extended::ExtReal;
use crate::linalg::norm;
use crate::measures::{target_distance, DiscreteMeasure};
use crate::scenario::{CostSpec, Scenario};

#[derive(Debug, Clone)]
pub struct WrapOptions {
    /// Controls each particle may pick at every step.
    pub menu: Vec<Vec<f64>>,
    /// Search depth in steps.
    pub steps: usize,
    /// Step length; the scenario's `solver.dt` when absent.
    pub dt: Option<f64>,
    pub cap: usize,
    /// Grid on which states are identified.
    pub quantum: f64,
}

impl Default for WrapOptions {
    fn default() -> Self {
        WrapOptions {
            menu: Vec::new(),
            steps: 0,
            dt: None,
            cap: 100_000,
            quantum: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureState {
    pub positions: Vec<Vec<f64>>,
    pub zeta: Vec<f64>,
    /// Smallest number of steps reaching the state.
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct MeasureInstance {
    pub instance: GeneralizedInstance,
    pub states: Vec<MeasureState>,
    pub initial: usize,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// States are particle lists (with their spent effort under cumulative
/// budgets) reachable within `opts.steps` menu steps. One-step edges cost
/// `dt` (minimum time) or `dt μ(R^d ∖ S)` (averaged minimum time); the
/// transitions are their shortest-path closure plus a zero-cost standstill
/// at every state, so composition and splitting hold by construction. The exit cost is
/// zero on the target and `+inf` elsewhere; target states are not expanded.
pub fn wrap_measure_problem(sc: &Scenario, opts: &WrapOptions) -> Result<MeasureInstance, GdppError> {
    let averaged = match sc.cost {
        CostSpec::MinTime => false,
        CostSpec::AveragedMinTime => true,
        CostSpec::TerminalW2PlusEffort { .. } => {
            return Err(GdppError::Unsupported("fixed-horizon costs have no finite-menu form".into()))
        }
    };
    let dt = opts.dt.unwrap_or(sc.solver.dt);
    let menu: Vec<&Vec<f64>> = opts
        .menu
        .iter()
        .filter(|u| u.len() == sc.sys.control_dim() && sc.sys.control_set().distance(u) <= TOL_U)
        .collect();
    let n = sc.mu0.len();
    let weights = sc.mu0.weights();
    let alpha = sc.budget.alpha;
    let track_zeta = sc.budget.mode != BudgetMode::Linf;
    let key = |pos: &[Vec<f64>], zeta: &[f64]| -> Vec<i64> {
        let mut k: Vec<i64> = pos.iter().flatten().map(|c| (c / opts.quantum).round() as i64).collect();
        if track_zeta {
            k.extend(zeta.iter().map(|z| (z / opts.quantum).round() as i64));
        }
        k
    };
    let in_target = |pos: &[Vec<f64>]| {
        target_distance(&DiscreteMeasure::from_parts(pos.to_vec(), weights.to_vec()), &sc.target) <= sc.solver.tol_target
    };
    let outside = |pos: &[Vec<f64>]| -> f64 {
        pos.iter()
            .zip(weights)
            .filter(|(x, _)| sc.target.point_distance(x) > sc.solver.tol_target)
            .map(|(_, w)| w)
            .sum()
    };

    let mut states = vec![MeasureState {
        positions: sc.mu0.points().to_vec(),
        zeta: vec![sc.budget.omega0; n],
        depth: 0,
    }];
    let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
    index.insert(key(&states[0].positions, &states[0].zeta), 0);
    let mut edges: Vec<HashMap<usize, f64>> = vec![HashMap::new()];
    let mut stepper = Stepper::new(sc.sys.dim());
    let mut head = 0;
    while head < states.len() {
        let cur = states[head].clone();
        if cur.depth >= opts.steps || in_target(&cur.positions) || menu.is_empty() {
            head += 1;
            continue;
        }
        let cost = if averaged { dt * outside(&cur.positions) } else { dt };
        let mut choice = vec![0usize; n];
        'combos: loop {
            let controls: Vec<&Vec<f64>> = choice.iter().map(|&c| menu[c]).collect();
            let feasible = match sc.budget.mode {
                BudgetMode::Linf => controls.iter().zip(weights).map(|(u, w)| w * norm(u)).sum::<f64>() <= alpha + TOL_FEAS,
                BudgetMode::L1 => {
                    let spent: f64 = cur.zeta.iter().zip(weights).map(|(z, w)| z * w).sum();
                    spent + dt * controls.iter().zip(weights).map(|(u, w)| w * norm(u)).sum::<f64>() <= alpha + TOL_FEAS
                }
                BudgetMode::Lagrangian => controls.iter().zip(&cur.zeta).all(|(u, z)| z + dt * norm(u) <= alpha + TOL_FEAS),
            };
            if feasible {
                let mut pos = cur.positions.clone();
                let mut ok = true;
                for (x, u) in pos.iter_mut().zip(&controls) {
                    ok &= stepper.step(&sc.sys, x, u, dt).is_ok() && x.iter().all(|c| c.is_finite());
                }
                if ok {
                    let zeta: Vec<f64> = cur.zeta.iter().zip(&controls).map(|(z, u)| z + norm(u) * dt).collect();
                    let k = key(&pos, &zeta);
                    let to = match index.get(&k) {
                        Some(&t) => t,
                        None => {
                            if states.len() >= opts.cap {
                                return Err(GdppError::StateExplosion { cap: opts.cap });
                            }
                            states.push(MeasureState {
                                positions: pos,
                                zeta,
                                depth: cur.depth + 1,
                            });
                            edges.push(HashMap::new());
                            index.insert(k, states.len() - 1);
                            states.len() - 1
                        }
                    };
                    let e = edges[head].entry(to).or_insert(f64::INFINITY);
                    *e = e.min(cost);
                }
            }
            for slot in choice.iter_mut() {
                *slot += 1;
                if *slot < menu.len() {
                    continue 'combos;
                }
                *slot = 0;
            }
            break;
        }
        head += 1;
    }

    let count = states.len();
    let mut transitions = Vec::new();
    for s in 0..count {
        let mut best = vec![f64::INFINITY; count];
        best[s] = 0.0;
        let mut heap = BinaryHeap::from([Entry(0.0, s)]);
        while let Some(Entry(c, v)) = heap.pop() {
            if c > best[v] {
                continue;
            }
            let mut next: Vec<(&usize, &f64)> = edges[v].iter().collect();
            next.sort_by_key(|(t, _)| **t);
            for (&t, &w) in next {
                let nc = c + w;
                if nc < best[t] {
                    best[t] = nc;
                    heap.push(Entry(nc, t));
                }
            }
        }
        transitions.push(Transition {
            from: s,
            to: s,
            sigma: "stay".into(),
            cost: ExtReal::ZERO,
        });
        for (t, &c) in best.iter().enumerate() {
            if t != s && c.is_finite() {
                transitions.push(Transition {
                    from: s,
                    to: t,
                    sigma: "path".into(),
                    cost: ExtReal::Finite(c),
                });
            }
        }
    }
    let exit = states
        .iter()
        .map(|st| if in_target(&st.positions) { ExtReal::ZERO } else { ExtReal::Infinite })
        .collect();
    let names = (0..count).map(|i| format!("s{i}")).collect();
    let instance = GeneralizedInstance::new(names, transitions, exit)?;
    Ok(MeasureInstance {
        instance,
        states,
        initial: 0,
    })
}
