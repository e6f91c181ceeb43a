//! Minimum-time, averaged minimum-time and terminal-cost solvers on discrete
//! measures, with the DPP-based check of their optima.

mod search;
mod validate;

use serde::Serialize;
use thiserror::Error;

use crate::ensemble::{integrate, BudgetMode, ControlSignal, Ensemble, EnsembleError, FeasibilityReport, TimeGrid};
use crate::extended::ExtReal;
use crate::gdpp::{wrap_measure_problem, GdppError, WrapOptions};
use crate::measures::{target_distance, DiscreteMeasure};
use crate::scenario::{CostSpec, Scenario};

pub use validate::{validate_optimum, DppReport, DppSample, TOL_EFFORT_SEARCH};

use search::{Budget, Objective, Outcome, Problem, SearchConfig};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("scenario cost is {found}, this solver handles {expected}")]
    WrongCost { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub steps: usize,
    pub horizon: f64,
    pub residual: f64,
    pub reached: bool,
}

/// Comparison against the exhaustive finite-menu search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheck {
    pub menu_value: ExtReal,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Diagnostics {
    pub restarts_used: usize,
    pub sweeps: usize,
    /// Every horizon tried by the bisection, in order.
    pub trace: Vec<TraceEntry>,
    /// Smallest inner residual seen at the largest horizon.
    pub best_residual: f64,
    /// Final `(failing, reaching)` step counts of the bisection.
    pub bracket: Option<(usize, usize)>,
    pub crosscheck: Option<CrossCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub value: ExtReal,
    /// Horizon of the returned trajectory; `+inf` when none reaches the target.
    pub horizon: ExtReal,
    pub dt: f64,
    pub ensemble: Option<Ensemble>,
    /// `Σ w_i (ζ_i(T) - ζ_i(0))`.
    pub effort_total: f64,
    /// Target distance of the terminal measure.
    pub terminal_cost: f64,
    pub feasibility: Option<FeasibilityReport>,
    pub diagnostics: Diagnostics,
}

impl SolveResult {
    /// The horizon cap was reached without meeting the target.
    pub fn horizon_exhausted(&self) -> bool {
        !self.value.is_finite()
    }
}

/// The summary written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultSummary {
    pub value: ExtReal,
    pub mode: BudgetMode,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub horizon: ExtReal,
    pub effort_total: f64,
    pub terminal_cost: f64,
    pub seed: u64,
    pub restarts: usize,
}

pub fn summarize(sc: &Scenario, res: &SolveResult) -> ResultSummary {
    ResultSummary {
        value: res.value,
        mode: sc.budget.mode,
        alpha: sc.budget.alpha,
        horizon: res.horizon,
        effort_total: res.effort_total,
        terminal_cost: res.terminal_cost,
        seed: sc.solver.seed,
        restarts: sc.solver.restarts,
    }
}

fn cost_name(c: &CostSpec) -> &'static str {
    match c {
        CostSpec::MinTime => "min_time",
        CostSpec::AveragedMinTime => "averaged_min_time",
        CostSpec::TerminalW2PlusEffort { .. } => "terminal_w2_plus_effort",
    }
}

/// Starting point of a (re-)solve: particle positions and spent effort.
#[derive(Debug, Clone)]
pub(crate) struct Start {
    pub mu: DiscreteMeasure,
    pub offsets: Vec<f64>,
}

impl Start {
    fn initial(sc: &Scenario) -> Self {
        Start {
            mu: sc.mu0.clone(),
            offsets: vec![sc.budget.omega0; sc.mu0.len()],
        }
    }
}

fn config(sc: &Scenario) -> SearchConfig {
    SearchConfig {
        restarts: sc.solver.restarts,
        seed: sc.solver.seed,
        max_sweeps: sc.solver.max_sweeps,
    }
}

fn problem<'a>(sc: &'a Scenario, start: &Start, objective: Objective, steps: usize, dt: f64) -> Problem<'a> {
    Problem {
        sys: &sc.sys,
        points: start.mu.points().to_vec(),
        weights: start.mu.weights().to_vec(),
        offsets: start.offsets.clone(),
        budget: Budget {
            mode: sc.budget.mode,
            alpha: sc.budget.alpha,
        },
        target: &sc.target,
        objective,
        steps,
        dt,
        tol_target: sc.solver.tol_target,
    }
}

fn finish(
    sc: &Scenario,
    start: &Start,
    value: ExtReal,
    steps: usize,
    dt: f64,
    controls: &ControlSignal,
    diagnostics: Diagnostics,
) -> Result<SolveResult, SolveError> {
    let grid = TimeGrid::with_step(0.0, dt, steps)?;
    let ens = integrate(&sc.sys, &start.mu, controls, grid, Some(&start.offsets))?;
    let effort_total = ens.omega(steps) - ens.omega(0);
    let terminal_cost = target_distance(&ens.terminal(), &sc.target);
    let feasibility = ens.check_feasibility(sc.budget.mode, sc.budget.alpha);
    Ok(SolveResult {
        value,
        horizon: ExtReal::Finite(steps as f64 * dt),
        dt,
        effort_total,
        terminal_cost,
        feasibility: Some(feasibility),
        ensemble: Some(ens),
        diagnostics,
    })
}

fn infinite(dt: f64, diagnostics: Diagnostics) -> SolveResult {
    SolveResult {
        value: ExtReal::Infinite,
        horizon: ExtReal::Infinite,
        dt,
        ensemble: None,
        effort_total: 0.0,
        terminal_cost: diagnostics.best_residual,
        feasibility: None,
        diagnostics,
    }
}

/// Result of the horizon bisection.
pub(crate) struct Bisection {
    pub steps: Option<usize>,
    pub outcome: Option<Outcome>,
    pub diagnostics: Diagnostics,
}

/// Smallest step count whose inner optimum reaches the target. `hint` is
/// tested first together with `hint - 1`. When the largest horizon fails,
/// every step count is tried with the greedy start alone, since with a drift
/// the target may be reachable only at intermediate horizons.
pub(crate) fn bisect_steps(sc: &Scenario, start: &Start, hint: Option<usize>) -> Bisection {
    let dt = sc.solver.dt;
    let cfg = config(sc);
    let n_lo = (sc.solver.t_lo / dt - 1e-9).ceil().max(0.0) as usize;
    let n_hi = (sc.solver.t_hi / dt + 1e-9).floor() as usize;
    let mut diag = Diagnostics::default();
    let mut cache: std::collections::BTreeMap<usize, Outcome> = Default::default();
    let eval = |n: usize, diag: &mut Diagnostics, cache: &mut std::collections::BTreeMap<usize, Outcome>| -> bool {
        let out = problem(sc, start, Objective::Reach, n, dt).optimize(cfg, None);
        let reached = out.score.0 <= sc.solver.tol_target;
        diag.restarts_used += out.restarts_used;
        diag.sweeps += out.sweeps;
        diag.trace.push(TraceEntry {
            steps: n,
            horizon: n as f64 * dt,
            residual: out.score.0,
            reached,
        });
        cache.insert(n, out);
        reached
    };
    let done = |n: usize, mut diag: Diagnostics, cache: &mut std::collections::BTreeMap<usize, Outcome>, lo: Option<usize>| {
        diag.bracket = lo.map(|l| (l, n));
        diag.best_residual = cache[&n].score.0;
        Bisection {
            steps: Some(n),
            outcome: cache.remove(&n),
            diagnostics: diag,
        }
    };
    if eval(n_lo, &mut diag, &mut cache) {
        return done(n_lo, diag, &mut cache, None);
    }
    let mut top_reached = n_hi > n_lo && eval(n_hi, &mut diag, &mut cache);
    let mut n_hi = n_hi;
    if !top_reached && n_hi > n_lo + 1 {
        let found = (n_lo + 1..n_hi).find_map(|n| problem(sc, start, Objective::Reach, n, dt).greedy_outcome().map(|o| (n, o)));
        if let Some((n, out)) = found {
            diag.restarts_used += 1;
            diag.trace.push(TraceEntry {
                steps: n,
                horizon: n as f64 * dt,
                residual: out.score.0,
                reached: true,
            });
            cache.insert(n, out);
            n_hi = n;
            top_reached = true;
        }
    }
    if !top_reached {
        let top = n_hi.max(n_lo);
        diag.best_residual = cache[&top].score.0;
        diag.bracket = None;
        return Bisection {
            steps: None,
            outcome: None,
            diagnostics: diag,
        };
    }
    let (mut lo, mut hi) = (n_lo, n_hi);
    if let Some(h) = hint.filter(|&h| h > lo && h < hi) {
        if eval(h, &mut diag, &mut cache) {
            hi = h;
            if h - 1 > lo {
                if eval(h - 1, &mut diag, &mut cache) {
                    hi = h - 1;
                } else {
                    lo = h - 1;
                }
            }
        } else {
            lo = h;
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eval(mid, &mut diag, &mut cache) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    done(hi, diag, &mut cache, Some(lo))
}

pub(crate) fn min_time_from(sc: &Scenario, start: &Start, hint: Option<usize>) -> Result<SolveResult, SolveError> {
    let dt = sc.solver.dt;
    let b = bisect_steps(sc, start, hint);
    match (b.steps, b.outcome) {
        (Some(n), Some(out)) => finish(sc, start, ExtReal::Finite(n as f64 * dt), n, dt, &out.controls, b.diagnostics),
        _ => Ok(infinite(dt, b.diagnostics)),
    }
}

fn require(sc: &Scenario, expected: &'static str, ok: bool) -> Result<(), SolveError> {
    if ok {
        Ok(())
    } else {
        Err(SolveError::WrongCost {
            expected,
            found: cost_name(&sc.cost),
        })
    }
}

/// Outer bisection on `T = n dt` over `[t_lo, t_hi]` with the inner
/// target-distance minimization.
pub fn solve_min_time(sc: &Scenario) -> Result<SolveResult, SolveError> {
    require(sc, "min_time", sc.cost == CostSpec::MinTime)?;
    let mut res = min_time_from(sc, &Start::initial(sc), None)?;
    res.diagnostics.crosscheck = crosscheck(sc, &res);
    Ok(res)
}

/// Minimum time under the cumulative budget `ω(T) <= α`.
pub fn solve_min_time_l1(sc: &Scenario) -> Result<SolveResult, SolveError> {
    require(sc, "min_time with an l1 budget", sc.cost == CostSpec::MinTime && sc.budget.mode == BudgetMode::L1)?;
    solve_min_time(sc)
}

pub(crate) fn averaged_from(sc: &Scenario, start: &Start, hint: Option<usize>) -> Result<SolveResult, SolveError> {
    let dt = sc.solver.dt;
    let b = bisect_steps(sc, start, hint);
    let (Some(n), Some(reach)) = (b.steps, b.outcome) else {
        return Ok(infinite(dt, b.diagnostics));
    };
    let p = problem(sc, start, Objective::Averaged, n, dt);
    let out = p.optimize(config(sc), Some(&reach.controls));
    let mut diag = b.diagnostics;
    diag.restarts_used += out.restarts_used;
    diag.sweeps += out.sweeps;
    let value = if out.score.0 == 0.0 { ExtReal::Finite(out.score.1) } else { ExtReal::Infinite };
    finish(sc, start, value, n, dt, &out.controls, diag)
}

/// Minimizes `∫ μ_t(R^d ∖ S) dt` on the horizon of the minimum-time solution.
pub fn solve_averaged_min_time(sc: &Scenario) -> Result<SolveResult, SolveError> {
    require(sc, "averaged_min_time", sc.cost == CostSpec::AveragedMinTime)?;
    let mut res = averaged_from(sc, &Start::initial(sc), None)?;
    res.diagnostics.crosscheck = crosscheck(sc, &res);
    Ok(res)
}

/// Step count and step length for a fixed horizon.
pub(crate) fn horizon_grid(horizon: f64, dt: f64) -> (usize, f64) {
    let n = (horizon / dt).round() as usize;
    if n == 0 || horizon == 0.0 {
        (0, dt)
    } else {
        (n, horizon / n as f64)
    }
}

pub(crate) fn effort_from(sc: &Scenario, start: &Start, steps: usize, dt: f64) -> Result<SolveResult, SolveError> {
    let p = problem(sc, start, Objective::Effort, steps, dt);
    let out = p.optimize(config(sc), None);
    let diag = Diagnostics {
        restarts_used: out.restarts_used,
        sweeps: out.sweeps,
        best_residual: out.score.0,
        ..Default::default()
    };
    let mut res = finish(sc, start, ExtReal::Finite(out.score.0), steps, dt, &out.controls, diag)?;
    res.horizon = ExtReal::Finite(steps as f64 * dt);
    Ok(res)
}

/// Minimizes `∫ θ dt + min_θ W2(μ_T, θ)` on the fixed horizon of the cost.
pub fn solve_advertising(sc: &Scenario) -> Result<SolveResult, SolveError> {
    let CostSpec::TerminalW2PlusEffort { horizon } = sc.cost else {
        return Err(SolveError::WrongCost {
            expected: "terminal_w2_plus_effort",
            found: cost_name(&sc.cost),
        });
    };
    let (steps, dt) = horizon_grid(horizon, sc.solver.dt);
    effort_from(sc, &Start::initial(sc), steps, dt)
}

/// Dispatches on the scenario's cost.
pub fn solve(sc: &Scenario) -> Result<SolveResult, SolveError> {
    match sc.cost {
        CostSpec::MinTime => solve_min_time(sc),
        CostSpec::AveragedMinTime => solve_averaged_min_time(sc),
        CostSpec::TerminalW2PlusEffort { .. } => solve_advertising(sc),
    }
}

/// State cap of the automatic cross-check; the closure is quadratic in it.
const CROSSCHECK_CAP: usize = 400;

/// Runs the finite-menu search when the scenario declares a menu.
fn crosscheck(sc: &Scenario, res: &SolveResult) -> Option<CrossCheck> {
    let menu = sc.solver.menu.clone()?;
    let n_hi = (sc.solver.t_hi / sc.solver.dt + 1e-9).floor() as usize;
    let opts = WrapOptions {
        menu,
        steps: n_hi,
        cap: CROSSCHECK_CAP,
        ..WrapOptions::default()
    };
    let inst = match wrap_measure_problem(sc, &opts) {
        Ok(inst) => inst,
        Err(GdppError::StateExplosion { .. }) => return None,
        Err(_) => return None,
    };
    let menu_value = inst.instance.value(inst.initial).value;
    let tol = 2.0 * sc.solver.dt;
    let agrees = match (menu_value, res.value) {
        (ExtReal::Finite(a), ExtReal::Finite(b)) => (a - b).abs() <= tol + 1e-9,
        // the menu is a restriction of the admissible controls
        (ExtReal::Infinite, _) => true,
        (ExtReal::Finite(_), ExtReal::Infinite) => false,
    };
    Some(CrossCheck { menu_value, agrees })
}

/// Wraps a given trajectory as a result, valued by the scenario's cost.
pub fn result_from_ensemble(sc: &Scenario, ens: Ensemble) -> SolveResult {
    let steps = ens.grid().steps();
    let dt = ens.grid().dt();
    let terminal_cost = target_distance(&ens.terminal(), &sc.target);
    let effort_total = ens.omega(steps) - ens.omega(0);
    let value = match sc.cost {
        CostSpec::MinTime if terminal_cost <= sc.solver.tol_target => ExtReal::Finite(steps as f64 * dt),
        CostSpec::AveragedMinTime if terminal_cost <= sc.solver.tol_target => ExtReal::Finite(validate::outside_integral(sc, &ens, steps)),
        CostSpec::TerminalW2PlusEffort { .. } => ExtReal::Finite(effort_total + terminal_cost),
        _ => ExtReal::Infinite,
    };
    SolveResult {
        value,
        horizon: ExtReal::Finite(steps as f64 * dt),
        dt,
        effort_total,
        terminal_cost,
        feasibility: Some(ens.check_feasibility(sc.budget.mode, sc.budget.alpha)),
        ensemble: Some(ens),
        diagnostics: Diagnostics::default(),
    }
}
