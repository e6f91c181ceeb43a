//! Inner optimizer: piecewise-constant controls on a fixed grid, a closed-loop
//! greedy warm start, and multi-start coordinate perturbation descent with
//! projection onto the budget set.

use std::cmp::Ordering;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{ControlSet, ControlSystem};
use crate::ensemble::{BudgetMode, ControlSignal, Stepper};
use crate::linalg::{min_norm_solve, norm};
use crate::measures::{target_distance, DiscreteMeasure, TargetSpec};
use crate::transport::wasserstein;

/// Consecutive perturbation levels without progress before a restart stops.
const STAGNATION_LEVELS: usize = 6;
/// Smallest perturbation, relative to `R_U`.
const MIN_DELTA: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Objective {
    /// Distance of the terminal measure to the target.
    Reach,
    /// `(max(0, reach - tol), ∫ μ_t(R^d ∖ S) dt)`, compared lexicographically.
    Averaged,
    /// `∫ θ dt + min W2` to the target list.
    Effort,
}

/// Lexicographic score; lower is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Score(pub f64, pub f64);

impl Score {
    fn cmp(&self, other: &Score) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.total_cmp(&other.1))
    }

    fn better(&self, other: &Score) -> bool {
        self.cmp(other) == Ordering::Less
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Budget {
    pub mode: BudgetMode,
    pub alpha: f64,
}

pub(crate) struct Problem<'a> {
    pub sys: &'a ControlSystem,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Effort already spent by each particle.
    pub offsets: Vec<f64>,
    pub budget: Budget,
    pub target: &'a TargetSpec,
    pub objective: Objective,
    pub steps: usize,
    pub dt: f64,
    pub tol_target: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SearchConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub controls: ControlSignal,
    pub score: Score,
    pub restarts_used: usize,
    pub sweeps: usize,
}

/// Controls stored as `u[i][k * m + j]`.
#[derive(Clone)]
struct State {
    u: Vec<Vec<f64>>,
    /// Positions `x[i][k * d + r]`, `k = 0..=steps`.
    x: Vec<Vec<f64>>,
    score: Score,
}

impl<'a> Problem<'a> {
    fn d(&self) -> usize {
        self.sys.dim()
    }

    fn m(&self) -> usize {
        self.sys.control_dim()
    }

    fn set(&self) -> &ControlSet {
        self.sys.control_set()
    }

    pub(crate) fn done(&self, s: Score) -> bool {
        self.objective == Objective::Reach && s.0 <= self.tol_target
    }

    fn spent(&self) -> f64 {
        self.offsets.iter().zip(&self.weights).map(|(z, w)| z * w).sum()
    }

    /// Integrates one particle from step `from` onwards, writing into `xs`.
    fn roll(&self, u: &[f64], xs: &mut [f64], from: usize, stepper: &mut Stepper) -> bool {
        let (d, m) = (self.d(), self.m());
        let mut cur = xs[from * d..(from + 1) * d].to_vec();
        for k in from..self.steps {
            if stepper.step(self.sys, &mut cur, &u[k * m..(k + 1) * m], self.dt).is_err() || cur.iter().any(|c| !c.is_finite()) {
                return false;
            }
            xs[(k + 1) * d..(k + 2) * d].copy_from_slice(&cur);
        }
        true
    }

    fn terminal(&self, xs: &[Vec<f64>]) -> DiscreteMeasure {
        let d = self.d();
        let n = self.steps;
        DiscreteMeasure::from_parts(xs.iter().map(|x| x[n * d..(n + 1) * d].to_vec()).collect(), self.weights.clone())
    }

    fn outside_time(&self, x: &[f64]) -> f64 {
        let d = self.d();
        (0..self.steps)
            .filter(|&k| self.target.point_distance(&x[k * d..(k + 1) * d]) > self.tol_target)
            .count() as f64
            * self.dt
    }

    fn particle_effort(&self, u: &[f64]) -> f64 {
        let m = self.m();
        (0..self.steps).map(|k| norm(&u[k * m..(k + 1) * m])).sum::<f64>() * self.dt
    }

    fn score(&self, u: &[Vec<f64>], x: &[Vec<f64>]) -> Score {
        let reach = target_distance(&self.terminal(x), self.target);
        match self.objective {
            Objective::Reach => Score(reach, 0.0),
            Objective::Averaged => {
                let outside: f64 = x.iter().zip(&self.weights).map(|(xi, w)| w * self.outside_time(xi)).sum();
                Score((reach - self.tol_target).max(0.0), outside)
            }
            Objective::Effort => {
                let effort: f64 = u.iter().zip(&self.weights).map(|(ui, w)| w * self.particle_effort(ui)).sum();
                Score(effort + reach, 0.0)
            }
        }
    }

    fn build(&self, u: Vec<Vec<f64>>) -> State {
        let d = self.d();
        let mut stepper = Stepper::new(d);
        let mut x = Vec::with_capacity(u.len());
        let mut ok = true;
        for (i, ui) in u.iter().enumerate() {
            let mut xi = vec![0.0; (self.steps + 1) * d];
            xi[..d].copy_from_slice(&self.points[i]);
            ok &= self.roll(ui, &mut xi, 0, &mut stepper);
            x.push(xi);
        }
        let score = if ok { self.score(&u, &x) } else { Score(f64::INFINITY, f64::INFINITY) };
        State { u, x, score }
    }

    /// Rescales the full control array into the budget set.
    fn project_budget(&self, u: &mut [Vec<f64>]) {
        let m = self.m();
        let alpha = self.budget.alpha;
        match self.budget.mode {
            BudgetMode::Linf => {
                for k in 0..self.steps {
                    let theta: f64 = u.iter().zip(&self.weights).map(|(ui, w)| w * norm(&ui[k * m..(k + 1) * m])).sum();
                    if theta > alpha {
                        let s = if theta > 0.0 { alpha / theta } else { 0.0 };
                        for ui in u.iter_mut() {
                            ui[k * m..(k + 1) * m].iter_mut().for_each(|c| *c *= s);
                        }
                    }
                }
            }
            BudgetMode::L1 => {
                let avail = (alpha - self.spent()).max(0.0);
                let effort: f64 = u.iter().zip(&self.weights).map(|(ui, w)| w * self.particle_effort(ui)).sum();
                if effort > avail {
                    let s = avail / effort;
                    u.iter_mut().flatten().for_each(|c| *c *= s);
                }
            }
            BudgetMode::Lagrangian => {
                for (ui, &z0) in u.iter_mut().zip(&self.offsets) {
                    let mut left = (alpha - z0).max(0.0);
                    for k in 0..self.steps {
                        let cell = &mut ui[k * m..(k + 1) * m];
                        let cost = norm(cell) * self.dt;
                        if cost > left {
                            let s = if cost > 0.0 { left / cost } else { 0.0 };
                            cell.iter_mut().for_each(|c| *c *= s);
                            left = 0.0;
                        } else {
                            left -= cost;
                        }
                    }
                }
            }
        }
    }

    /// Where particle `i` at `x` is heading.
    fn goal(&self, x: &[f64], assigned: Option<&Vec<f64>>) -> Vec<f64> {
        match (self.target, assigned) {
            (TargetSpec::Box { lo, hi }, _) => x.iter().zip(lo.iter().zip(hi)).map(|(&c, (&l, &h))| c.clamp(l, h)).collect(),
            (TargetSpec::Ball { center, radius }, _) => {
                let off: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let n = norm(&off);
                if n <= *radius {
                    x.to_vec()
                } else {
                    center.iter().zip(&off).map(|(c, o)| c + o * radius / n).collect()
                }
            }
            (TargetSpec::Measures { .. }, Some(g)) => g.clone(),
            (TargetSpec::Measures { .. }, None) => x.to_vec(),
        }
    }

    /// Barycentric images of the initial particles under an optimal plan to
    /// the nearest target measure.
    fn assignment(&self) -> Option<Vec<Vec<f64>>> {
        let TargetSpec::Measures { measures } = self.target else {
            return None;
        };
        let mu = DiscreteMeasure::from_parts(self.points.clone(), self.weights.clone());
        let (nearest, plan) = measures
            .iter()
            .map(|nu| (nu, wasserstein(&mu, nu, 2.0)))
            .min_by(|a, b| a.1.distance.total_cmp(&b.1.distance))?;
        let d = self.d();
        let mut goals = vec![vec![0.0; d]; self.points.len()];
        for &(i, j, mass) in &plan.plan.coupling {
            for r in 0..d {
                goals[i][r] += mass * nearest.points()[j][r] / self.weights[i];
            }
        }
        Some(goals)
    }

    /// Closed loop: at each step every particle requests the velocity reaching
    /// its goal within one step, realized by the min-norm control projected
    /// onto `U` and then onto the remaining budget.
    fn greedy(&self) -> Vec<Vec<f64>> {
        let (d, m, n) = (self.d(), self.m(), self.points.len());
        let goals = self.assignment();
        let mut u = vec![vec![0.0; self.steps * m]; n];
        let mut x = self.points.clone();
        let mut used = self.offsets.clone();
        let mut stepper = Stepper::new(d);
        for k in 0..self.steps {
            let mut cell: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let goal = self.goal(&x[i], goals.as_ref().map(|g| &g[i]));
                    let (Ok(f0), Ok(a)) = (self.sys.eval_drift(&x[i]), self.sys.eval_matrix(&x[i])) else {
                        return vec![0.0; m];
                    };
                    if m == 0 {
                        return Vec::new();
                    }
                    let b = DVector::from_iterator(d, (0..d).map(|r| (goal[r] - x[i][r]) / self.dt - f0[r]));
                    let sol = min_norm_solve(&a, &b).solution;
                    self.set().project(sol.as_slice())
                })
                .collect();
            match self.budget.mode {
                BudgetMode::Linf => {
                    let theta: f64 = cell.iter().zip(&self.weights).map(|(c, w)| w * norm(c)).sum();
                    if theta > self.budget.alpha {
                        let s = self.budget.alpha / theta;
                        cell.iter_mut().flatten().for_each(|c| *c *= s);
                    }
                }
                BudgetMode::L1 => {
                    let spent: f64 = used.iter().zip(&self.weights).map(|(z, w)| z * w).sum();
                    let avail = (self.budget.alpha - spent).max(0.0);
                    let cost: f64 = cell.iter().zip(&self.weights).map(|(c, w)| w * norm(c)).sum::<f64>() * self.dt;
                    if cost > avail {
                        let s = avail / cost;
                        cell.iter_mut().flatten().for_each(|c| *c *= s);
                    }
                }
                BudgetMode::Lagrangian => {
                    for (c, z) in cell.iter_mut().zip(&used) {
                        let avail = (self.budget.alpha - z).max(0.0);
                        let cost = norm(c) * self.dt;
                        if cost > avail {
                            let s = avail / cost;
                            c.iter_mut().for_each(|v| *v *= s);
                        }
                    }
                }
            }
            for i in 0..n {
                u[i][k * m..(k + 1) * m].copy_from_slice(&cell[i]);
                used[i] += norm(&cell[i]) * self.dt;
                if stepper.step(self.sys, &mut x[i], &cell[i], self.dt).is_err() {
                    return vec![vec![0.0; self.steps * m]; n];
                }
            }
        }
        u
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let m = self.m();
        let reach = self.set().max_norm();
        let scale: f64 = rng.gen();
        let mut u: Vec<Vec<f64>> = (0..self.points.len())
            .map(|_| {
                let mut ui = vec![0.0; self.steps * m];
                for k in 0..self.steps {
                    let raw: Vec<f64> = (0..m).map(|_| scale * reach * rng.gen_range(-1.0..=1.0)).collect();
                    ui[k * m..(k + 1) * m].copy_from_slice(&self.set().project(&raw));
                }
                ui
            })
            .collect();
        self.project_budget(&mut u);
        u
    }

    fn start(&self, restart: usize, seed: u64) -> Vec<Vec<f64>> {
        match restart {
            0 => self.greedy(),
            1 => vec![vec![0.0; self.steps * self.m()]; self.points.len()],
            r => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                self.random_start(&mut rng)
            }
        }
    }

    /// Shrinks the perturbed block `[s, e)` of particle `i` back into the budget.
    fn fit_block(&self, st: &State, i: usize, s: usize, e: usize, block: &mut [f64]) {
        let m = self.m();
        let alpha = self.budget.alpha;
        let old = &st.u[i];
        match self.budget.mode {
            BudgetMode::Linf => {
                for k in s..e {
                    let others: f64 = st
                        .u
                        .iter()
                        .zip(&self.weights)
                        .enumerate()
                        .filter(|(l, _)| *l != i)
                        .map(|(_, (ul, w))| w * norm(&ul[k * m..(k + 1) * m]))
                        .sum();
                    let avail = ((alpha - others) / self.weights[i]).max(0.0);
                    let cell = &mut block[(k - s) * m..(k - s + 1) * m];
                    let n = norm(cell);
                    if n > avail {
                        let f = if n > 0.0 { avail / n } else { 0.0 };
                        cell.iter_mut().for_each(|c| *c *= f);
                    }
                }
            }
            BudgetMode::L1 | BudgetMode::Lagrangian => {
                let outside: f64 = (0..self.steps)
                    .filter(|k| *k < s || *k >= e)
                    .map(|k| norm(&old[k * m..(k + 1) * m]))
                    .sum::<f64>()
                    * self.dt;
                let avail = if self.budget.mode == BudgetMode::L1 {
                    let rest: f64 = st
                        .u
                        .iter()
                        .zip(&self.weights)
                        .enumerate()
                        .filter(|(l, _)| *l != i)
                        .map(|(_, (ul, w))| w * self.particle_effort(ul))
                        .sum();
                    (alpha - self.spent() - rest) / self.weights[i] - outside
                } else {
                    alpha - self.offsets[i] - outside
                }
                .max(0.0);
                let cost: f64 = (0..e - s).map(|k| norm(&block[k * m..(k + 1) * m])).sum::<f64>() * self.dt;
                if cost > avail {
                    let f = if cost > 0.0 { avail / cost } else { 0.0 };
                    block.iter_mut().for_each(|c| *c *= f);
                }
            }
        }
    }

    /// One pass over blocks of `width` steps; returns whether anything improved.
    fn sweep(&self, st: &mut State, width: usize, delta: f64, stepper: &mut Stepper) -> bool {
        let m = self.m();
        let mut improved = false;
        let mut s = 0;
        while s < self.steps {
            let e = (s + width).min(self.steps);
            for i in 0..self.points.len() {
                for j in 0..m {
                    for sign in [1.0, -1.0] {
                        let mut block = st.u[i][s * m..e * m].to_vec();
                        for k in 0..e - s {
                            block[k * m + j] += sign * delta;
                            let p = self.set().project(&block[k * m..(k + 1) * m]);
                            block[k * m..(k + 1) * m].copy_from_slice(&p);
                        }
                        self.fit_block(st, i, s, e, &mut block);
                        if block[..] == st.u[i][s * m..e * m] {
                            continue;
                        }
                        let mut ui = st.u[i].clone();
                        ui[s * m..e * m].copy_from_slice(&block);
                        let mut xi = st.x[i].clone();
                        if !self.roll(&ui, &mut xi, s, stepper) {
                            continue;
                        }
                        let old_u = std::mem::replace(&mut st.u[i], ui);
                        let old_x = std::mem::replace(&mut st.x[i], xi);
                        let score = self.score(&st.u, &st.x);
                        if score.better(&st.score) {
                            st.score = score;
                            improved = true;
                            break;
                        }
                        st.u[i] = old_u;
                        st.x[i] = old_x;
                    }
                }
            }
            s = e;
        }
        improved
    }

    /// Descent from `u`: level `ℓ` perturbs blocks of `steps >> ℓ` cells by
    /// `R_U / 2^(ℓ+1)`, repeating sweeps at a level while they improve.
    fn descend(&self, u: Vec<Vec<f64>>, max_sweeps: usize) -> (State, usize) {
        let mut st = self.build(u);
        let mut sweeps = 0;
        if self.steps == 0 || self.m() == 0 || self.done(st.score) {
            return (st, sweeps);
        }
        let reach = self.set().max_norm();
        let mut stepper = Stepper::new(self.d());
        let mut stagnant = 0;
        let mut level = 0u32;
        let mut delta = 0.5 * reach;
        'levels: while delta >= MIN_DELTA * reach && stagnant < STAGNATION_LEVELS {
            let width = (self.steps >> level.min(63)).max(1);
            let mut progressed = false;
            loop {
                if sweeps >= max_sweeps {
                    break 'levels;
                }
                sweeps += 1;
                let improved = self.sweep(&mut st, width, delta, &mut stepper);
                progressed |= improved;
                if self.done(st.score) {
                    break 'levels;
                }
                if !improved {
                    break;
                }
            }
            stagnant = if progressed { 0 } else { stagnant + 1 };
            level += 1;
            delta *= 0.5;
        }
        (st, sweeps)
    }

    fn signal(&self, u: &[Vec<f64>]) -> ControlSignal {
        let m = self.m();
        u.iter()
            .map(|ui| (0..self.steps).map(|k| ui[k * m..(k + 1) * m].to_vec()).collect())
            .collect()
    }

    /// The greedy start alone, when it meets the stopping criterion.
    pub(crate) fn greedy_outcome(&self) -> Option<Outcome> {
        let greedy = self.build(self.greedy());
        self.done(greedy.score).then(|| Outcome {
            controls: self.signal(&greedy.u),
            score: greedy.score,
            restarts_used: 1,
            sweeps: 0,
        })
    }

    /// Greedy first; when it already meets the stopping criterion the other
    /// restarts are skipped. Otherwise all restarts run and the best
    /// `(score, restart)` wins.
    pub(crate) fn optimize(&self, cfg: SearchConfig, extra: Option<&ControlSignal>) -> Outcome {
        if let Some(out) = self.greedy_outcome() {
            return out;
        }
        let m = self.m();
        let flat_extra: Option<Vec<Vec<f64>>> = extra.map(|sig| sig.iter().map(|row| row.iter().flatten().copied().collect()).collect());
        let total = cfg.restarts + usize::from(flat_extra.is_some());
        let runs: Vec<(State, usize)> = (0..total)
            .into_par_iter()
            .map(|r| {
                let start = if r == cfg.restarts {
                    flat_extra.clone().unwrap_or_else(|| vec![vec![0.0; self.steps * m]; self.points.len()])
                } else {
                    self.start(r, cfg.seed)
                };
                self.descend(start, cfg.max_sweeps)
            })
            .collect();
        let sweeps = runs.iter().map(|r| r.1).sum();
        let (best, _) = runs
            .into_iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| a.0.score.cmp(&b.0.score).then(ia.cmp(ib)))
            .map(|(_, r)| r)
            .expect("at least one restart");
        Outcome {
            controls: self.signal(&best.u),
            score: best.score,
            restarts_used: total,
            sweeps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VectorField;

    fn line() -> ControlSystem {
        ControlSystem::new(VectorField::zero(1), vec![VectorField::constant(vec![1.0])], ControlSet::ball(1.0)).unwrap()
    }

    fn problem<'a>(sys: &'a ControlSystem, target: &'a TargetSpec, steps: usize, mode: BudgetMode, alpha: f64) -> Problem<'a> {
        Problem {
            sys,
            points: vec![vec![0.0]],
            weights: vec![1.0],
            offsets: vec![0.0],
            budget: Budget { mode, alpha },
            target,
            objective: Objective::Reach,
            steps,
            dt: 0.02,
            tol_target: 1e-9,
        }
    }

    #[test]
    fn greedy_lands_exactly() {
        let sys = line();
        let target = TargetSpec::Measures { measures: vec![DiscreteMeasure::dirac(vec![1.0])] };
        let p = problem(&sys, &target, 50, BudgetMode::Linf, 1.0);
        let out = p.optimize(SearchConfig { restarts: 8, seed: 0, max_sweeps: 5000 }, None);
        assert!(out.score.0 <= 1e-9, "{:?}", out.score);
        assert_eq!(out.restarts_used, 1);
        let short = problem(&sys, &target, 49, BudgetMode::Linf, 1.0);
        let out = short.optimize(SearchConfig { restarts: 3, seed: 0, max_sweeps: 200 }, None);
        assert!((out.score.0 - 0.02).abs() < 1e-9, "{:?}", out.score);
    }

    #[test]
    fn projections_respect_budgets() {
        let sys = line();
        let target = TargetSpec::Box { lo: vec![1.0], hi: vec![1.0] };
        for mode in [BudgetMode::Linf, BudgetMode::L1, BudgetMode::Lagrangian] {
            let p = problem(&sys, &target, 30, mode, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let u = p.random_start(&mut rng);
            let x: Vec<f64> = (0..30).map(|k| u[0][k].abs()).collect();
            match mode {
                BudgetMode::Linf => assert!(x.iter().all(|&c| c <= 0.3 + 1e-15)),
                _ => assert!(x.iter().sum::<f64>() * 0.02 <= 0.3 + 1e-12),
            }
            let out = p.optimize(SearchConfig { restarts: 3, seed: 1, max_sweeps: 100 }, None);
            let total: f64 = out.controls[0].iter().map(|c| c[0].abs()).sum::<f64>() * 0.02;
            match mode {
                BudgetMode::Linf => assert!(out.controls[0].iter().all(|c| c[0].abs() <= 0.3 + 1e-12)),
                _ => assert!(total <= 0.3 + 1e-9, "{mode:?}: {total}"),
            }
        }
    }

    #[test]
    fn descent_improves_random_start() {
        let sys = line();
        let target = TargetSpec::Box { lo: vec![0.4], hi: vec![0.4] };
        let p = problem(&sys, &target, 40, BudgetMode::Linf, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start = p.random_start(&mut rng);
        let before = p.build(start.clone()).score;
        let (after, sweeps) = p.descend(start, 5000);
        assert!(sweeps > 0);
        assert!(after.score.0 < 1e-6 && after.score.0 < before.0, "{:?} -> {:?}", before, after.score);
    }
}
