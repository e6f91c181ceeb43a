//! Discrete representations of admissible trajectories: weighted particles
//! integrated on a uniform grid with piecewise-constant controls, each
//! carrying its cumulative control effort `ζ`.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlSystem, DynamicsError, TOL_GROWTH, TOL_U};
use crate::extended::ExtReal;
use crate::linalg::{dist, norm};
use crate::magnitude::{psi, TOL_RESIDUAL};
use crate::measures::{lex_cmp, DiscreteMeasure, TOL_MATCH};

/// Tolerance for budget checks.
pub const TOL_FEAS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("control array shape: {0}")]
    Shape(String),
    #[error("control of particle {particle} at step {step} lies outside U (distance {distance:e})")]
    ControlOutOfSet { particle: usize, step: usize, distance: f64 },
    #[error("state of particle {particle} is not finite after step {step}")]
    NonFiniteState { particle: usize, step: usize },
    #[error("invalid step range {lo}..{hi} for a grid with {steps} steps")]
    Index { lo: usize, hi: usize, steps: usize },
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("junction mismatch at atom {position:?} (weight {weight})")]
    EndpointMismatch { position: Vec<f64>, weight: f64 },
}

/// Uniform grid `origin + (offset + k) dt` for `k = 0..=steps`. Restrictions
/// shift `offset` so nested sub-grids reproduce the same time stamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    origin: f64,
    dt: f64,
    offset: usize,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self, EnsembleError> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(EnsembleError::Grid(format!("need t0 < t1, got [{t0}, {t1}]")));
        }
        if steps == 0 {
            return Err(EnsembleError::Grid("need at least one step".into()));
        }
        Ok(TimeGrid {
            origin: t0,
            dt: (t1 - t0) / steps as f64,
            offset: 0,
            steps,
        })
    }

    /// Grid with a given step; `steps = 0` gives a single time stamp.
    pub fn with_step(t0: f64, dt: f64, steps: usize) -> Result<Self, EnsembleError> {
        if !(t0.is_finite() && dt.is_finite() && dt > 0.0) {
            return Err(EnsembleError::Grid(format!("need a positive step, got {dt}")));
        }
        Ok(TimeGrid {
            origin: t0,
            dt,
            offset: 0,
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.origin + (self.offset + k) as f64 * self.dt
    }

    pub fn t0(&self) -> f64 {
        self.time(0)
    }

    pub fn t1(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn duration(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    fn sub(&self, lo: usize, hi: usize) -> TimeGrid {
        TimeGrid {
            offset: self.offset + lo,
            steps: hi - lo,
            ..*self
        }
    }

    /// `self` followed by `next`, if `next` starts where `self` ends.
    fn join(&self, next: &TimeGrid) -> Result<TimeGrid, EnsembleError> {
        let same_frame = self.origin == next.origin && self.dt == next.dt;
        let contiguous = if same_frame {
            self.offset + self.steps == next.offset
        } else {
            let scale = 1.0 + self.t1().abs();
            (self.dt - next.dt).abs() <= 1e-12 * self.dt && (self.t1() - next.t0()).abs() <= 1e-9 * scale
        };
        if !contiguous {
            return Err(EnsembleError::Grid(format!(
                "cannot join [{}, {}] (dt {}) with [{}, {}] (dt {})",
                self.t0(),
                self.t1(),
                self.dt,
                next.t0(),
                next.t1(),
                next.dt
            )));
        }
        Ok(TimeGrid {
            steps: self.steps + next.steps,
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// Instantaneous budget `θ(k) <= α`.
    Linf,
    /// Cumulative budget `ω(T) <= α`.
    L1,
    /// Per-particle budget `ζ_i(t) <= α`.
    Lagrangian,
}

/// `controls[i][k]` is the control of particle `i` on grid cell `k`.
pub type ControlSignal = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    grid: TimeGrid,
    weights: Vec<f64>,
    /// `positions[i][k]` for `k = 0..=steps`.
    positions: Vec<Vec<Vec<f64>>>,
    zeta: Vec<Vec<f64>>,
    controls: ControlSignal,
}

pub fn integrate(
    sys: &ControlSystem,
    mu0: &DiscreteMeasure,
    controls: &ControlSignal,
    grid: TimeGrid,
    offsets: Option<&[f64]>,
) -> Result<Ensemble, EnsembleError> {
    let n = mu0.len();
    let steps = grid.steps();
    let m = sys.control_dim();
    if mu0.dim() != sys.dim() {
        return Err(EnsembleError::Shape(format!(
            "measure lives in R^{}, system in R^{}",
            mu0.dim(),
            sys.dim()
        )));
    }
    if controls.len() != n {
        return Err(EnsembleError::Shape(format!("{} control rows for {n} particles", controls.len())));
    }
    if let Some(off) = offsets {
        if off.len() != n {
            return Err(EnsembleError::Shape(format!("{} effort offsets for {n} particles", off.len())));
        }
    }
    for (i, row) in controls.iter().enumerate() {
        if row.len() != steps {
            return Err(EnsembleError::Shape(format!(
                "particle {i} has {} control cells, grid has {steps}",
                row.len()
            )));
        }
        for (k, u) in row.iter().enumerate() {
            if u.len() != m {
                return Err(EnsembleError::Shape(format!(
                    "control of particle {i} at step {k} has length {}, expected {m}",
                    u.len()
                )));
            }
            let distance = sys.control_set().distance(u);
            if distance > TOL_U {
                return Err(EnsembleError::ControlOutOfSet { particle: i, step: k, distance });
            }
        }
    }
    let dt = grid.dt();
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stepper = Stepper::new(sys.dim());
            let mut x = mu0.points()[i].clone();
            let mut z = offsets.map_or(0.0, |o| o[i]);
            let mut xs = Vec::with_capacity(steps + 1);
            let mut zs = Vec::with_capacity(steps + 1);
            xs.push(x.clone());
            zs.push(z);
            for (k, u) in controls[i].iter().enumerate() {
                stepper.step(sys, &mut x, u, dt)?;
                if x.iter().any(|c| !c.is_finite()) {
                    return Err(EnsembleError::NonFiniteState { particle: i, step: k });
                }
                z += norm(u) * dt;
                xs.push(x.clone());
                zs.push(z);
            }
            Ok((xs, zs))
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    let (positions, zeta) = trajectories.into_iter().unzip();
    Ok(Ensemble {
        grid,
        weights: mu0.weights().to_vec(),
        positions,
        zeta,
        controls: controls.clone(),
    })
}

/// Classical RK4 with a frozen control, reusing its buffers between steps.
pub(crate) struct Stepper {
    k: [Vec<f64>; 4],
    probe: Vec<f64>,
    col: Vec<f64>,
    acc: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(d: usize) -> Self {
        Stepper {
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            probe: vec![0.0; d],
            col: vec![0.0; d],
            acc: vec![0.0; d],
        }
    }

    /// Advances `x` in place by one step of length `dt`.
    pub(crate) fn step(&mut self, sys: &ControlSystem, x: &mut [f64], u: &[f64], dt: f64) -> Result<(), DynamicsError> {
        let Stepper { k, probe, col, acc } = self;
        let [k1, k2, k3, k4] = k;
        sys.velocity_into(x, u, col, acc, k1)?;
        for r in 0..x.len() {
            probe[r] = x[r] + 0.5 * dt * k1[r];
        }
        sys.velocity_into(probe, u, col, acc, k2)?;
        for r in 0..x.len() {
            probe[r] = x[r] + 0.5 * dt * k2[r];
        }
        sys.velocity_into(probe, u, col, acc, k3)?;
        for r in 0..x.len() {
            probe[r] = x[r] + dt * k3[r];
        }
        sys.velocity_into(probe, u, col, acc, k4)?;
        for r in 0..x.len() {
            x[r] += dt / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub step: Option<usize>,
    pub particle: Option<usize>,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub mode: BudgetMode,
    pub alpha: f64,
    pub feasible: bool,
    /// The constrained quantity: `max θ`, `ω(T)` or `max ζ`.
    pub worst: f64,
    /// `alpha - worst`; negative when infeasible.
    pub slack: f64,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub growth_bound: f64,
    pub moment_constant: f64,
    /// Largest `|x_i(t) - x_i(0)| / bound` over particles and times.
    pub displacement_ratio: f64,
    /// Largest `m_p(μ_t) / (K (1 + m_p(μ_0)))` over times.
    pub moment_ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperpositionReport {
    /// Number of distinct atoms at the inspected time.
    pub atoms: usize,
    pub max_residual: f64,
    pub admissible: bool,
}

impl Ensemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positions(&self) -> &[Vec<Vec<f64>>] {
        &self.positions
    }

    pub fn zeta(&self) -> &[Vec<f64>] {
        &self.zeta
    }

    pub fn controls(&self) -> &ControlSignal {
        &self.controls
    }

    pub fn position(&self, i: usize, k: usize) -> &[f64] {
        &self.positions[i][k]
    }

    pub fn marginal(&self, k: usize) -> DiscreteMeasure {
        DiscreteMeasure::from_parts(self.positions.iter().map(|p| p[k].clone()).collect(), self.weights.clone())
    }

    pub fn terminal(&self) -> DiscreteMeasure {
        self.marginal(self.grid.steps())
    }

    pub fn initial_offsets(&self) -> Vec<f64> {
        self.zeta.iter().map(|z| z[0]).collect()
    }

    /// `Σ w_i |u_i[k]|` on cell `k < steps`.
    pub fn theta(&self, k: usize) -> f64 {
        assert!(k < self.grid.steps(), "cell {k} out of range");
        self.controls
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * norm(&c[k]))
            .sum()
    }

    /// `Σ w_i Ψ(x_i[k], f(x_i[k], u_i[k]))`, which never exceeds [`Self::theta`].
    pub fn theta_recomputed(&self, sys: &ControlSystem, k: usize) -> Result<ExtReal, DynamicsError> {
        let mut total = ExtReal::ZERO;
        for i in 0..self.len() {
            total = total + self.psi_at(sys, i, k)?.map_or(ExtReal::Infinite, |v| ExtReal::Finite(self.weights[i] * v));
        }
        Ok(total)
    }

    fn psi_at(&self, sys: &ControlSystem, i: usize, k: usize) -> Result<Option<f64>, DynamicsError> {
        let x = &self.positions[i][k];
        let v = sys.velocity_unchecked(x, &self.controls[i][k])?;
        Ok(psi(sys, x, &v)?.value.finite())
    }

    /// `Σ w_i ζ_i[k]`.
    pub fn omega(&self, k: usize) -> f64 {
        self.zeta.iter().zip(&self.weights).map(|(z, w)| w * z[k]).sum()
    }

    pub fn check_feasibility(&self, mode: BudgetMode, alpha: f64) -> FeasibilityReport {
        let steps = self.grid.steps();
        let limit = alpha + TOL_FEAS;
        let mut violations = Vec::new();
        let worst = match mode {
            BudgetMode::Linf => {
                let mut worst: f64 = 0.0;
                for k in 0..steps {
                    let th = self.theta(k);
                    worst = worst.max(th);
                    if th > limit {
                        violations.push(Violation { step: Some(k), particle: None, excess: th - alpha });
                    }
                }
                worst
            }
            BudgetMode::L1 => {
                let w = self.omega(steps);
                if w > limit {
                    let first = (0..=steps).find(|&k| self.omega(k) > limit);
                    violations.push(Violation { step: first, particle: None, excess: w - alpha });
                }
                w
            }
            BudgetMode::Lagrangian => {
                let mut worst: f64 = 0.0;
                for (i, z) in self.zeta.iter().enumerate() {
                    let top = z.iter().cloned().fold(0.0, f64::max);
                    worst = worst.max(top);
                    if top > limit {
                        let first = z.iter().position(|&v| v > limit);
                        violations.push(Violation { step: first, particle: Some(i), excess: top - alpha });
                    }
                }
                worst
            }
        };
        FeasibilityReport {
            mode,
            alpha,
            feasible: violations.is_empty(),
            worst,
            slack: alpha - worst,
            violations,
        }
    }

    /// Sub-ensemble on grid indices `lo..=hi`; effort offsets become `ζ_i[lo]`.
    pub fn restrict(&self, lo: usize, hi: usize) -> Result<Ensemble, EnsembleError> {
        let steps = self.grid.steps();
        if lo > hi || hi > steps {
            return Err(EnsembleError::Index { lo, hi, steps });
        }
        Ok(Ensemble {
            grid: self.grid.sub(lo, hi),
            weights: self.weights.clone(),
            positions: self.positions.iter().map(|p| p[lo..=hi].to_vec()).collect(),
            zeta: self.zeta.iter().map(|z| z[lo..=hi].to_vec()).collect(),
            controls: self.controls.iter().map(|c| c[lo..hi].to_vec()).collect(),
        })
    }

    /// Same ensemble with particles listed in the order `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        Ensemble {
            grid: self.grid,
            weights: perm.iter().map(|&i| self.weights[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i].clone()).collect(),
            zeta: perm.iter().map(|&i| self.zeta[i].clone()).collect(),
            controls: perm.iter().map(|&i| self.controls[i].clone()).collect(),
        }
    }

    /// Glues `next` after `self`. Junction atoms are grouped by position; inside
    /// a group, mass is paired in particle-index order, which
    /// splits particles only when weights differ. The effort of each `next`
    /// curve is rebased to continue the `ζ` it is glued to.
    pub fn concatenate(&self, next: &Ensemble) -> Result<Ensemble, EnsembleError> {
        let grid = self.grid.join(&next.grid)?;
        let end = self.grid.steps();
        let left = junction_groups(self.positions.iter().map(|p| &p[end]), &self.weights);
        let right = junction_groups(next.positions.iter().map(|p| &p[0]), &next.weights);

        let mut pieces: Vec<(usize, usize, f64)> = Vec::new();
        let mut li = 0;
        let mut ri = 0;
        while li < left.len() || ri < right.len() {
            let (Some(lg), Some(rg)) = (left.get(li), right.get(ri)) else {
                let (g, w) = match (left.get(li), right.get(ri)) {
                    (Some(g), _) => (g, &self.weights),
                    (_, Some(g)) => (g, &next.weights),
                    _ => unreachable!(),
                };
                return Err(mismatch(g, w));
            };
            if dist(&lg.position, &rg.position) > TOL_MATCH || (lg.mass - rg.mass).abs() > TOL_MATCH {
                let first = if lex_cmp(&lg.position, &rg.position).is_le() {
                    (lg, &self.weights)
                } else {
                    (rg, &next.weights)
                };
                return Err(mismatch(first.0, first.1));
            }
            pair_masses(&lg.members, &self.weights, &rg.members, &next.weights, &mut pieces);
            li += 1;
            ri += 1;
        }
        pieces.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut out = Ensemble {
            grid,
            weights: Vec::with_capacity(pieces.len()),
            positions: Vec::with_capacity(pieces.len()),
            zeta: Vec::with_capacity(pieces.len()),
            controls: Vec::with_capacity(pieces.len()),
        };
        for (i, j, mass) in pieces {
            let mut pos = self.positions[i].clone();
            pos.extend(next.positions[j][1..].iter().cloned());
            let mut zeta = self.zeta[i].clone();
            let base = self.zeta[i][end];
            let start = next.zeta[j][0];
            if base == start {
                zeta.extend_from_slice(&next.zeta[j][1..]);
            } else {
                zeta.extend(next.zeta[j][1..].iter().map(|z| base + (z - start)));
            }
            let mut ctrl = self.controls[i].clone();
            ctrl.extend(next.controls[j].iter().cloned());
            out.weights.push(mass);
            out.positions.push(pos);
            out.zeta.push(zeta);
            out.controls.push(ctrl);
        }
        Ok(out)
    }

    /// Checks `|x_i(t) - x_i(0)| <= D t e^{Dt} (1 + |x_i(0)|)` and
    /// `m_p(μ_t) <= K (1 + m_p(μ_0))` with `K = 2^{p-1} (1 + D T e^{DT})^p`.
    pub fn check_moment_bounds(&self, sys: &ControlSystem, p: f64) -> BoundReport {
        let d = sys.growth_bound();
        let total = self.grid.duration();
        let k_const = 2f64.powf(p - 1.0) * (1.0 + d * total * (d * total).exp()).powf(p);
        let mut displacement_ratio: f64 = 0.0;
        for traj in &self.positions {
            let x0 = &traj[0];
            for (k, x) in traj.iter().enumerate() {
                let t = k as f64 * self.grid.dt();
                let bound = d * t * (d * t).exp() * (1.0 + norm(x0)) * (1.0 + TOL_GROWTH);
                let disp = dist(x, x0);
                let ratio = if disp == 0.0 {
                    0.0
                } else if bound == 0.0 {
                    f64::INFINITY
                } else {
                    disp / bound
                };
                displacement_ratio = displacement_ratio.max(ratio);
            }
        }
        let base = 1.0 + self.marginal(0).moment(p);
        let moment_ratio = (0..=self.grid.steps())
            .map(|k| self.marginal(k).moment(p) / (k_const * base))
            .fold(0.0, f64::max);
        BoundReport {
            growth_bound: d,
            moment_constant: k_const,
            displacement_ratio,
            moment_ratio,
            holds: displacement_ratio <= 1.0 && moment_ratio <= 1.0 + TOL_GROWTH,
        }
    }

    /// Weight-averages the particle velocities over coincident atoms at grid
    /// index `k < steps` and checks each averaged velocity lies in `F(x)`.
    pub fn check_superposition(&self, sys: &ControlSystem, k: usize) -> Result<SuperpositionReport, DynamicsError> {
        let groups = junction_groups(self.positions.iter().map(|p| &p[k]), &self.weights);
        let mut max_residual: f64 = 0.0;
        let mut admissible = true;
        for g in &groups {
            let mut v = vec![0.0; sys.dim()];
            for &i in &g.members {
                let vi = sys.velocity_unchecked(&self.positions[i][k], &self.controls[i][k])?;
                for (a, b) in v.iter_mut().zip(vi) {
                    *a += self.weights[i] / g.mass * b;
                }
            }
            let r = psi(sys, &g.position, &v)?;
            max_residual = max_residual.max(r.residual);
            admissible &= r.value.is_finite() && r.residual <= TOL_RESIDUAL;
        }
        Ok(SuperpositionReport {
            atoms: groups.len(),
            max_residual,
            admissible,
        })
    }

    /// Trajectory dump with columns `t, particle_id, x_1..x_d, u_1..u_m, psi,
    /// zeta, weight`, time-major. The last time stamp repeats the last cell's
    /// control. `psi` is `|u|` unless `recompute` asks for `Ψ(x, f(x, u))`.
    pub fn write_csv<W: Write>(&self, sys: &ControlSystem, out: &mut W, recompute: bool) -> io::Result<()> {
        let d = sys.dim();
        let m = sys.control_dim();
        let mut header = vec!["t".to_string(), "particle_id".to_string()];
        header.extend((1..=d).map(|j| format!("x_{j}")));
        header.extend((1..=m).map(|j| format!("u_{j}")));
        header.extend(["psi", "zeta", "weight"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        let steps = self.grid.steps();
        let zero = vec![0.0; m];
        for k in 0..=steps {
            for i in 0..self.len() {
                let cell = if steps == 0 { None } else { Some(k.min(steps - 1)) };
                let u = cell.map_or(&zero, |c| &self.controls[i][c]);
                let psi_val = if recompute {
                    let x = &self.positions[i][k];
                    let v = sys.velocity_unchecked(x, u).map_err(io::Error::other)?;
                    psi(sys, x, &v).map_err(io::Error::other)?.value
                } else {
                    ExtReal::Finite(norm(u))
                };
                let mut row = vec![fmt_f64(self.grid.time(k)), i.to_string()];
                row.extend(self.positions[i][k].iter().map(|&x| fmt_f64(x)));
                row.extend(u.iter().map(|&x| fmt_f64(x)));
                row.push(match psi_val {
                    ExtReal::Finite(v) => fmt_f64(v),
                    ExtReal::Infinite => "+inf".into(),
                });
                row.push(fmt_f64(self.zeta[i][k]));
                row.push(fmt_f64(self.weights[i]));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct JunctionGroup {
    position: Vec<f64>,
    mass: f64,
    /// Particle indices, ascending.
    members: Vec<usize>,
}

fn junction_groups<'a, I: Iterator<Item = &'a Vec<f64>>>(points: I, weights: &[f64]) -> Vec<JunctionGroup> {
    let pts: Vec<&Vec<f64>> = points.collect();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(pts[a], pts[b]).then(a.cmp(&b)));
    let mut groups: Vec<JunctionGroup> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if dist(&g.position, pts[i]) <= TOL_MATCH => {
                g.mass += weights[i];
                g.members.push(i);
            }
            _ => groups.push(JunctionGroup {
                position: pts[i].clone(),
                mass: weights[i],
                members: vec![i],
            }),
        }
    }
    for g in &mut groups {
        g.members.sort_unstable();
    }
    groups
}

fn mismatch(g: &JunctionGroup, weights: &[f64]) -> EnsembleError {
    EnsembleError::EndpointMismatch {
        position: g.position.clone(),
        weight: g.members.iter().map(|&i| weights[i]).sum(),
    }
}

/// North-west-corner pairing of two equal-mass groups.
fn pair_masses(a: &[usize], wa: &[f64], b: &[usize], wb: &[f64], out: &mut Vec<(usize, usize, f64)>) {
    let (mut ia, mut ib) = (0, 0);
    let mut ra = wa[a[0]];
    let mut rb = wb[b[0]];
    loop {
        let last = ia + 1 == a.len() && ib + 1 == b.len();
        if last || (ra - rb).abs() <= TOL_MATCH {
            out.push((a[ia], b[ib], ra));
            ia += 1;
            ib += 1;
            if ia == a.len() || ib == b.len() {
                break;
            }
            ra = wa[a[ia]];
            rb = wb[b[ib]];
        } else if ra < rb {
            out.push((a[ia], b[ib], ra));
            rb -= ra;
            ia += 1;
            if ia == a.len() {
                break;
            }
            ra = wa[a[ia]];
        } else {
            out.push((a[ia], b[ib], rb));
            ra -= rb;
            ib += 1;
            if ib == b.len() {
                break;
            }
            rb = wb[b[ib]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlSet, VectorField};

    fn crossing_pair() -> (ControlSystem, Ensemble) {
        let sys = ControlSystem::new(
            VectorField::constant(vec![1.0, 0.0]),
            vec![VectorField::constant(vec![0.0, 1.0])],
            ControlSet::ball(1.0),
        )
        .unwrap();
        let mu0 = DiscreteMeasure::uniform(vec![vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let controls = vec![vec![vec![-1.0]; 100], vec![vec![1.0]; 100]];
        let ens = integrate(&sys, &mu0, &controls, grid, None).unwrap();
        (sys, ens)
    }

    fn scalar_system() -> ControlSystem {
        ControlSystem::new(VectorField::zero(1), vec![VectorField::constant(vec![1.0])], ControlSet::ball(1.0)).unwrap()
    }

    #[test]
    fn crossing_pair_trajectories() {
        let (_, ens) = crossing_pair();
        for k in [0, 37, 50, 100] {
            let t = ens.grid().time(k);
            let up = ens.position(0, k);
            let down = ens.position(1, k);
            assert!((up[0] - t).abs() < 1e-12 && (up[1] - (1.0 - t)).abs() < 1e-12);
            assert!((down[0] - t).abs() < 1e-12 && (down[1] - (t - 1.0)).abs() < 1e-12);
        }
        assert!((ens.zeta()[0][100] - 2.0).abs() < 1e-12);
        assert!((ens.zeta()[1][100] - 2.0).abs() < 1e-12);
        for k in 0..100 {
            assert_eq!(ens.theta(k), 1.0);
            assert!((ens.zeta()[0][k + 1] - ens.zeta()[0][k] - 0.02).abs() < 1e-12);
        }
        assert!((ens.omega(100) - 2.0).abs() < 1e-12);
        assert_eq!(ens.omega(0), 0.0);
    }

    #[test]
    fn zero_controls_keep_particles_still() {
        let sys = ControlSystem::new(VectorField::zero(2), vec![VectorField::constant(vec![1.0, 0.0])], ControlSet::ball(1.0))
            .unwrap();
        let mu0 = DiscreteMeasure::uniform(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ens = integrate(&sys, &mu0, &vec![vec![vec![0.0]; 10]; 2], grid, Some(&[0.3, 0.7])).unwrap();
        assert_eq!(ens.terminal(), mu0);
        assert!(ens.zeta()[0].iter().all(|&z| z == 0.3));
        assert_eq!(ens.theta(4), 0.0);
        for mode in [BudgetMode::Linf, BudgetMode::L1, BudgetMode::Lagrangian] {
            let zero_offsets = integrate(&sys, &mu0, &vec![vec![vec![0.0]; 10]; 2], grid, None).unwrap();
            assert!(zero_offsets.check_feasibility(mode, 0.0).feasible);
        }
    }

    #[test]
    fn constant_velocity_is_exact() {
        let sys = scalar_system();
        let mu0 = DiscreteMeasure::dirac(vec![0.25]);
        let grid = TimeGrid::new(0.0, 2.0, 7).unwrap();
        let ens = integrate(&sys, &mu0, &vec![vec![vec![0.5]; 7]], grid, None).unwrap();
        assert!((ens.position(0, 7)[0] - 1.25).abs() < 1e-14);
    }

    #[test]
    fn out_of_set_controls_are_rejected() {
        let sys = scalar_system();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let err = integrate(&sys, &DiscreteMeasure::dirac(vec![0.0]), &vec![vec![vec![0.5], vec![1.5]]], grid, None);
        assert!(matches!(err, Err(EnsembleError::ControlOutOfSet { particle: 0, step: 1, .. })));
    }

    #[test]
    fn theta_and_omega_examples() {
        let sys = scalar_system();
        let mu0 = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.25, 0.75]).unwrap();
        let grid = TimeGrid::new(0.0, 4.0, 8).unwrap();
        let ens = integrate(&sys, &mu0, &vec![vec![vec![1.0]; 8], vec![vec![0.0]; 8]], grid, Some(&[0.5, 0.5])).unwrap();
        assert_eq!(ens.theta(3), 0.25);
        assert!((ens.omega(8) - 1.5).abs() < 1e-12);
        for k in 0..=8 {
            let sum: f64 = (0..k).map(|j| ens.theta(j)).sum::<f64>() * grid.dt();
            assert!((ens.omega(k) - ens.omega(0) - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn feasibility_examples() {
        let (_, ens) = crossing_pair();
        let lag = ens.check_feasibility(BudgetMode::Lagrangian, 2.0);
        assert!(lag.feasible);
        assert!(lag.slack.abs() < 1e-12);
        let linf = ens.check_feasibility(BudgetMode::Linf, 0.5);
        assert!(!linf.feasible);
        assert_eq!(linf.violations.len(), 100);
        assert_eq!(linf.slack, -0.5);
        assert!(ens.check_feasibility(BudgetMode::Linf, 1.0).feasible);
        assert!(!ens.check_feasibility(BudgetMode::L1, 1.5).feasible);
    }

    #[test]
    fn restriction_examples() {
        let (_, ens) = crossing_pair();
        assert_eq!(ens.restrict(0, 100).unwrap(), ens);
        let nested = ens.restrict(10, 90).unwrap().restrict(5, 60).unwrap();
        assert_eq!(nested, ens.restrict(15, 70).unwrap());
        let tail = ens.restrict(50, 100).unwrap();
        assert!(tail.initial_offsets().iter().all(|&z| (z - 1.0).abs() < 1e-12));
        assert_eq!(tail.grid().t0(), 1.0);
        assert!(matches!(ens.restrict(3, 101), Err(EnsembleError::Index { .. })));
    }

    #[test]
    fn concatenation_examples() {
        let (sys, ens) = crossing_pair();
        let glued = ens.restrict(0, 50).unwrap().concatenate(&ens.restrict(50, 100).unwrap()).unwrap();
        assert_eq!(glued, ens);
        let empty_tail = ens.restrict(100, 100).unwrap();
        assert_eq!(ens.concatenate(&empty_tail).unwrap(), ens);

        // both curves meet at (1, 0); swapping the identification changes the
        // curves but not the marginals
        let crossed = ens
            .restrict(0, 50)
            .unwrap()
            .concatenate(&ens.restrict(50, 100).unwrap().permuted(&[1, 0]))
            .unwrap();
        assert_ne!(crossed.positions(), ens.positions());
        for k in 0..=100 {
            assert!(crossed.marginal(k).same_atoms(&ens.marginal(k), 0.0));
        }
        assert!((crossed.position(0, 100)[1] - 1.0).abs() < 1e-12);
        assert!(crossed.check_feasibility(BudgetMode::Lagrangian, 2.0).feasible);
        assert!(crossed.check_superposition(&sys, 50).unwrap().admissible);

        let shifted = ens.restrict(51, 100).unwrap();
        assert!(ens.restrict(0, 50).unwrap().concatenate(&shifted).is_err());
    }

    #[test]
    fn junction_with_split_weights() {
        let sys = scalar_system();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let a = integrate(
            &sys,
            &DiscreteMeasure::new(vec![vec![0.0], vec![0.0]], vec![0.25, 0.75]).unwrap(),
            &vec![vec![vec![0.5]; 4]; 2],
            grid,
            None,
        )
        .unwrap();
        let grid_b = TimeGrid::new(1.0, 2.0, 4).unwrap();
        let b = integrate(
            &sys,
            &DiscreteMeasure::new(vec![vec![0.5], vec![0.5]], vec![0.5, 0.5]).unwrap(),
            &vec![vec![vec![1.0]; 4], vec![vec![-1.0]; 4]],
            grid_b,
            None,
        )
        .unwrap();
        let glued = a.concatenate(&b).unwrap();
        assert_eq!(glued.len(), 3);
        assert!((glued.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(glued.marginal(8).same_atoms(&b.marginal(4), 1e-12));
        assert!(glued.marginal(2).same_atoms(&a.marginal(2), 1e-12));
        for z in glued.zeta() {
            assert!((z[8] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_bound_examples() {
        let (sys, ens) = crossing_pair();
        let r = ens.check_moment_bounds(&sys, 2.0);
        assert_eq!(r.growth_bound, 2.0);
        assert!(r.holds);

        let still = ControlSystem::new(VectorField::zero(1), vec![], ControlSet::ball(1.0)).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let e = integrate(&still, &DiscreteMeasure::dirac(vec![3.0]), &vec![vec![vec![]; 5]], grid, None).unwrap();
        let r = e.check_moment_bounds(&still, 2.0);
        assert_eq!(r.displacement_ratio, 0.0);
        assert!(r.holds);

        let growth = ControlSystem::new(VectorField::scaled_identity(1, 1.0), vec![], ControlSet::ball(1.0)).unwrap();
        assert_eq!(growth.growth_bound(), 1.0);
        let grid = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let e = integrate(&growth, &DiscreteMeasure::dirac(vec![1.5]), &vec![vec![vec![]; 200]], grid, None).unwrap();
        assert!((e.position(0, 200)[0] - 1.5 * 2f64.exp() * 2f64.exp() / 2f64.exp()).abs() < 1e-8);
        assert!(e.check_moment_bounds(&growth, 2.0).holds);
    }

    #[test]
    fn csv_dump() {
        let (sys, ens) = crossing_pair();
        let mut buf = Vec::new();
        ens.write_csv(&sys, &mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,particle_id,x_1,x_2,u_1,psi,zeta,weight");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 2 * 101);
        assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap() == 1.0));
        assert_eq!(rows[0][2], "0.0000000000000000e0");
    }

    #[test]
    fn json_round_trip() {
        let (_, ens) = crossing_pair();
        let back: Ensemble = serde_json::from_str(&serde_json::to_string(&ens).unwrap()).unwrap();
        assert_eq!(back, ens);
    }
}
