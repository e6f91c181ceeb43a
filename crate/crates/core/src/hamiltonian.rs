//! Budgeted Hamiltonians at discrete measures: `H∞` (instantaneous budget)
//! and `H1` (effort priced by `p_ω`), with their feasible velocity sets.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{affine_apply, ControlSet, ControlSystem, DynamicsError};
use crate::ensemble::TOL_FEAS;
use crate::linalg::{dot, norm};
use crate::measures::DiscreteMeasure;

/// Complementarity tolerance of the multiplier search on box control sets.
pub const TOL_MULTIPLIER: f64 = 1e-8;
const BOX_STARTS: usize = 64;
const PG_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covector {
    pub p: Vec<Vec<f64>>,
    #[serde(default)]
    pub p_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocitySelection {
    pub velocities: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianResult {
    pub value: f64,
    /// The infimum without `h(μ)`.
    pub inner: f64,
    pub selection: VelocitySelection,
    /// `Σ w_i |u_i|`.
    pub effort: f64,
}

/// `Σ w_i |u_i| <= α`.
pub fn in_zinf(mu: &DiscreteMeasure, sel: &VelocitySelection, alpha: f64) -> bool {
    effort(mu.weights(), &sel.controls) <= alpha + TOL_FEAS
}

fn effort(weights: &[f64], controls: &[Vec<f64>]) -> f64 {
    weights.iter().zip(controls).map(|(w, u)| w * norm(u)).sum()
}

struct Particle {
    drift: Vec<f64>,
    a: DMatrix<f64>,
    g: Vec<f64>,
}

fn prepare(sys: &ControlSystem, mu: &DiscreteMeasure, cov: &Covector) -> Result<Vec<Particle>, DynamicsError> {
    if cov.p.len() != mu.len() {
        return Err(DynamicsError::Dimension(format!(
            "covector has {} entries for {} particles",
            cov.p.len(),
            mu.len()
        )));
    }
    mu.points()
        .par_iter()
        .zip(cov.p.par_iter())
        .map(|(x, p)| {
            if p.len() != sys.dim() {
                return Err(DynamicsError::Dimension(format!("covector entry of length {}", p.len())));
            }
            let drift = sys.eval_drift(x)?;
            let a = sys.eval_matrix(x)?;
            let g = (0..a.ncols()).map(|j| (0..a.nrows()).map(|r| a[(r, j)] * p[r]).sum()).collect();
            Ok(Particle { drift, a, g })
        })
        .collect()
}

fn assemble(
    parts: &[Particle],
    mu: &DiscreteMeasure,
    cov: &Covector,
    controls: Vec<Vec<f64>>,
    h_mu: f64,
    price: f64,
) -> HamiltonianResult {
    let velocities: Vec<Vec<f64>> = parts.iter().zip(&controls).map(|(pt, u)| affine_apply(&pt.drift, &pt.a, u)).collect();
    let inner: f64 = mu
        .weights()
        .iter()
        .zip(&cov.p)
        .zip(velocities.iter().zip(&controls))
        .map(|((w, p), (v, u))| w * (dot(p, v) + price * norm(u)))
        .sum();
    HamiltonianResult {
        value: h_mu + inner,
        inner,
        effort: effort(mu.weights(), &controls),
        selection: VelocitySelection { velocities, controls },
    }
}

fn scaled_against(g: &[f64], t: f64) -> Vec<f64> {
    let n = norm(g);
    if n == 0.0 || t == 0.0 {
        vec![0.0; g.len()]
    } else {
        g.iter().map(|gi| -t * gi / n).collect()
    }
}

/// `H∞(μ, p) = h(μ) + inf{Σ w_i ⟨p_i, v_i⟩ : v ∈ Z∞(μ)}`.
pub fn hinf(
    sys: &ControlSystem,
    mu: &DiscreteMeasure,
    cov: &Covector,
    alpha: f64,
    h_mu: f64,
) -> Result<HamiltonianResult, DynamicsError> {
    let parts = prepare(sys, mu, cov)?;
    let controls = match sys.control_set() {
        ControlSet::Ball { radius } => knapsack(&parts, mu.weights(), *radius, alpha),
        set => box_budget(&parts, mu.weights(), set, alpha),
    };
    Ok(assemble(&parts, mu, cov, controls, h_mu, 0.0))
}

/// Greedy fill of `t_i ∈ [0, R]` by decreasing `|g_i|` until `Σ w_i t_i = α`.
fn knapsack(parts: &[Particle], weights: &[f64], radius: f64, alpha: f64) -> Vec<Vec<f64>> {
    let gn: Vec<f64> = parts.iter().map(|p| norm(&p.g)).collect();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| gn[b].total_cmp(&gn[a]).then(a.cmp(&b)));
    let mut t = vec![0.0; parts.len()];
    let mut left = alpha.max(0.0);
    for &i in &order {
        if gn[i] == 0.0 || left <= 0.0 {
            break;
        }
        let ti = radius.min(left / weights[i]);
        t[i] = ti;
        left -= weights[i] * ti;
    }
    parts.iter().zip(&t).map(|(p, &ti)| scaled_against(&p.g, ti)).collect()
}

/// `argmin{⟨g, u⟩ + λ|u| : u ∈ U}` by projected gradient from boundary starts.
fn priced_box_control(g: &[f64], lambda: f64, set: &ControlSet) -> Vec<f64> {
    let m = g.len();
    let objective = |u: &[f64]| dot(g, u) + lambda * norm(u);
    let mut best = vec![0.0; m];
    let mut best_val = 0.0;
    if norm(g) <= lambda {
        return best;
    }
    for s in 0..BOX_STARTS {
        let mut u = set.project(&boundary_start(set, m, s, g));
        let mut val = objective(&u);
        let mut step = 1.0;
        for _ in 0..PG_ITERS {
            let n = norm(&u);
            let grad: Vec<f64> = if n > 0.0 {
                g.iter().zip(&u).map(|(gi, ui)| gi + lambda * ui / n).collect()
            } else {
                let gn = norm(g);
                g.iter().map(|gi| gi - lambda * gi / gn).collect()
            };
            let mut accepted = false;
            while step > 1e-14 {
                let trial = set.project(&u.iter().zip(&grad).map(|(ui, di)| ui - step * di).collect::<Vec<_>>());
                let tv = objective(&trial);
                let moved: f64 = trial.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum();
                if tv <= val - 1e-4 * moved / step {
                    accepted = moved > 0.0;
                    u = trial;
                    val = tv;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if val < best_val {
            best_val = val;
            best = u;
        }
    }
    best
}

/// Start `s`: the ray against `g`, the box corners, then Halton directions.
fn boundary_start(set: &ControlSet, m: usize, s: usize, g: &[f64]) -> Vec<f64> {
    let reach = set.max_norm();
    if s == 0 {
        return scaled_against(g, reach);
    }
    let corners = 1usize << m.min(6);
    if s <= corners && m <= 6 {
        if let ControlSet::Box { lo, hi } = set {
            let c = s - 1;
            return (0..m).map(|j| if c >> j & 1 == 1 { hi[j] } else { lo[j] }).collect();
        }
    }
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    (0..m)
        .map(|j| {
            let base = PRIMES[j % PRIMES.len()];
            let (mut f, mut r, mut i) = (1.0, 0.0, s);
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            reach * (2.0 * r - 1.0)
        })
        .collect()
}

/// Dualizes the budget with a multiplier `λ >= 0` found by bisection.
fn box_budget(parts: &[Particle], weights: &[f64], set: &ControlSet, alpha: f64) -> Vec<Vec<f64>> {
    let solve = |lambda: f64| -> Vec<Vec<f64>> {
        parts.par_iter().map(|p| priced_box_control(&p.g, lambda, set)).collect()
    };
    let free = solve(0.0);
    if effort(weights, &free) <= alpha + TOL_MULTIPLIER {
        return free;
    }
    let mut lo = 0.0;
    let mut hi = parts.iter().map(|p| norm(&p.g)).fold(0.0, f64::max);
    let mut u_lo = free;
    let mut u_hi = solve(hi);
    for _ in 0..200 {
        if hi - lo <= TOL_MULTIPLIER * (1.0 + hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let u = solve(mid);
        let e = effort(weights, &u);
        if (e - alpha).abs() <= TOL_MULTIPLIER {
            return u;
        }
        if e > alpha {
            lo = mid;
            u_lo = u;
        } else {
            hi = mid;
            u_hi = u;
        }
    }
    // blend the two Lagrangian minimizers until the budget binds
    let blend = |s: f64| -> Vec<Vec<f64>> {
        u_lo.iter()
            .zip(&u_hi)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| s * x + (1.0 - s) * y).collect())
            .collect()
    };
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if effort(weights, &blend(mid)) > alpha {
            b = mid;
        } else {
            a = mid;
        }
    }
    blend(a)
}

/// `H1(μ, p, p_ω) = h(μ) + inf{Σ w_i (⟨p_i, v_i⟩ + p_ω Ψ(x_i, v_i)) : v_i ∈ F(x_i)}`.
pub fn h1(sys: &ControlSystem, mu: &DiscreteMeasure, cov: &Covector, h_mu: f64) -> Result<HamiltonianResult, DynamicsError> {
    let parts = prepare(sys, mu, cov)?;
    let price = cov.p_omega;
    let controls = match sys.control_set() {
        ControlSet::Ball { radius } => parts
            .iter()
            .map(|p| {
                let t = if norm(&p.g) > price { *radius } else { 0.0 };
                scaled_against(&p.g, t)
            })
            .collect(),
        set => parts.par_iter().map(|p| priced_box_control(&p.g, price, set)).collect(),
    };
    Ok(assemble(&parts, mu, cov, controls, h_mu, price))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VectorField;
    use crate::magnitude::psi;

    fn line(set: ControlSet) -> ControlSystem {
        ControlSystem::new(VectorField::zero(1), vec![VectorField::constant(vec![1.0])], set).unwrap()
    }

    fn two_points() -> DiscreteMeasure {
        DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_covector() {
        let sys = line(ControlSet::ball(1.0));
        let cov = Covector { p: vec![vec![0.0], vec![0.0]], p_omega: 0.0 };
        let r = hinf(&sys, &two_points(), &cov, 1.0, 0.7).unwrap();
        assert_eq!(r.value, 0.7);
        assert!(r.selection.controls.iter().all(|u| u == &vec![0.0]));
    }

    #[test]
    fn knapsack_example() {
        let sys = line(ControlSet::ball(1.0));
        let mu = two_points();
        let cov = Covector { p: vec![vec![-3.0], vec![-1.0]], p_omega: 0.0 };
        let r = hinf(&sys, &mu, &cov, 0.5, 0.0).unwrap();
        assert_eq!(r.selection.controls, vec![vec![1.0], vec![0.0]]);
        assert!((r.value + 1.5).abs() < 1e-12);
        assert!(in_zinf(&mu, &r.selection, 0.5));

        let slack = hinf(&sys, &mu, &cov, 5.0, 0.0).unwrap();
        assert!((slack.inner + 2.0).abs() < 1e-12);
        assert!((slack.effort - 1.0).abs() < 1e-12);

        let partial = hinf(&sys, &mu, &cov, 0.75, 0.0).unwrap();
        assert_eq!(partial.selection.controls, vec![vec![1.0], vec![0.5]]);
        assert!((partial.effort - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zinf_membership() {
        let mu = two_points();
        let zero = VelocitySelection { velocities: vec![vec![0.0]; 2], controls: vec![vec![0.0]; 2] };
        assert!(in_zinf(&mu, &zero, 0.0));
        let full = VelocitySelection { velocities: vec![vec![1.0], vec![-1.0]], controls: vec![vec![1.0], vec![-1.0]] };
        assert!(in_zinf(&mu, &full, 2.0));
        assert!(!in_zinf(&mu, &full, 0.5));
    }

    #[test]
    fn h1_threshold() {
        let sys = line(ControlSet::ball(1.0));
        let mu = DiscreteMeasure::dirac(vec![0.0]);
        let r = h1(&sys, &mu, &Covector { p: vec![vec![-2.0]], p_omega: 1.0 }, 0.0).unwrap();
        assert_eq!(r.selection.controls, vec![vec![1.0]]);
        assert!((r.value + 1.0).abs() < 1e-12);
        let tie = h1(&sys, &mu, &Covector { p: vec![vec![-1.0]], p_omega: 1.0 }, 0.0).unwrap();
        assert_eq!(tie.selection.controls, vec![vec![0.0]]);
        let killed = h1(&sys, &two_points(), &Covector { p: vec![vec![-3.0], vec![2.0]], p_omega: 4.0 }, 1.0).unwrap();
        assert_eq!(killed.value, 1.0);
    }

    #[test]
    fn box_matches_ball_on_interval() {
        let ball = line(ControlSet::ball(1.0));
        let cube = line(ControlSet::cube(1, 1.0));
        let mu = two_points();
        let cov = Covector { p: vec![vec![-3.0], vec![-1.0]], p_omega: 0.0 };
        for alpha in [0.0, 0.25, 0.5, 0.75, 2.0] {
            let a = hinf(&ball, &mu, &cov, alpha, 0.0).unwrap();
            let b = hinf(&cube, &mu, &cov, alpha, 0.0).unwrap();
            assert!((a.value - b.value).abs() < 1e-6, "alpha {alpha}: {} vs {}", a.value, b.value);
            assert!(b.effort <= alpha + 1e-8);
        }
        let cov1 = Covector { p: vec![vec![-3.0], vec![-1.0]], p_omega: 2.0 };
        let a = h1(&ball, &mu, &cov1, 0.0).unwrap();
        let b = h1(&cube, &mu, &cov1, 0.0).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn box_in_plane_against_grid() {
        let sys = ControlSystem::new(
            VectorField::zero(2),
            vec![VectorField::constant(vec![1.0, 0.0]), VectorField::constant(vec![0.0, 1.0])],
            ControlSet::Box { lo: vec![-1.0, -0.5], hi: vec![1.0, 2.0] },
        )
        .unwrap();
        let mu = DiscreteMeasure::dirac(vec![0.0, 0.0]);
        let cov = Covector { p: vec![vec![0.3, -1.0]], p_omega: 0.0 };
        let alpha = 1.5;
        let r = hinf(&sys, &mu, &cov, alpha, 0.0).unwrap();
        let mut best = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let u = [-1.0 + 2.0 * i as f64 / n as f64, -0.5 + 2.5 * j as f64 / n as f64];
                if norm(&u) <= alpha {
                    best = best.min(0.3 * u[0] - u[1]);
                }
            }
        }
        assert!(r.value <= best + 1e-9 && r.value >= best - 1e-2, "{} vs {best}", r.value);
    }

    #[test]
    fn controls_are_norm_minimal() {
        let sys = ControlSystem::new(
            VectorField::zero(2),
            vec![VectorField::constant(vec![1.0, 0.0]), VectorField::constant(vec![1.0, 0.0])],
            ControlSet::ball(1.0),
        )
        .unwrap();
        let mu = DiscreteMeasure::dirac(vec![0.0, 0.0]);
        let r = hinf(&sys, &mu, &Covector { p: vec![vec![-1.0, 2.0]], p_omega: 0.0 }, 0.5, 0.0).unwrap();
        let u = &r.selection.controls[0];
        let ps = psi(&sys, &[0.0, 0.0], &r.selection.velocities[0]).unwrap();
        assert!((ps.value.to_f64() - norm(u)).abs() < 1e-9);
    }
}
