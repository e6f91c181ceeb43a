//! Control magnitude density `Ψ(x, v) = inf{|u| : u ∈ U, f(x, u) = v}` and
//! recovery of the norm-minimal control.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{ControlSet, ControlSystem, DynamicsError, TOL_U};
use crate::extended::ExtReal;
use crate::linalg::{min_norm_solve, norm, MinNormSolve};
use crate::measures::DiscreteMeasure;

/// Absolute tolerance on `|A u + f0 - v|`.
pub const TOL_RESIDUAL: f64 = 1e-7;
/// Objective tolerance of the iterative box path.
pub const TOL_QP: f64 = 1e-9;

/// Largest control dimension solved by active-set enumeration.
const MAX_ENUMERATED_DIM: usize = 8;
const MAX_QP_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsiResult {
    pub value: ExtReal,
    pub control: Option<Vec<f64>>,
    pub residual: f64,
    /// The singular-value cutoff discarded at least one direction of `A(x)`.
    #[serde(skip)]
    pub rank_deficient: bool,
}

impl PsiResult {
    fn infeasible(residual: f64, rank_deficient: bool) -> Self {
        PsiResult {
            value: ExtReal::Infinite,
            control: None,
            residual,
            rank_deficient,
        }
    }

    fn attained(control: Vec<f64>, residual: f64, rank_deficient: bool) -> Self {
        PsiResult {
            value: ExtReal::Finite(norm(&control)),
            control: Some(control),
            residual,
            rank_deficient,
        }
    }
}

pub fn psi(sys: &ControlSystem, x: &[f64], v: &[f64]) -> Result<PsiResult, DynamicsError> {
    if v.len() != sys.dim() {
        return Err(DynamicsError::Dimension(format!(
            "velocity has length {}, expected {}",
            v.len(),
            sys.dim()
        )));
    }
    let drift = sys.eval_drift(x)?;
    let a = sys.eval_matrix(x)?;
    let b = DVector::from_iterator(v.len(), v.iter().zip(&drift).map(|(vi, fi)| vi - fi));
    Ok(psi_affine(&a, &b, sys.control_set()))
}

/// `min{|u| : u ∈ U, A u = b}` for a fixed matrix.
pub fn psi_affine(a: &DMatrix<f64>, b: &DVector<f64>, set: &ControlSet) -> PsiResult {
    let solve = min_norm_solve(a, b);
    let deficient = solve.rank_deficient();
    let u0: Vec<f64> = solve.solution.iter().copied().collect();
    let r0 = residual(a, b, &u0);
    if r0 > TOL_RESIDUAL {
        return PsiResult::infeasible(r0, deficient);
    }
    if set.contains(&u0, TOL_U) {
        return PsiResult::attained(u0, r0, deficient);
    }
    match set {
        ControlSet::Ball { .. } => PsiResult::infeasible(r0, deficient),
        ControlSet::Box { lo, hi } => {
            let best = if a.ncols() <= MAX_ENUMERATED_DIM {
                box_active_sets(a, b, lo, hi)
            } else {
                box_dykstra(a, b, &solve, set)
            };
            match best {
                Some(u) => {
                    let r = residual(a, b, &u);
                    PsiResult::attained(u, r, deficient)
                }
                None => PsiResult::infeasible(box_feasibility_residual(a, b, set, &u0), deficient),
            }
        }
    }
}

fn residual(a: &DMatrix<f64>, b: &DVector<f64>, u: &[f64]) -> f64 {
    let mut sq = 0.0;
    for r in 0..a.nrows() {
        let mut acc = 0.0;
        for (j, uj) in u.iter().enumerate() {
            acc += a[(r, j)] * uj;
        }
        sq += (acc - b[r]) * (acc - b[r]);
    }
    sq.sqrt()
}

/// Exact minimum over every pattern of coordinates pinned at a bound. At the
/// optimum the free coordinates are the minimum-norm solution of the reduced
/// system, so each pattern yields at most one candidate.
fn box_active_sets(a: &DMatrix<f64>, b: &DVector<f64>, lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let m = a.ncols();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let patterns = 3usize.pow(m as u32);
    let mut state = vec![0u8; m];
    for code in 0..patterns {
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..m).filter(|&j| state[j] == 0).collect();
        let mut u = vec![0.0; m];
        for j in 0..m {
            u[j] = match state[j] {
                1 => lo[j],
                2 => hi[j],
                _ => 0.0,
            };
        }
        let mut rhs = b.clone();
        for j in (0..m).filter(|&j| state[j] != 0) {
            rhs.axpy(-u[j], &a.column(j), 1.0);
        }
        if !free.is_empty() {
            let af = a.select_columns(&free);
            let w = min_norm_solve(&af, &rhs).solution;
            for (k, &j) in free.iter().enumerate() {
                u[j] = w[k];
            }
        }
        let inside = (0..m).all(|j| u[j] >= lo[j] - TOL_U && u[j] <= hi[j] + TOL_U);
        if !inside || residual(a, b, &u) > TOL_RESIDUAL {
            continue;
        }
        for j in 0..m {
            u[j] = u[j].clamp(lo[j], hi[j]);
        }
        let n = norm(&u);
        if best.as_ref().map_or(true, |(bn, _)| n < *bn) {
            best = Some((n, u));
        }
    }
    best.map(|(_, u)| u)
}

/// Projection of the origin onto `{A u = b} ∩ U` by Dykstra's alternating
/// projections, for control dimensions too large to enumerate.
fn box_dykstra(a: &DMatrix<f64>, b: &DVector<f64>, solve: &MinNormSolve, set: &ControlSet) -> Option<Vec<f64>> {
    let m = a.ncols();
    let u0 = &solve.solution;
    let project_affine = |u: &DVector<f64>| -> DVector<f64> {
        let diff = u - u0;
        let mut out = u0.clone();
        for n in &solve.null_basis {
            out.axpy(n.dot(&diff), n, 1.0);
        }
        out
    };
    let mut x = DVector::zeros(m);
    let mut p = DVector::zeros(m);
    let mut q = DVector::zeros(m);
    let mut prev_obj = f64::INFINITY;
    for _ in 0..MAX_QP_ITERS {
        let y = project_affine(&(&x + &p));
        p = &x + &p - &y;
        let z = DVector::from_vec(set.project((&y + &q).as_slice()));
        q = &y + &q - &z;
        x = z;
        let obj = x.norm_squared();
        if (prev_obj - obj).abs() <= TOL_QP && residual(a, b, x.as_slice()) <= TOL_RESIDUAL {
            break;
        }
        prev_obj = obj;
    }
    let u: Vec<f64> = x.iter().copied().collect();
    (residual(a, b, &u) <= TOL_RESIDUAL).then_some(u)
}

/// Smallest residual `|A u - b|` over the box, by projected gradient with
/// Armijo backtracking. Reported when the velocity is declared infeasible.
fn box_feasibility_residual(a: &DMatrix<f64>, b: &DVector<f64>, set: &ControlSet, start: &[f64]) -> f64 {
    let objective = |u: &[f64]| 0.5 * residual(a, b, u).powi(2);
    let mut u = set.project(start);
    let mut f = objective(&u);
    let mut step = 1.0;
    for _ in 0..MAX_QP_ITERS {
        let r = a * DVector::from_column_slice(&u) - b;
        let g = a.transpose() * r;
        let mut accepted = false;
        while step > 1e-16 {
            let trial: Vec<f64> = set.project(&u.iter().zip(g.iter()).map(|(ui, gi)| ui - step * gi).collect::<Vec<_>>());
            let ft = objective(&trial);
            let moved: f64 = trial.iter().zip(&u).zip(g.iter()).map(|((t, ui), gi)| gi * (ui - t)).sum();
            if ft <= f - 1e-4 * moved {
                let done = f - ft <= TOL_QP * TOL_QP;
                u = trial;
                f = ft;
                accepted = !done;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (2.0 * f).sqrt()
}

/// Per-particle `Ψ` together with the instantaneous effort `Σ w_i Ψ_i`.
#[derive(Debug, Clone, Serialize)]
pub struct FieldEffort {
    pub results: Vec<PsiResult>,
    pub total: ExtReal,
}

pub fn min_norm_field(
    sys: &ControlSystem,
    mu: &DiscreteMeasure,
    velocities: &[Vec<f64>],
) -> Result<FieldEffort, DynamicsError> {
    if velocities.len() != mu.len() {
        return Err(DynamicsError::Dimension(format!(
            "{} velocities for {} particles",
            velocities.len(),
            mu.len()
        )));
    }
    let results = mu
        .points()
        .par_iter()
        .zip(velocities.par_iter())
        .map(|(x, v)| psi(sys, x, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = ExtReal::ZERO;
    for (r, &w) in results.iter().zip(mu.weights()) {
        total = total
            + match r.value {
                ExtReal::Finite(val) => ExtReal::Finite(w * val),
                ExtReal::Infinite => ExtReal::Infinite,
            };
    }
    Ok(FieldEffort { results, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VectorField;

    fn planar() -> ControlSystem {
        ControlSystem::new(
            VectorField::constant(vec![1.0, 0.0]),
            vec![VectorField::constant(vec![0.0, 1.0])],
            ControlSet::ball(1.0),
        )
        .unwrap()
    }

    #[test]
    fn planar_values() {
        let sys = planar();
        let up = psi(&sys, &[0.3, -2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(up.value, ExtReal::Finite(1.0));
        assert_eq!(up.control, Some(vec![1.0]));
        let down = psi(&sys, &[0.3, -2.0], &[1.0, -1.0]).unwrap();
        assert_eq!(down.value, ExtReal::Finite(1.0));
        let drift = psi(&sys, &[0.3, -2.0], &[1.0, 0.0]).unwrap();
        assert_eq!(drift.value, ExtReal::Finite(0.0));
        assert_eq!(drift.control, Some(vec![0.0]));
        // outside F(x): wrong horizontal speed, or too fast vertically
        assert_eq!(psi(&sys, &[0.0, 0.0], &[2.0, 0.0]).unwrap().value, ExtReal::Infinite);
        let fast = psi(&sys, &[0.0, 0.0], &[1.0, 1.5]).unwrap();
        assert_eq!(fast.value, ExtReal::Infinite);
        assert!(fast.control.is_none());
    }

    #[test]
    fn rank_one_ball() {
        let sys = ControlSystem::new(
            VectorField::zero(2),
            vec![VectorField::constant(vec![1.0, 1.0]), VectorField::constant(vec![1.0, 1.0])],
            ControlSet::ball(2.0),
        )
        .unwrap();
        let r = psi(&sys, &[0.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!(r.value.approx_eq(ExtReal::Finite(2f64.sqrt()), 1e-12));
        let u = r.control.unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 1.0).abs() < 1e-12);
        assert!(r.rank_deficient);
    }

    #[test]
    fn box_path_leaves_ball_minimiser() {
        // A = [1 1], b = 1; ball point (0.5, 0.5) violates u1 <= 0.2
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let set = ControlSet::Box { lo: vec![-1.0, -1.0], hi: vec![0.2, 1.0] };
        let r = psi_affine(&a, &DVector::from_vec(vec![1.0]), &set);
        let u = r.control.unwrap();
        assert!((u[0] - 0.2).abs() < 1e-12 && (u[1] - 0.8).abs() < 1e-12);
        // b = 3 is beyond the box
        let r = psi_affine(&a, &DVector::from_vec(vec![3.0]), &set);
        assert_eq!(r.value, ExtReal::Infinite);
        assert!((r.residual - 1.8).abs() < 1e-6);
    }

    #[test]
    fn dykstra_agrees_with_enumeration() {
        let m = 3;
        let a = DMatrix::from_row_slice(1, m, &[1.0, 2.0, -1.0]);
        let b = DVector::from_vec(vec![1.5]);
        let set = ControlSet::Box { lo: vec![-0.3; m], hi: vec![0.6; m] };
        let ControlSet::Box { lo, hi } = &set else { unreachable!() };
        let exact = box_active_sets(&a, &b, lo, hi).unwrap();
        let solve = min_norm_solve(&a, &b);
        let approx = box_dykstra(&a, &b, &solve, &set).unwrap();
        assert!((norm(&exact) - norm(&approx)).abs() < 1e-6);
    }

    #[test]
    fn field_effort_examples() {
        let sys = planar();
        let mu = DiscreteMeasure::uniform(vec![vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let eff = min_norm_field(&sys, &mu, &[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(eff.total, ExtReal::Finite(1.0));
        let still = min_norm_field(&sys, &mu, &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(still.total, ExtReal::ZERO);
        let one = DiscreteMeasure::uniform(vec![vec![0.0, 0.0]]).unwrap();
        let bad = min_norm_field(&sys, &one, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(bad.total, ExtReal::Infinite);
    }
}
