//! Small dense linear algebra on top of nalgebra's SVD.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for pseudo-inverses and ranks.
pub const SIGMA_CUTOFF: f64 = 1e-10;

/// Minimum-norm least-squares solution of `A u = b` together with a basis of
/// the numerical null space of `A`.
#[derive(Debug, Clone)]
pub struct MinNormSolve {
    pub solution: DVector<f64>,
    pub rank: usize,
    /// Orthonormal vectors spanning the discarded right-singular directions.
    pub null_basis: Vec<DVector<f64>>,
}

impl MinNormSolve {
    pub fn rank_deficient(&self) -> bool {
        !self.null_basis.is_empty()
    }
}

/// Pads `a` with zero rows until it has at least as many rows as columns so
/// that the SVD returns a complete set of right-singular vectors.
fn padded(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows >= cols {
        return a.clone();
    }
    let mut out = DMatrix::zeros(cols, cols);
    out.view_mut((0, 0), (rows, cols)).copy_from(a);
    out
}

pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> MinNormSolve {
    let (rows, cols) = a.shape();
    assert_eq!(b.len(), rows, "rhs length mismatch");
    if cols == 0 {
        return MinNormSolve {
            solution: DVector::zeros(0),
            rank: 0,
            null_basis: Vec::new(),
        };
    }
    let work = padded(a);
    let mut rhs = DVector::zeros(work.nrows());
    rhs.rows_mut(0, rows).copy_from(b);

    let svd = work.svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cut = SIGMA_CUTOFF * sigma_max;

    let mut solution = DVector::zeros(cols);
    let mut null_basis = Vec::new();
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let v_i = v_t.row(i).transpose();
        if s > cut && s > 0.0 {
            rank += 1;
            let coef = u.column(i).dot(&rhs) / s;
            solution.axpy(coef, &v_i, 1.0);
        } else {
            null_basis.push(v_i);
        }
    }
    if rank == cols {
        // unique least-squares solution; keep the candidate with the smaller residual
        let qr = a.clone().qr();
        let candidates = [
            normal_equations(a, b),
            qr.r().solve_upper_triangular(&(qr.q().transpose() * b)),
        ];
        let mut best = (a * &solution - b).norm();
        for cand in candidates.into_iter().flatten() {
            let r = (a * &cand - b).norm();
            if cand.iter().all(|x| x.is_finite()) && r <= best {
                best = r;
                solution = cand;
                if r == 0.0 {
                    break;
                }
            }
        }
    }
    MinNormSolve {
        solution,
        rank,
        null_basis,
    }
}

/// Cholesky solve of `AᵀA u = Aᵀb` with one step of iterative refinement.
fn normal_equations(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let at = a.transpose();
    let chol = (&at * a).cholesky()?;
    let mut u = chol.solve(&(&at * b));
    let correction = chol.solve(&(&at * (b - a * &u)));
    let refined = &u + correction;
    if (a * &refined - b).norm() < (a * &u - b).norm() {
        u = refined;
    }
    Some(u)
}

pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let cut = SIGMA_CUTOFF * sigma_max;
    sv.iter().filter(|&&s| s > cut && s > 0.0).count()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
