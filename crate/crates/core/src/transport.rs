//! Exact discrete optimal transport.
//!
//! Uniform measures with the same number of atoms go through the Hungarian
//! method; everything else through the transportation simplex with
//! north-west-corner start and Bland's pivoting rule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::linalg::dist;
use crate::measures::DiscreteMeasure;

/// Sparse coupling as `(source atom, target atom, mass)` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub coupling: Vec<(usize, usize, f64)>,
}

impl TransportPlan {
    pub fn row_sums(&self, n: usize) -> Vec<f64> {
        let mut s = vec![0.0; n];
        for &(i, _, m) in &self.coupling {
            s[i] += m;
        }
        s
    }

    pub fn col_sums(&self, n: usize) -> Vec<f64> {
        let mut s = vec![0.0; n];
        for &(_, j, m) in &self.coupling {
            s[j] += m;
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Transport {
    /// `W_p`, the p-th root of the optimal cost.
    pub distance: f64,
    /// Optimal value of `Σ π_ij |x_i - y_j|^p`.
    pub cost: f64,
    pub plan: TransportPlan,
}

pub fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Vec<Vec<f64>> {
    mu.points()
        .iter()
        .map(|x| nu.points().iter().map(|y| dist(x, y).powf(p)).collect())
        .collect()
}

pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Transport {
    assert!(p >= 1.0, "Wasserstein order must be at least 1");
    let cost = cost_matrix(mu, nu, p);
    let plan = if is_uniform(mu) && is_uniform(nu) && mu.len() == nu.len() {
        let assignment = hungarian(&cost);
        TransportPlan {
            coupling: assignment
                .into_iter()
                .enumerate()
                .map(|(i, j)| (i, j, mu.weights()[i]))
                .collect(),
        }
    } else {
        transportation_simplex(mu.weights(), nu.weights(), &cost)
    };
    let total: f64 = plan.coupling.iter().map(|&(i, j, m)| m * cost[i][j]).sum();
    let total = total.max(0.0);
    Transport {
        distance: total.powf(1.0 / p),
        cost: total,
        plan,
    }
}

fn is_uniform(mu: &DiscreteMeasure) -> bool {
    let w0 = 1.0 / mu.len() as f64;
    mu.weights().iter().all(|w| (w - w0).abs() <= 1e-15)
}

/// Minimum-cost perfect assignment on a square matrix; `result[i]` is the
/// column matched to row `i`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[row_of[j] - 1] = j - 1;
    }
    result
}

/// Transportation simplex on the bipartite supply/demand graph. The basis is
/// kept as a spanning tree of `m + n - 1` cells, degenerate zeros included.
pub fn transportation_simplex(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    let m = supply.len();
    let n = demand.len();
    let mut basis: Vec<(usize, usize, f64)> = Vec::with_capacity(m + n - 1);
    {
        let mut a = supply.to_vec();
        let mut b = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]).max(0.0);
            basis.push((i, j, x));
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    let scale = cost.iter().flatten().fold(1.0_f64, |acc, c| acc.max(c.abs()));
    let eps = 1e-13 * scale;
    let mut in_basis = vec![vec![usize::MAX; n]; m];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        in_basis[i][j] = k;
    }
    let max_iters = 50 * (m * n + m + n) + 1000;
    for _ in 0..max_iters {
        let (u, v) = potentials(m, n, &basis, cost);
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i][j] == usize::MAX && cost[i][j] - u[i] - v[j] < -eps {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        let path = tree_path(m, n, &basis, ei, ej);
        // path cells alternate -, +, -, ... starting at the entering row
        let mut leave: Option<(usize, f64)> = None;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let (i, j, x) = basis[k];
                let better = match leave {
                    None => true,
                    Some((lk, lx)) => x < lx || (x == lx && (i, j) < (basis[lk].0, basis[lk].1)),
                };
                if better {
                    leave = Some((k, x));
                }
            }
        }
        let (lk, theta) = leave.expect("cycle has a decreasing cell");
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[k].2 = (basis[k].2 - theta).max(0.0);
            } else {
                basis[k].2 += theta;
            }
        }
        let (li, lj, _) = basis[lk];
        in_basis[li][lj] = usize::MAX;
        basis[lk] = (ei, ej, theta);
        in_basis[ei][ej] = lk;
    }
    let mut coupling: Vec<(usize, usize, f64)> = basis.into_iter().filter(|&(_, _, x)| x > 0.0).collect();
    coupling.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    TransportPlan { coupling }
}

/// Dual potentials with `u[0] = 0` from the basis tree.
fn potentials(m: usize, n: usize, basis: &[(usize, usize, f64)], cost: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(m, n, basis);
    let mut pot = vec![0.0; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::new();
    seen[0] = true;
    queue.push_back(0);
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                let (i, j, _) = basis[k];
                // u_i + v_j = c_ij on basic cells
                pot[next] = cost[i][j] - pot[node];
                queue.push_back(next);
            }
        }
    }
    let v = pot.split_off(m);
    (pot, v)
}

fn adjacency(m: usize, n: usize, basis: &[(usize, usize, f64)]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); m + n];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        adj[i].push((m + j, k));
        adj[m + j].push((i, k));
    }
    adj
}

/// Basis cells on the tree path from row `i` to column `j`, ordered from the
/// row end.
fn tree_path(m: usize, n: usize, basis: &[(usize, usize, f64)], i: usize, j: usize) -> Vec<usize> {
    let adj = adjacency(m, n, basis);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::new();
    seen[i] = true;
    queue.push_back(i);
    while let Some(node) = queue.pop_front() {
        if node == m + j {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = m + j;
    while node != i {
        let (prev, k) = parent[node].expect("basis is a spanning tree");
        cells.push(k);
        node = prev;
    }
    cells.reverse();
    cells
}
