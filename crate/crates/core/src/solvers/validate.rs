//! Checks a computed optimum against the dynamic programming principle by
//! re-solving from intermediate marginals.

use serde::Serialize;

use super::{averaged_from, effort_from, min_time_from, SolveError, SolveResult, Start};
use crate::ensemble::Ensemble;
use crate::extended::ExtReal;
use crate::scenario::{CostSpec, Scenario};

/// Inner tolerance credited to the terminal-cost local search.
pub const TOL_EFFORT_SEARCH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppSample {
    pub index: usize,
    pub time: f64,
    /// Cost accrued on `[0, t_k]`.
    pub elapsed: f64,
    /// Re-solved value from `μ_{t_k}`.
    pub value_to_go: ExtReal,
    pub h: ExtReal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub samples: Vec<DppSample>,
    pub tol_dpp: f64,
    pub monotone: bool,
    pub max_decrease: f64,
    pub constant: bool,
    /// `max h - min h`.
    pub spread: f64,
}

/// `dt Σ_{j<k} Σ_i w_i [x_i(t_j) ∉ S]`.
pub(crate) fn outside_integral(sc: &Scenario, ens: &Ensemble, k: usize) -> f64 {
    let dt = ens.grid().dt();
    (0..k)
        .map(|j| {
            (0..ens.len())
                .filter(|&i| sc.target.point_distance(ens.position(i, j)) > sc.solver.tol_target)
                .map(|i| ens.weights()[i])
                .sum::<f64>()
        })
        .sum::<f64>()
        * dt
}

fn elapsed(sc: &Scenario, ens: &Ensemble, k: usize) -> f64 {
    match sc.cost {
        CostSpec::MinTime => k as f64 * ens.grid().dt(),
        CostSpec::AveragedMinTime => outside_integral(sc, ens, k),
        CostSpec::TerminalW2PlusEffort { .. } => ens.omega(k) - ens.omega(0),
    }
}

fn sample_indices(steps: usize, samples: usize) -> Vec<usize> {
    if steps == 0 {
        return vec![0];
    }
    let s = samples.max(1);
    let mut idx: Vec<usize> = (0..=s).map(|j| ((j * steps) as f64 / s as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// Re-solves from `samples + 1` evenly spaced grid times (including the
/// start) and checks that `h(t_k) = c(0 -> t_k) + V(μ_{t_k})` is nondecreasing
/// and constant within `tol_dpp = max(2 tol_inner, 1e-3 value)`.
pub fn validate_optimum(sc: &Scenario, res: &SolveResult, samples: usize) -> Result<DppReport, SolveError> {
    let tol_inner = match sc.cost {
        CostSpec::MinTime | CostSpec::AveragedMinTime => sc.solver.dt,
        CostSpec::TerminalW2PlusEffort { .. } => TOL_EFFORT_SEARCH,
    };
    let value = res.value.finite();
    let tol_dpp = (2.0 * tol_inner).max(1e-3 * value.unwrap_or(0.0).abs());
    let (Some(_), Some(ens)) = (value, res.ensemble.as_ref()) else {
        return Ok(DppReport {
            samples: Vec::new(),
            tol_dpp,
            monotone: true,
            max_decrease: 0.0,
            constant: true,
            spread: 0.0,
        });
    };
    let mut resolve = sc.clone();
    resolve.solver.t_lo = 0.0;
    resolve.solver.menu = None;
    let steps = ens.grid().steps();
    let mut out = Vec::new();
    for k in sample_indices(steps, samples) {
        let to_go = if k == steps && !matches!(sc.cost, CostSpec::TerminalW2PlusEffort { .. }) {
            ExtReal::Finite(0.0)
        } else {
            let start = Start {
                mu: ens.marginal(k),
                offsets: ens.zeta().iter().map(|z| z[k]).collect(),
            };
            let remaining = steps - k;
            match sc.cost {
                CostSpec::MinTime => min_time_from(&resolve, &start, Some(remaining))?.value,
                CostSpec::AveragedMinTime => averaged_from(&resolve, &start, Some(remaining))?.value,
                CostSpec::TerminalW2PlusEffort { .. } => effort_from(&resolve, &start, remaining, ens.grid().dt())?.value,
            }
        };
        let e = elapsed(sc, ens, k);
        out.push(DppSample {
            index: k,
            time: ens.grid().time(k),
            elapsed: e,
            value_to_go: to_go,
            h: to_go + e,
        });
    }
    let hs: Vec<f64> = out.iter().map(|s| s.h.to_f64()).collect();
    let max_decrease = hs.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    let finite = hs.iter().all(|h| h.is_finite());
    let spread = if finite {
        hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - hs.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        f64::INFINITY
    };
    Ok(DppReport {
        samples: out,
        tol_dpp,
        monotone: finite && max_decrease <= tol_dpp,
        max_decrease,
        constant: spread <= tol_dpp,
        spread,
    })
}
