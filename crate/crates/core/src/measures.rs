//! Discrete probability measures `Σ w_i δ_{x_i}` and target sets.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist, norm};
use crate::transport::wasserstein;

/// Tolerance for support inclusion in set targets.
pub const TOL_TARGET: f64 = 1e-9;
/// Tolerance for matching atoms by position and weight.
pub const TOL_MATCH: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("atom {index} has dimension {found}, expected {expected}")]
    Dimension { index: usize, found: usize, expected: usize },
    #[error("{points} points but {weights} weights")]
    WeightCount { points: usize, weights: usize },
    #[error("weight {index} is negative or not finite")]
    BadWeight { index: usize },
    #[error("atom {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("weights sum to zero")]
    ZeroMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureJson", into = "MeasureJson")]
pub struct DiscreteMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl TryFrom<MeasureJson> for DiscreteMeasure {
    type Error = MeasureError;

    fn try_from(raw: MeasureJson) -> Result<Self, MeasureError> {
        match raw.weights {
            Some(w) => DiscreteMeasure::new(raw.points, w),
            None => DiscreteMeasure::uniform(raw.points),
        }
    }
}

impl From<DiscreteMeasure> for MeasureJson {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureJson {
            points: m.points,
            weights: Some(m.weights),
        }
    }
}

impl DiscreteMeasure {
    /// Drops zero-weight atoms and renormalizes to unit mass.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if points.len() != weights.len() {
            return Err(MeasureError::WeightCount {
                points: points.len(),
                weights: weights.len(),
            });
        }
        if points.is_empty() {
            return Err(MeasureError::Empty);
        }
        let d = points[0].len();
        for (index, (p, &w)) in points.iter().zip(&weights).enumerate() {
            if p.len() != d {
                return Err(MeasureError::Dimension {
                    index,
                    found: p.len(),
                    expected: d,
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(MeasureError::NonFinite { index });
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(MeasureError::BadWeight { index });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(MeasureError::ZeroMass);
        }
        // near-unit totals are kept as given
        let scale = if (total - 1.0).abs() <= 1e-12 { 1.0 } else { total };
        let (points, weights): (Vec<_>, Vec<_>) = points
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0)
            .map(|(p, w)| (p, w / scale))
            .unzip();
        Ok(DiscreteMeasure { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        DiscreteMeasure {
            points: vec![point],
            weights: vec![1.0],
        }
    }

    /// Builds a measure from weights already known to be positive and
    /// normalized, keeping them bit-for-bit.
    pub(crate) fn from_parts(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), weights.len());
        DiscreteMeasure { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ w_i |x_i|^p`.
    pub fn moment(&self, p: f64) -> f64 {
        assert!(p >= 1.0, "moment order must be at least 1");
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * norm(x).powf(p))
            .sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (x, w) in self.points.iter().zip(&self.weights) {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Image measure under `map`; coincident images stay separate atoms.
    pub fn pushforward<F: Fn(&[f64]) -> Vec<f64>>(&self, map: F) -> DiscreteMeasure {
        DiscreteMeasure {
            points: self.points.iter().map(|x| map(x)).collect(),
            weights: self.weights.clone(),
        }
    }

    /// Atoms sorted lexicographically with coincident positions (within
    /// `tol`) merged.
    pub fn canonical_atoms(&self, tol: f64) -> Vec<(Vec<f64>, f64)> {
        let mut atoms: Vec<(Vec<f64>, f64)> = self
            .points
            .iter()
            .cloned()
            .zip(self.weights.iter().copied())
            .collect();
        atoms.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        let mut merged: Vec<(Vec<f64>, f64)> = Vec::with_capacity(atoms.len());
        for (p, w) in atoms {
            match merged.last_mut() {
                Some((q, wq)) if dist(q, &p) <= tol => *wq += w,
                _ => merged.push((p, w)),
            }
        }
        merged
    }

    /// Equality as atom multisets after merging coincident atoms.
    pub fn same_atoms(&self, other: &DiscreteMeasure, tol: f64) -> bool {
        let a = self.canonical_atoms(tol);
        let b = other.canonical_atoms(tol);
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((p, w), (q, v))| (w - v).abs() <= tol && dist(p, q) <= tol)
    }

    /// Mass outside a set target.
    pub fn mass_outside(&self, set: &TargetSpec) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .filter(|(x, _)| set.point_distance(x) > TOL_TARGET)
            .map(|(_, w)| w)
            .sum()
    }
}

pub fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            ord => return ord,
        }
    }
    a.len().cmp(&b.len())
}

/// Either a finite list of desired measures or a set that must contain the
/// support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    Measures { measures: Vec<DiscreteMeasure> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl TargetSpec {
    pub fn is_set(&self) -> bool {
        !matches!(self, TargetSpec::Measures { .. })
    }

    /// Euclidean distance from a point to a set target; zero for measure lists.
    pub fn point_distance(&self, x: &[f64]) -> f64 {
        match self {
            TargetSpec::Measures { .. } => 0.0,
            TargetSpec::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&xi, (&l, &h))| {
                    let e = if xi < l { l - xi } else if xi > h { xi - h } else { 0.0 };
                    e * e
                })
                .sum::<f64>()
                .sqrt(),
            TargetSpec::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            TargetSpec::Measures { measures } => measures.first().map(|m| m.dim()),
            TargetSpec::Box { lo, .. } => Some(lo.len()),
            TargetSpec::Ball { center, .. } => Some(center.len()),
        }
    }
}

/// `min_θ W2(μ, θ)` for measure lists, `max_i dist(x_i, S)` for set targets.
pub fn target_distance(mu: &DiscreteMeasure, target: &TargetSpec) -> f64 {
    match target {
        TargetSpec::Measures { measures } => measures
            .iter()
            .map(|theta| wasserstein(mu, theta, 2.0).distance)
            .fold(f64::INFINITY, f64::min),
        _ => mu
            .points()
            .iter()
            .map(|x| target.point_distance(x))
            .fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_normalizes_and_drops_zeros() {
        let m = DiscreteMeasure::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![2.0, 0.0, 2.0]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert_eq!(DiscreteMeasure::new(vec![], vec![]), Err(MeasureError::Empty));
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![-1.0]).is_err());
    }

    #[test]
    fn moment_examples() {
        assert_eq!(DiscreteMeasure::dirac(vec![0.0, 0.0]).moment(2.0), 0.0);
        let a3 = DiscreteMeasure::uniform(vec![vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        assert_eq!(a3.moment(2.0), 1.0);
        let m = DiscreteMeasure::new(vec![vec![1.0], vec![2.0]], vec![1.0, 2.0]).unwrap();
        assert!((m.moment(1.0) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pushforward_examples() {
        let m = DiscreteMeasure::uniform(vec![vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(m.pushforward(|x| x.to_vec()), m);
        let sq = m.pushforward(|x| vec![x[0] * x[0]]);
        assert_eq!(sq.points(), &[vec![1.0], vec![1.0]]);
        assert!(sq.same_atoms(&DiscreteMeasure::dirac(vec![1.0]), 1e-12));

        let m = DiscreteMeasure::new(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], vec![0.3, 0.7]).unwrap();
        let c = [0.4, -1.1];
        let moved = m.pushforward(|x| vec![x[0] + c[0], x[1] + c[1]]);
        let mean = m.mean();
        let expected = m.moment(2.0) + 2.0 * (c[0] * mean[0] + c[1] * mean[1]) + c[0] * c[0] + c[1] * c[1];
        assert!((moved.moment(2.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn target_distance_examples() {
        let mu = DiscreteMeasure::uniform(vec![vec![0.0], vec![2.0]]).unwrap();
        let list = TargetSpec::Measures { measures: vec![DiscreteMeasure::dirac(vec![5.0]), mu.clone()] };
        assert!(target_distance(&mu, &list) < 1e-12);
        let bx = TargetSpec::Box { lo: vec![-1.0], hi: vec![3.0] };
        assert_eq!(target_distance(&mu, &bx), 0.0);
        let unit = TargetSpec::Box { lo: vec![0.0], hi: vec![1.0] };
        assert_eq!(target_distance(&DiscreteMeasure::dirac(vec![2.0]), &unit), 1.0);
        let ball = TargetSpec::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        assert!((target_distance(&DiscreteMeasure::dirac(vec![3.0, 4.0]), &ball) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let m = DiscreteMeasure::new(vec![vec![0.1, 1.0 / 3.0], vec![-2.5e-17, 7.0]], vec![1.0, 2.0]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: DiscreteMeasure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let uniform: DiscreteMeasure = serde_json::from_str(r#"{"points":[[0],[1]]}"#).unwrap();
        assert_eq!(uniform.weights(), &[0.5, 0.5]);
    }
}
