//! Control-affine dynamics `f(x, u) = f0(x) + A(x) u` with a convex compact
//! control set containing the origin.
//!
//! Global growth and rank conditions cannot be verified for arbitrary fields,
//! so a [`ControlSystem`] is validated on a finite probe set and carries the
//! sampled constants it was built with.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expr, EvalError, ExprAst, SyntaxError};
use crate::linalg::{self, norm};

/// Membership tolerance for the control set.
pub const TOL_U: f64 = 1e-9;
/// Relative slack allowed on the linear growth bound.
pub const TOL_GROWTH: f64 = 1e-6;
/// Highest total degree accepted for polynomial fields.
pub const MAX_POLY_DEGREE: u32 = 8;

const DEFAULT_PROBE_COUNT: usize = 1000;
const DEFAULT_PROBE_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid control set: {0}")]
    InvalidControlSet(String),
    #[error("control lies outside U (distance {distance:e})")]
    ControlOutOfSet { distance: f64 },
    #[error("field evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid expression in component {component}: {source}")]
    Syntax {
        component: usize,
        #[source]
        source: SyntaxError,
    },
    #[error("rank of A(x) is not constant over the probes (observed ranks {observed:?})")]
    RankNotConstant { observed: Vec<usize> },
    #[error("field evaluation failed at probe {probe}: {message}")]
    ProbeFailure { probe: usize, message: String },
    #[error("invalid polynomial field: {0}")]
    Polynomial(String),
}

/// One monomial `coef * x1^p1 * ... * xd^pd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Serialized description of a vector field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldSpec {
    Constant { value: Vec<f64> },
    Linear { matrix: Vec<Vec<f64>> },
    Polynomial { components: Vec<Vec<Monomial>> },
    Expr { components: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
enum FieldKind {
    Constant(Vec<f64>),
    Linear(DMatrix<f64>),
    Polynomial(Vec<Vec<Monomial>>),
    Expr(Vec<ExprAst>),
}

/// A continuous map `R^d -> R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dim: usize,
    kind: FieldKind,
}

impl VectorField {
    pub fn constant(value: Vec<f64>) -> Self {
        VectorField {
            dim: value.len(),
            kind: FieldKind::Constant(value),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn linear(matrix: DMatrix<f64>) -> Result<Self, DynamicsError> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(DynamicsError::Dimension(format!(
                "linear field needs a square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(VectorField {
            dim: matrix.nrows(),
            kind: FieldKind::Linear(matrix),
        })
    }

    /// `x -> a x`.
    pub fn scaled_identity(dim: usize, a: f64) -> Self {
        VectorField {
            dim,
            kind: FieldKind::Linear(DMatrix::identity(dim, dim) * a),
        }
    }

    pub fn polynomial(dim: usize, components: Vec<Vec<Monomial>>) -> Result<Self, DynamicsError> {
        if components.len() != dim {
            return Err(DynamicsError::Dimension(format!(
                "polynomial field has {} components, expected {dim}",
                components.len()
            )));
        }
        for mono in components.iter().flatten() {
            if mono.powers.len() != dim {
                return Err(DynamicsError::Polynomial(format!(
                    "monomial has {} exponents, expected {dim}",
                    mono.powers.len()
                )));
            }
            let degree: u32 = mono.powers.iter().sum();
            if degree > MAX_POLY_DEGREE {
                return Err(DynamicsError::Polynomial(format!(
                    "degree {degree} exceeds {MAX_POLY_DEGREE}"
                )));
            }
            if !mono.coef.is_finite() {
                return Err(DynamicsError::Polynomial("non-finite coefficient".into()));
            }
        }
        Ok(VectorField {
            dim,
            kind: FieldKind::Polynomial(components),
        })
    }

    pub fn expr(dim: usize, components: Vec<ExprAst>) -> Result<Self, DynamicsError> {
        if components.len() != dim {
            return Err(DynamicsError::Dimension(format!(
                "expression field has {} components, expected {dim}",
                components.len()
            )));
        }
        if let Some(bad) = components.iter().map(ExprAst::max_var).find(|&v| v > dim) {
            return Err(DynamicsError::Dimension(format!(
                "expression uses x{bad} but the state dimension is {dim}"
            )));
        }
        Ok(VectorField {
            dim,
            kind: FieldKind::Expr(components),
        })
    }

    pub fn from_spec(dim: usize, spec: &FieldSpec) -> Result<Self, DynamicsError> {
        let field = match spec {
            FieldSpec::Constant { value } => Self::constant(value.clone()),
            FieldSpec::Linear { matrix } => {
                let rows = matrix.len();
                if matrix.iter().any(|r| r.len() != rows) {
                    return Err(DynamicsError::Dimension("linear matrix must be square".into()));
                }
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                Self::linear(DMatrix::from_row_slice(rows, rows, &flat))?
            }
            FieldSpec::Polynomial { components } => Self::polynomial(dim, components.clone())?,
            FieldSpec::Expr { components } => {
                let asts = components
                    .iter()
                    .enumerate()
                    .map(|(component, src)| {
                        parse_expr(src).map_err(|source| DynamicsError::Syntax { component, source })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Self::expr(dim, asts)?
            }
        };
        if field.dim != dim {
            return Err(DynamicsError::Dimension(format!(
                "field has dimension {}, expected {dim}",
                field.dim
            )));
        }
        Ok(field)
    }

    pub fn to_spec(&self) -> FieldSpec {
        match &self.kind {
            FieldKind::Constant(v) => FieldSpec::Constant { value: v.clone() },
            FieldKind::Linear(m) => FieldSpec::Linear {
                matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
            },
            FieldKind::Polynomial(c) => FieldSpec::Polynomial { components: c.clone() },
            FieldKind::Expr(c) => FieldSpec::Expr {
                components: c.iter().map(ToString::to_string).collect(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        match &self.kind {
            FieldKind::Constant(v) => Ok(v.clone()),
            FieldKind::Linear(m) => Ok((0..self.dim)
                .map(|r| (0..self.dim).map(|c| m[(r, c)] * x[c]).sum())
                .collect()),
            FieldKind::Polynomial(components) => Ok(components
                .iter()
                .map(|monos| {
                    monos
                        .iter()
                        .map(|mono| {
                            mono.powers
                                .iter()
                                .zip(x)
                                .fold(mono.coef, |acc, (&p, &xi)| acc * xi.powi(p as i32))
                        })
                        .sum()
                })
                .collect()),
            FieldKind::Expr(components) => components.iter().map(|e| e.eval(x)).collect(),
        }
    }

    /// [`VectorField::eval`] into `out`, without allocating for constant and
    /// linear fields.
    pub(crate) fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        match &self.kind {
            FieldKind::Constant(v) => out.copy_from_slice(v),
            FieldKind::Linear(m) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|c| m[(r, c)] * x[c]).sum();
                }
            }
            _ => out.copy_from_slice(&self.eval(x)?),
        }
        Ok(())
    }

    /// Closed-form `(a, b)` with `|f(x)| <= a + b |x|` for constant and linear
    /// fields; `None` for fields without one.
    fn affine_bound(&self) -> Option<(f64, f64)> {
        match &self.kind {
            FieldKind::Constant(v) => Some((norm(v), 0.0)),
            FieldKind::Linear(m) => {
                let spectral = m.clone().singular_values().iter().cloned().fold(0.0, f64::max);
                Some((0.0, spectral))
            }
            _ => None,
        }
    }
}

/// Convex compact control set containing the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControlSet {
    Ball { radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlSet {
    pub fn ball(radius: f64) -> Self {
        ControlSet::Ball { radius }
    }

    /// Symmetric interval `[-r, r]^m` as a box.
    pub fn cube(m: usize, r: f64) -> Self {
        ControlSet::Box {
            lo: vec![-r; m],
            hi: vec![r; m],
        }
    }

    pub fn check(&self, m: usize) -> Result<(), DynamicsError> {
        match self {
            ControlSet::Ball { radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(DynamicsError::InvalidControlSet(format!(
                        "ball radius must be positive and finite, got {radius}"
                    )));
                }
            }
            ControlSet::Box { lo, hi } => {
                if lo.len() != m || hi.len() != m {
                    return Err(DynamicsError::InvalidControlSet(format!(
                        "box bounds have lengths {}/{}, expected {m}",
                        lo.len(),
                        hi.len()
                    )));
                }
                for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
                    if !(l.is_finite() && h.is_finite()) {
                        return Err(DynamicsError::InvalidControlSet(format!(
                            "bound {j} is not finite"
                        )));
                    }
                    if !(l <= 0.0 && 0.0 <= h) {
                        return Err(DynamicsError::InvalidControlSet(format!(
                            "0 ∉ U: coordinate {j} has bounds [{l}, {h}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `R_U = max{|u| : u ∈ U}`.
    pub fn max_norm(&self) -> f64 {
        match self {
            ControlSet::Ball { radius } => *radius,
            ControlSet::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l.abs().max(h.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Ball { radius } => {
                let n = norm(u);
                if n <= *radius {
                    u.to_vec()
                } else {
                    u.iter().map(|x| x * radius / n).collect()
                }
            }
            ControlSet::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&x, (&l, &h))| x.clamp(l, h))
                .collect(),
        }
    }

    pub fn distance(&self, u: &[f64]) -> f64 {
        match self {
            ControlSet::Ball { radius } => (norm(u) - radius).max(0.0),
            ControlSet::Box { .. } => linalg::dist(u, &self.project(u)),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        self.distance(u) <= tol
    }

    pub fn is_ball(&self) -> bool {
        matches!(self, ControlSet::Ball { .. })
    }
}

/// Result of probing the standing assumptions on a finite point set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Numerical rank of `A(x)` per probe (probes that failed to evaluate are skipped).
    pub ranks: Vec<usize>,
    /// `max_x sum_i |f_i(x)| / (1 + |x|)` over the probes.
    pub growth_estimate: f64,
    pub rank_constant: bool,
    /// `(probe index, message)` for probes where a field failed to evaluate.
    pub failures: Vec<(usize, String)>,
}

/// Affine control system on `R^d` with `m` controls.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    d: usize,
    m: usize,
    f0: VectorField,
    columns: Vec<VectorField>,
    control_set: ControlSet,
    growth_constant: f64,
    rank: usize,
}

impl ControlSystem {
    /// Builds and validates on the default probe set.
    pub fn new(
        f0: VectorField,
        columns: Vec<VectorField>,
        control_set: ControlSet,
    ) -> Result<Self, DynamicsError> {
        let probes = default_probes(f0.dim());
        Self::with_probes(f0, columns, control_set, &probes)
    }

    pub fn with_probes(
        f0: VectorField,
        columns: Vec<VectorField>,
        control_set: ControlSet,
        probes: &[Vec<f64>],
    ) -> Result<Self, DynamicsError> {
        let d = f0.dim();
        if d == 0 {
            return Err(DynamicsError::Dimension("state dimension must be positive".into()));
        }
        if let Some(c) = columns.iter().find(|c| c.dim() != d) {
            return Err(DynamicsError::Dimension(format!(
                "column field has dimension {}, expected {d}",
                c.dim()
            )));
        }
        let m = columns.len();
        control_set.check(m)?;
        let mut sys = ControlSystem {
            d,
            m,
            f0,
            columns,
            control_set,
            growth_constant: 0.0,
            rank: 0,
        };
        let report = sys.validate(probes);
        if let Some((probe, message)) = report.failures.first() {
            return Err(DynamicsError::ProbeFailure {
                probe: *probe,
                message: message.clone(),
            });
        }
        if !report.rank_constant {
            let mut observed = report.ranks.clone();
            observed.sort_unstable();
            observed.dedup();
            return Err(DynamicsError::RankNotConstant { observed });
        }
        sys.rank = report.ranks.first().copied().unwrap_or(0);
        sys.growth_constant = match sys.analytic_growth() {
            Some(c) => c.max(report.growth_estimate),
            None => report.growth_estimate,
        };
        Ok(sys)
    }

    /// Exact supremum of `(a + b|x|)/(1+|x|)` for systems built only from
    /// constant and linear fields.
    fn analytic_growth(&self) -> Option<f64> {
        let mut a = 0.0;
        let mut b = 0.0;
        for field in std::iter::once(&self.f0).chain(&self.columns) {
            let (ai, bi) = field.affine_bound()?;
            a += ai;
            b += bi;
        }
        Some(f64::max(a, b))
    }

    /// Samples the rank and growth conditions on `probes`.
    pub fn validate(&self, probes: &[Vec<f64>]) -> ValidationReport {
        let mut ranks = Vec::with_capacity(probes.len());
        let mut growth: f64 = 0.0;
        let mut failures = Vec::new();
        for (i, x) in probes.iter().enumerate() {
            let eval = || -> Result<(usize, f64), DynamicsError> {
                let mut total = norm(&self.f0.eval(x)?);
                let a = self.eval_matrix(x)?;
                for col in a.column_iter() {
                    total += col.norm();
                }
                Ok((linalg::numerical_rank(&a), total / (1.0 + norm(x))))
            };
            match eval() {
                Ok((r, g)) => {
                    ranks.push(r);
                    growth = growth.max(g);
                }
                Err(e) => failures.push((i, e.to_string())),
            }
        }
        let rank_constant = ranks.windows(2).all(|w| w[0] == w[1]);
        ValidationReport {
            ranks,
            growth_estimate: growth,
            rank_constant,
            failures,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn drift(&self) -> &VectorField {
        &self.f0
    }

    pub fn columns(&self) -> &[VectorField] {
        &self.columns
    }

    /// Sampled growth constant `C`.
    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    /// Linear growth constant `D = C max(1, R_U)` of the velocity set.
    pub fn growth_bound(&self) -> f64 {
        self.growth_constant * self.control_set.max_norm().max(1.0)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_point(x)?;
        Ok(self.f0.eval(x)?)
    }

    pub fn eval_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_point(x)?;
        let mut a = DMatrix::zeros(self.d, self.m);
        for (j, col) in self.columns.iter().enumerate() {
            let v = col.eval(x)?;
            for (r, val) in v.into_iter().enumerate() {
                a[(r, j)] = val;
            }
        }
        Ok(a)
    }

    /// `f0(x) + A(x) u`, rejecting controls farther than [`TOL_U`] from `U`.
    pub fn eval_velocity(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if u.len() != self.m {
            return Err(DynamicsError::Dimension(format!(
                "control has length {}, expected {}",
                u.len(),
                self.m
            )));
        }
        let distance = self.control_set.distance(u);
        if distance > TOL_U {
            return Err(DynamicsError::ControlOutOfSet { distance });
        }
        self.velocity_unchecked(x, u)
    }

    /// Velocity without the membership check on `u`.
    pub(crate) fn velocity_unchecked(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let drift = self.eval_drift(x)?;
        let a = self.eval_matrix(x)?;
        Ok(affine_apply(&drift, &a, u))
    }

    /// Same arithmetic as [`ControlSystem::velocity_unchecked`]; `col` and `acc`
    /// are scratch buffers of length `d`.
    pub(crate) fn velocity_into(
        &self,
        x: &[f64],
        u: &[f64],
        col: &mut [f64],
        acc: &mut [f64],
        out: &mut [f64],
    ) -> Result<(), DynamicsError> {
        self.check_point(x)?;
        self.f0.eval_into(x, out)?;
        acc.fill(0.0);
        for (column, &uj) in self.columns.iter().zip(u) {
            column.eval_into(x, col)?;
            for (a, c) in acc.iter_mut().zip(col.iter()) {
                *a += c * uj;
            }
        }
        for (o, a) in out.iter_mut().zip(acc.iter()) {
            *o += a;
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.d {
            return Err(DynamicsError::Dimension(format!(
                "point has length {}, expected {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }
}

/// `drift + A u`, accumulating each row left to right.
pub fn affine_apply(drift: &[f64], a: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    drift
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            let mut acc = 0.0;
            for (j, &uj) in u.iter().enumerate() {
                acc += a[(r, j)] * uj;
            }
            f + acc
        })
        .collect()
}

/// The origin followed by a Halton sequence scaled to `[-10, 10]^d`.
pub fn default_probes(d: usize) -> Vec<Vec<f64>> {
    let bases = first_primes(d);
    let mut probes = Vec::with_capacity(DEFAULT_PROBE_COUNT);
    probes.push(vec![0.0; d]);
    for i in 1..DEFAULT_PROBE_COUNT {
        probes.push(
            bases
                .iter()
                .map(|&b| DEFAULT_PROBE_HALF_WIDTH * (2.0 * radical_inverse(i as u64, b) - 1.0))
                .collect(),
        );
    }
    probes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut k = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= k).all(|&p| k % p != 0) {
            primes.push(k);
        }
        k += 1;
    }
    primes
}
