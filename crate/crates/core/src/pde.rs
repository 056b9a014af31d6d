//! The Parisi PDE for discrete order parameters.
//!
//! For an atomic measure the equation
//! `u_t + (xi''/2)(u_xx + mu[0,t] u_x^2) = 0`, `u(1, x) = ln cosh x`,
//! is solved layer by layer with the Cole-Hopf transform. Between consecutive
//! atoms `mu[0,t]` is a constant `m`, and
//! `u(t, x) = (1/m) ln E exp(m u(q_next, x + sqrt(xi'(q_next) - xi'(t)) Z))`
//! (a plain expectation when `m = 0`). Derivatives in `x` are cumulants of the
//! next layer's derivatives under the tilted measure, so `u_x`, `u_xx`, `u_xxx`
//! come out of the same quadrature without differencing.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::gauss::{rule_for, GaussError, QuadratureConfig};
use crate::model::{Model, SystemPoint};
use crate::special::log_cosh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("non-finite value while evaluating the solution at t = {t}, x = {x}")]
    NonFinite { t: f64, x: f64 },
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("finite-difference grid too small: {0}")]
    BadGrid(&'static str),
    #[error("finite-difference refinement did not settle (last change {0:e})")]
    NoConvergence(f64),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

/// A probability measure on `[0, 1]` with finitely many atoms.
///
/// `cdf[i] = mu[0, atoms[i]]`; the last entry is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<f64>,
    cdf: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<f64>, cdf: Vec<f64>) -> Result<Self, PdeError> {
        let bad = |s: &str| Err(PdeError::InvalidMeasure(s.to_string()));
        if atoms.is_empty() || atoms.len() != cdf.len() {
            return bad("need the same positive number of atoms and cdf values");
        }
        if atoms.iter().chain(&cdf).any(|v| !v.is_finite()) {
            return bad("non-finite entry");
        }
        if atoms[0] < 0.0 || *atoms.last().unwrap() > 1.0 {
            return bad("atoms must lie in [0, 1]");
        }
        if atoms.windows(2).any(|w| w[1] <= w[0]) {
            return bad("atoms must be strictly increasing");
        }
        if cdf[0] <= 0.0 || cdf.windows(2).any(|w| w[1] < w[0]) {
            return bad("cdf must be positive and non-decreasing");
        }
        let last = *cdf.last().unwrap();
        if (last - 1.0).abs() > 1e-9 {
            return bad("cdf must end at 1");
        }
        let mut cdf = cdf;
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { atoms, cdf })
    }

    pub fn dirac(q: f64) -> Result<Self, PdeError> {
        Self::new(vec![q], vec![1.0])
    }

    /// Build from atoms and non-negative weights; weights are normalized.
    pub fn from_weights(atoms: &[f64], weights: &[f64]) -> Result<Self, PdeError> {
        if atoms.len() != weights.len() {
            return Err(PdeError::InvalidMeasure("length mismatch".into()));
        }
        let tot: f64 = weights.iter().sum();
        if !(tot > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(PdeError::InvalidMeasure("weights must be non-negative with positive sum".into()));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.iter().copied().zip(weights.iter().map(|w| w / tot)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let (mut a, mut c) = (Vec::new(), Vec::new());
        for (q, w) in pairs {
            acc += w;
            if let Some(last) = a.last() {
                if q == *last {
                    *c.last_mut().unwrap() = acc;
                    continue;
                }
            }
            a.push(q);
            c.push(acc);
        }
        // drop leading zero-weight atoms
        let first = c.iter().position(|v| *v > 0.0).unwrap_or(0);
        Self::new(a[first..].to_vec(), c[first..].to_vec())
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|c| {
                let w = c - prev;
                prev = *c;
                w
            })
            .collect()
    }

    pub fn min_support(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max_support(&self) -> f64 {
        *self.atoms.last().unwrap()
    }

    /// `mu[0, t]`.
    pub fn cdf_at(&self, t: f64) -> f64 {
        match self.atoms.iter().rposition(|q| *q <= t) {
            Some(i) => self.cdf[i],
            None => 0.0,
        }
    }

    /// `mu[0, t)`.
    pub fn cdf_left(&self, t: f64) -> f64 {
        match self.atoms.iter().rposition(|q| *q < t) {
            Some(i) => self.cdf[i],
            None => 0.0,
        }
    }

    /// Merge atoms closer than `tol` (weighted position) and drop atoms whose
    /// weight is below `min_weight`.
    pub fn simplified(&self, tol: f64, min_weight: f64) -> Self {
        let w = self.weights();
        let mut groups: Vec<(f64, f64)> = Vec::new();
        for (q, wi) in self.atoms.iter().zip(&w) {
            if *wi < min_weight {
                continue;
            }
            match groups.last_mut() {
                Some((gq, gw)) if (q - *gq / *gw).abs() < tol => {
                    *gq += q * wi;
                    *gw += wi;
                }
                _ => groups.push((q * wi, *wi)),
            }
        }
        if groups.is_empty() {
            return self.clone();
        }
        let atoms: Vec<f64> = groups.iter().map(|(a, b)| (a / b).clamp(0.0, 1.0)).collect();
        let weights: Vec<f64> = groups.iter().map(|g| g.1).collect();
        Self::from_weights(&atoms, &weights).unwrap_or_else(|_| self.clone())
    }

    /// `(1 - theta) mu + theta nu`.
    pub fn mix(&self, other: &Self, theta: f64) -> Result<Self, PdeError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(PdeError::InvalidMeasure("mixing parameter outside [0, 1]".into()));
        }
        let atoms: Vec<f64> = self.atoms.iter().chain(&other.atoms).copied().collect();
        let weights: Vec<f64> = self
            .weights()
            .iter()
            .map(|w| (1.0 - theta) * w)
            .chain(other.weights().iter().map(|w| theta * w))
            .collect();
        Self::from_weights(&atoms, &weights)
    }

    /// `d(mu, nu) = int_0^1 |mu[0,s] - nu[0,s]| ds`.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut cuts: Vec<f64> = self.atoms.iter().chain(&other.atoms).copied().collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .map(|w| (w[1] - w[0]) * (self.cdf_at(w[0]) - other.cdf_at(w[0])).abs())
            .sum()
    }
}

impl FromStr for DiscreteMeasure {
    type Err = PdeError;

    /// Parses `q1:m1,q2:m2,...` with `m_i = mu[0, q_i]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut atoms = Vec::new();
        let mut cdf = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (q, m) = part
                .split_once(':')
                .ok_or_else(|| PdeError::InvalidMeasure(format!("malformed pair `{part}`")))?;
            let q: f64 = q.trim().parse().map_err(|_| PdeError::InvalidMeasure(format!("bad atom `{q}`")))?;
            let m: f64 = m.trim().parse().map_err(|_| PdeError::InvalidMeasure(format!("bad mass `{m}`")))?;
            atoms.push(q);
            cdf.push(m);
        }
        Self::new(atoms, cdf)
    }
}

impl fmt::Display for DiscreteMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (q, m)) in self.atoms.iter().zip(&self.cdf).enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{q}:{m}")?;
        }
        Ok(())
    }
}

/// `u` and its first three space derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UDerivs {
    pub u: f64,
    pub ux: f64,
    pub uxx: f64,
    pub uxxx: f64,
}

/// Closed-form solution after the last atom: `ln cosh x + (xi'(1) - xi'(t))/2`.
pub fn terminal_layer(x: f64, shift: f64) -> UDerivs {
    let th = x.tanh();
    let s2 = 1.0 - th * th;
    UDerivs { u: log_cosh(x) + shift, ux: th, uxx: s2, uxxx: -2.0 * th * s2 }
}

/// Cole-Hopf solution of the Parisi PDE for a discrete measure.
#[derive(Debug, Clone)]
pub struct ParisiSolution {
    model: Model,
    point: SystemPoint,
    measure: DiscreteMeasure,
    cfg: QuadratureConfig,
    // xi'(q_i) for every atom
    xi1_atoms: Vec<f64>,
    xi1_one: f64,
}

impl ParisiSolution {
    pub fn new(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, cfg: &QuadratureConfig) -> Self {
        let xi1_atoms = measure.atoms().iter().map(|q| model.xi(point.beta, *q).d1).collect();
        Self {
            model: model.clone(),
            point,
            measure: measure.clone(),
            cfg: *cfg,
            xi1_atoms,
            xi1_one: model.xi(point.beta, 1.0).d1,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn point(&self) -> SystemPoint {
        self.point
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.cfg
    }

    /// `u(0, h)`.
    pub fn value_at_origin(&self) -> Result<f64, PdeError> {
        self.value(0.0, self.point.h)
    }

    /// `u(t, x)` only, cheaper than [`ParisiSolution::eval`].
    pub fn value(&self, t: f64, x: f64) -> Result<f64, PdeError> {
        let (layer, xi1_t) = self.locate(t)?;
        let v = match layer {
            None => log_cosh(x) + 0.5 * (self.xi1_one - xi1_t),
            Some(j) => self.value_layer(j, xi1_t, x),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PdeError::NonFinite { t, x })
        }
    }

    /// `u, u_x, u_xx, u_xxx` at `(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> Result<UDerivs, PdeError> {
        let (layer, xi1_t) = self.locate(t)?;
        let d = match layer {
            None => terminal_layer(x, 0.5 * (self.xi1_one - xi1_t)),
            Some(j) => self.eval_layer(j, xi1_t, x),
        };
        if [d.u, d.ux, d.uxx, d.uxxx].iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(PdeError::NonFinite { t, x })
        }
    }

    /// `mu[0, t]` of the underlying measure.
    pub fn mu(&self, t: f64) -> f64 {
        self.measure.cdf_at(t)
    }

    // Index of the next atom strictly after t (None once t >= last atom) and xi'(t).
    fn locate(&self, t: f64) -> Result<(Option<usize>, f64), PdeError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(PdeError::BadTime(t));
        }
        let next = self.measure.atoms().iter().position(|q| *q > t);
        Ok((next, self.model.xi(self.point.beta, t).d1))
    }

    // mu on the layer ending at atom j.
    fn layer_mass(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.measure.cdf()[j - 1]
        }
    }

    fn value_at_atom(&self, j: usize, x: f64) -> f64 {
        if j + 1 == self.measure.len() {
            log_cosh(x) + 0.5 * (self.xi1_one - self.xi1_atoms[j])
        } else {
            self.value_layer(j + 1, self.xi1_atoms[j], x)
        }
    }

    fn derivs_at_atom(&self, j: usize, x: f64) -> UDerivs {
        if j + 1 == self.measure.len() {
            terminal_layer(x, 0.5 * (self.xi1_one - self.xi1_atoms[j]))
        } else {
            self.eval_layer(j + 1, self.xi1_atoms[j], x)
        }
    }

    fn value_layer(&self, j: usize, xi1_t: f64, x: f64) -> f64 {
        let var = (self.xi1_atoms[j] - xi1_t).max(0.0);
        if var == 0.0 {
            return self.value_at_atom(j, x);
        }
        let s = var.sqrt();
        let m = self.layer_mass(j);
        let rule = rule_for(s, &self.cfg);
        if m == 0.0 {
            return rule.z.iter().zip(&rule.w).map(|(z, w)| w * self.value_at_atom(j, x + s * z)).sum();
        }
        let vals: Vec<f64> = rule.z.iter().map(|z| self.value_at_atom(j, x + s * z)).collect();
        let vmax = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_expm1: f64 = vals.iter().zip(&rule.w).map(|(v, w)| w * (m * (v - vmax)).exp_m1()).sum();
        vmax + mean_expm1.ln_1p() / m
    }

    fn eval_layer(&self, j: usize, xi1_t: f64, x: f64) -> UDerivs {
        let var = (self.xi1_atoms[j] - xi1_t).max(0.0);
        if var == 0.0 {
            return self.derivs_at_atom(j, x);
        }
        let s = var.sqrt();
        let m = self.layer_mass(j);
        let rule = rule_for(s, &self.cfg);
        let nodes: Vec<UDerivs> = rule.z.iter().map(|z| self.derivs_at_atom(j, x + s * z)).collect();
        tilted_moments(&nodes, &rule.w, m)
    }
}

/// [`ParisiSolution`] with `u(q_j, .)` tabulated on a uniform grid for every
/// atom but the last, so that `u(t, x)` anywhere costs one convolution.
/// Values between grid points use cubic Hermite interpolation of each
/// derivative from itself and the next one.
#[derive(Debug, Clone)]
pub struct TabulatedSolution {
    sol: ParisiSolution,
    x0: f64,
    dx: f64,
    tables: Vec<Vec<UDerivs>>,
}

fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, dx: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * dx * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * dx * d1
}

impl TabulatedSolution {
    /// Tables cover `[-half_width, half_width]` with spacing `dx`.
    pub fn new(sol: &ParisiSolution, half_width: f64, dx: f64) -> Self {
        let k = sol.measure.len();
        let n = (2.0 * half_width / dx).ceil() as usize + 1;
        let mut me = Self { sol: sol.clone(), x0: -half_width, dx, tables: vec![Vec::new(); k.saturating_sub(1)] };
        for j in (0..k.saturating_sub(1)).rev() {
            let xi1_t = me.sol.xi1_atoms[j];
            let table: Vec<UDerivs> = (0..n).map(|i| me.convolve(j + 1, xi1_t, me.x0 + i as f64 * dx)).collect();
            me.tables[j] = table;
        }
        me
    }

    pub fn solution(&self) -> &ParisiSolution {
        &self.sol
    }

    fn at_atom(&self, j: usize, x: f64) -> UDerivs {
        let sol = &self.sol;
        if j + 1 == sol.measure.len() {
            return terminal_layer(x, 0.5 * (sol.xi1_one - sol.xi1_atoms[j]));
        }
        let t = &self.tables[j];
        let last = t.len() - 1;
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 || pos >= last as f64 {
            // outside the box the layer is affine to within round-off
            let e = if pos <= 0.0 { t[0] } else { t[last] };
            let xe = if pos <= 0.0 { self.x0 } else { self.x0 + last as f64 * self.dx };
            return UDerivs { u: e.u + e.ux * (x - xe), ux: e.ux, uxx: e.uxx, uxxx: e.uxxx };
        }
        let i = (pos.floor() as usize).min(last - 1);
        let s = pos - i as f64;
        let (a, b) = (t[i], t[i + 1]);
        UDerivs {
            u: hermite(a.u, a.ux, b.u, b.ux, self.dx, s),
            ux: hermite(a.ux, a.uxx, b.ux, b.uxx, self.dx, s),
            uxx: hermite(a.uxx, a.uxxx, b.uxx, b.uxxx, self.dx, s),
            uxxx: a.uxxx + s * (b.uxxx - a.uxxx),
        }
    }

    // u and derivatives at time with xi'(t) = xi1_t, in the layer ending at atom j
    fn convolve(&self, j: usize, xi1_t: f64, x: f64) -> UDerivs {
        let sol = &self.sol;
        let var = (sol.xi1_atoms[j] - xi1_t).max(0.0);
        if var == 0.0 {
            return self.at_atom(j, x);
        }
        let s = var.sqrt();
        let m = sol.layer_mass(j);
        let rule = rule_for(s, &sol.cfg);
        let nodes: Vec<UDerivs> = rule.z.iter().map(|z| self.at_atom(j, x + s * z)).collect();
        tilted_moments(&nodes, &rule.w, m)
    }

    /// `u, u_x, u_xx, u_xxx` at `(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> Result<UDerivs, PdeError> {
        let (layer, xi1_t) = self.sol.locate(t)?;
        let d = match layer {
            None => terminal_layer(x, 0.5 * (self.sol.xi1_one - xi1_t)),
            Some(j) => self.convolve(j, xi1_t, x),
        };
        if [d.u, d.ux, d.uxx, d.uxxx].iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(PdeError::NonFinite { t, x })
        }
    }
}

fn tilted_moments(nodes: &[UDerivs], w: &[f64], m: f64) -> UDerivs {
    let vmax = nodes.iter().map(|d| d.u).fold(f64::NEG_INFINITY, f64::max);
    let mut rho: Vec<f64> = nodes.iter().zip(w).map(|(d, w)| w * (m * (d.u - vmax)).exp()).collect();
    let tot: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|r| *r /= tot);
    let u = if m == 0.0 {
        nodes.iter().zip(w).map(|(d, w)| w * d.u).sum()
    } else {
        let e: f64 = nodes.iter().zip(w).map(|(d, w)| w * (m * (d.u - vmax)).exp_m1()).sum();
        vmax + e.ln_1p() / m
    };
    let (mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0);
    for (d, r) in nodes.iter().zip(&rho) {
        a1 += r * d.ux;
        a2 += r * d.uxx;
        a3 += r * d.uxxx;
    }
    let (mut var1, mut cov12, mut k3) = (0.0, 0.0, 0.0);
    for (d, r) in nodes.iter().zip(&rho) {
        let (e1, e2) = (d.ux - a1, d.uxx - a2);
        var1 += r * e1 * e1;
        cov12 += r * e1 * e2;
        k3 += r * e1 * e1 * e1;
    }
    UDerivs { u, ux: a1, uxx: a2 + m * var1, uxxx: a3 + 3.0 * m * cov12 + m * m * k3 }
}

/// Grid for [`solve_fd`]. Time is stepped uniformly in `v = xi'(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdGrid {
    pub nx: usize,
    pub nt: usize,
    /// Half-width of the spatial box; `None` picks `|h| + 8 sqrt(xi'(1)) + 4`.
    pub half_width: Option<f64>,
}

impl Default for FdGrid {
    fn default() -> Self {
        Self { nx: 2001, nt: 4000, half_width: None }
    }
}

#[derive(Debug, Clone)]
pub struct FdSolution {
    pub x: Vec<f64>,
    /// `u(0, x)` on the grid.
    pub u0: Vec<f64>,
    /// `u(0, h)` by cubic interpolation.
    pub value: f64,
}

fn thomas(lower: f64, diag: f64, upper: f64, rhs: &mut [f64], bc_diag: f64, scratch: &mut [f64]) {
    // constant interior coefficients, boundary rows are `bc_diag * x = rhs`
    let n = rhs.len();
    scratch[0] = 0.0;
    rhs[0] /= bc_diag;
    for i in 1..n {
        let (l, d, u) = if i == n - 1 { (0.0, bc_diag, 0.0) } else { (lower, diag, upper) };
        let denom = d - l * scratch[i - 1];
        scratch[i] = u / denom;
        rhs[i] = (rhs[i] - l * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

fn grad_sq(u: &[f64], dx: f64, out: &mut [f64]) {
    let n = u.len();
    for i in 2..n - 2 {
        let g = (-u[i + 2] + 8.0 * (u[i + 1] - u[i - 1]) + u[i - 2]) / (12.0 * dx);
        out[i] = g * g;
    }
    for i in [1, n - 2] {
        let g = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        out[i] = g * g;
    }
    let g0 = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
    let gn = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * dx);
    out[0] = g0 * g0;
    out[n - 1] = gn * gn;
}

/// Crank-Nicolson in time with a fourth-order compact (Numerov) discretization
/// of `u_xx`, marching backward in `v = xi'(t)` where the PDE reads
/// `-u_v = (u_xx + mu u_x^2) / 2`. The gradient term is treated by a
/// predictor-corrector (Heun) step. Boundary rows impose `u_xx = 0`.
pub fn solve_fd(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, grid: FdGrid) -> Result<FdSolution, PdeError> {
    if grid.nx < 11 || grid.nt < 2 {
        return Err(PdeError::BadGrid("need nx >= 11 and nt >= 2"));
    }
    let v1 = model.xi(point.beta, 1.0).d1;
    let half = grid.half_width.unwrap_or(point.h.abs() + 8.0 * v1.sqrt() + 4.0);
    let nx = grid.nx;
    let dx = 2.0 * half / (nx - 1) as f64;
    let x: Vec<f64> = (0..nx).map(|i| -half + i as f64 * dx).collect();
    let mut u: Vec<f64> = x.iter().map(|v| log_cosh(*v)).collect();

    // segments in v between atoms, from v = xi'(1) down to 0
    let mut cuts: Vec<(f64, f64)> = Vec::new(); // (v_lo, mu on segment)
    let atoms = measure.atoms();
    for (i, q) in atoms.iter().enumerate().rev() {
        cuts.push((model.xi(point.beta, *q).d1, measure.cdf()[i]));
    }
    let mut segments: Vec<(f64, f64, f64)> = Vec::new(); // (v_hi, v_lo, mu)
    let mut v_hi = v1;
    for (v_lo, mu) in cuts {
        if v_hi > v_lo {
            segments.push((v_hi, v_lo, mu));
        }
        v_hi = v_lo;
    }
    if v_hi > 0.0 {
        segments.push((v_hi, 0.0, 0.0));
    }
    let total: f64 = segments.iter().map(|s| s.0 - s.1).sum();

    let mut rhs = vec![0.0; nx];
    let mut pred = vec![0.0; nx];
    let mut n0 = vec![0.0; nx];
    let mut n1 = vec![0.0; nx];
    let mut scratch = vec![0.0; nx];
    for (hi, lo, mu) in segments {
        let steps = (((hi - lo) / total) * grid.nt as f64).ceil().max(2.0) as usize;
        let dv = (hi - lo) / steps as f64;
        let r = 0.25 * dv / (dx * dx); // (dv/2) * (1/2) / dx^2
        for _ in 0..steps {
            grad_sq(&u, dx, &mut n0);
            // compact operator A = (1, 10, 1) / 12 applied to u and to the forcing
            let explicit = |u: &[f64], f0: &[f64], f1: &[f64], w: f64, out: &mut [f64]| {
                for i in 1..nx - 1 {
                    let au = (u[i - 1] + 10.0 * u[i] + u[i + 1]) / 12.0;
                    let af0 = (f0[i - 1] + 10.0 * f0[i] + f0[i + 1]) / 12.0;
                    let af1 = (f1[i - 1] + 10.0 * f1[i] + f1[i + 1]) / 12.0;
                    out[i] = au + r * (u[i + 1] - 2.0 * u[i] + u[i - 1]) + 0.5 * dv * mu * ((1.0 - w) * af0 + w * af1);
                }
                for i in [0, nx - 1] {
                    out[i] = u[i] + 0.5 * dv * mu * ((1.0 - w) * f0[i] + w * f1[i]);
                }
            };
            let (lo, di) = (1.0 / 12.0 - r, 10.0 / 12.0 + 2.0 * r);
            // predictor: gradient term frozen at the old level
            explicit(&u, &n0, &n0, 0.0, &mut rhs);
            thomas(lo, di, lo, &mut rhs, 1.0, &mut scratch);
            pred.copy_from_slice(&rhs);
            // corrector: trapezoidal gradient term
            grad_sq(&pred, dx, &mut n1);
            explicit(&u, &n0, &n1, 0.5, &mut rhs);
            thomas(lo, di, lo, &mut rhs, 1.0, &mut scratch);
            u.copy_from_slice(&rhs);
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite { t: 0.0, x: f64::NAN });
    }
    let value = cubic_at(&x, &u, point.h);
    Ok(FdSolution { x, u0: u, value })
}

fn cubic_at(x: &[f64], y: &[f64], at: f64) -> f64 {
    let dx = x[1] - x[0];
    let i = (((at - x[0]) / dx).floor() as isize).clamp(1, x.len() as isize - 3) as usize;
    let mut acc = 0.0;
    for a in i - 1..=i + 2 {
        let mut l = 1.0;
        for b in i - 1..=i + 2 {
            if a != b {
                l *= (at - x[b]) / (x[a] - x[b]);
            }
        }
        acc += l * y[a];
    }
    acc
}

/// [`solve_fd`] with grid doubling (space and time) until `u(0, h)` moves by
/// less than `tol`; the last two levels are Richardson-combined.
pub fn solve_fd_refined(
    model: &Model,
    point: SystemPoint,
    measure: &DiscreteMeasure,
    start: FdGrid,
    tol: f64,
    max_doublings: usize,
) -> Result<FdSolution, PdeError> {
    let mut grid = start;
    let mut prev = solve_fd(model, point, measure, grid)?;
    let mut change = f64::INFINITY;
    for _ in 0..max_doublings {
        grid = FdGrid { nx: 2 * grid.nx - 1, nt: 2 * grid.nt, ..grid };
        let next = solve_fd(model, point, measure, grid)?;
        change = (next.value - prev.value).abs();
        let extrap = next.value + (next.value - prev.value) / 3.0;
        if change < tol {
            return Ok(FdSolution { value: extrap, ..next });
        }
        prev = next;
    }
    Err(PdeError::NoConvergence(change))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub distance: f64,
    pub sup_u: f64,
    pub sup_ux: f64,
    pub bound_u: f64,
    pub bound_ux: f64,
}

impl LipschitzReport {
    pub fn holds(&self) -> bool {
        self.sup_u <= self.bound_u * (1.0 + 1e-9) + 1e-12 && self.sup_ux <= self.bound_ux * (1.0 + 1e-9) + 1e-12
    }
}

/// Compare solutions for two measures on an 11 x 41 `(t, x)` grid against
/// `xi''(1) d(mu, nu)` and `e^{xi'(1)} xi''(1) d(mu, nu)`.
pub fn lipschitz_audit(
    model: &Model,
    point: SystemPoint,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cfg: &QuadratureConfig,
) -> Result<LipschitzReport, PdeError> {
    let a = ParisiSolution::new(model, point, mu, cfg);
    let b = ParisiSolution::new(model, point, nu, cfg);
    let xi = model.xi(point.beta, 1.0);
    let d = mu.distance(nu);
    let half = point.h.abs() + 4.0 * xi.d1.sqrt() + 1.0;
    let (mut su, mut sux) = (0.0_f64, 0.0_f64);
    for it in 0..=10 {
        let t = it as f64 / 10.0;
        for ix in 0..=40 {
            let x = -half + 2.0 * half * ix as f64 / 40.0;
            let (ea, eb) = (a.eval(t, x)?, b.eval(t, x)?);
            su = su.max((ea.u - eb.u).abs());
            sux = sux.max((ea.ux - eb.ux).abs());
        }
    }
    Ok(LipschitzReport {
        distance: d,
        sup_u: su,
        sup_ux: sux,
        bound_u: xi.d2 * d,
        bound_ux: xi.d1.exp() * xi.d2 * d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{expect1, Gaussian1};

    fn sk_point(beta: f64, h: f64) -> (Model, SystemPoint) {
        (Model::sk(), SystemPoint::new(beta, h).unwrap())
    }

    #[test]
    fn measure_parsing_and_queries() {
        let m: DiscreteMeasure = "0.2:0.3, 0.6:1".parse().unwrap();
        assert_eq!(m.cdf_at(0.1), 0.0);
        assert_eq!(m.cdf_at(0.2), 0.3);
        assert_eq!(m.cdf_left(0.2), 0.0);
        assert_eq!(m.cdf_at(0.9), 1.0);
        assert!((m.weights()[1] - 0.7).abs() < 1e-15);
        assert_eq!(m.to_string(), "0.2:0.3,0.6:1");
        assert!("0.6:0.3,0.2:1".parse::<DiscreteMeasure>().is_err());
        assert!("0.2:0.5".parse::<DiscreteMeasure>().is_err());
        let d = DiscreteMeasure::dirac(0.5).unwrap();
        assert!((m.distance(&d) - (0.3 * 0.3 + 0.1 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn simplify_merges_and_prunes() {
        let m = DiscreteMeasure::from_weights(&[0.3, 0.300001, 0.8], &[0.5, 0.5, 1e-12]).unwrap();
        let s = m.simplified(1e-5, 1e-9);
        assert_eq!(s.len(), 1);
        assert!((s.atoms()[0] - 0.3000005).abs() < 1e-12);
    }

    #[test]
    fn dirac_zero_closed_form() {
        let (m, p) = sk_point(1.3, 0.7);
        let mu = DiscreteMeasure::dirac(0.0).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &QuadratureConfig::default());
        let v = sol.value_at_origin().unwrap();
        let e = log_cosh(0.7) + 0.5 * m.xi(1.3, 1.0).d1;
        assert!((v - e).abs() < 1e-14);
    }

    #[test]
    fn dirac_closed_form_and_derivatives() {
        let (m, p) = sk_point(1.5, 0.5);
        let cfg = QuadratureConfig::default();
        let q = 0.4;
        let sol = ParisiSolution::new(&m, p, &DiscreteMeasure::dirac(q).unwrap(), &cfg);
        let xq = m.xi(1.5, q).d1;
        let g = Gaussian1::from_var(0.5, xq);
        let e = expect1(log_cosh, g, &cfg).unwrap() + 0.5 * (m.xi(1.5, 1.0).d1 - xq);
        assert!((sol.value_at_origin().unwrap() - e).abs() < 1e-13);
        let d = sol.eval(0.0, 0.5).unwrap();
        let ux = expect1(|x| x.tanh(), g, &cfg).unwrap();
        assert!((d.ux - ux).abs() < 1e-13);
        assert!((d.uxx - expect1(|x| 1.0 - x.tanh().powi(2), g, &cfg).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn derivatives_match_differences_for_two_atoms() {
        let m: Model = "2:0.3,3:0.2".parse().unwrap();
        let p = SystemPoint::new(1.8, 0.3).unwrap();
        let mu = DiscreteMeasure::new(vec![0.2, 0.7], vec![0.4, 1.0]).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &QuadratureConfig::default());
        for &(t, x) in &[(0.0, 0.3), (0.1, -1.0), (0.3, 0.8), (0.8, 2.0)] {
            let e = 1e-4;
            let (a, b, c) = (sol.eval(t, x).unwrap(), sol.eval(t, x + e).unwrap(), sol.eval(t, x - e).unwrap());
            assert!(((b.u - c.u) / (2.0 * e) - a.ux).abs() < 1e-7, "ux at {t},{x}");
            assert!(((b.ux - c.ux) / (2.0 * e) - a.uxx).abs() < 1e-7, "uxx at {t},{x}");
            assert!(((b.uxx - c.uxx) / (2.0 * e) - a.uxxx).abs() < 1e-7, "uxxx at {t},{x}");
            assert!((a.u - sol.value(t, x).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn solution_satisfies_pde_inside_layers() {
        let m = Model::sk();
        let p = SystemPoint::new(1.4, 0.2).unwrap();
        let mu = DiscreteMeasure::new(vec![0.25, 0.6], vec![0.3, 1.0]).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &QuadratureConfig::default());
        for &(t, x) in &[(0.1, 0.4), (0.4, -0.7), (0.8, 1.1)] {
            let e = 1e-5;
            let ut = (sol.value(t + e, x).unwrap() - sol.value(t - e, x).unwrap()) / (2.0 * e);
            let d = sol.eval(t, x).unwrap();
            let rhs = 0.5 * m.xi(1.4, t).d2 * (d.uxx + mu.cdf_at(t) * d.ux * d.ux);
            assert!((ut + rhs).abs() < 1e-7, "t={t} x={x} {ut} {rhs}");
        }
    }

    #[test]
    fn tabulated_matches_direct() {
        let m: Model = "2:0.3,4:0.2".parse().unwrap();
        let p = SystemPoint::new(2.0, 0.4).unwrap();
        let mu = DiscreteMeasure::new(vec![0.1, 0.4, 0.8], vec![0.2, 0.5, 1.0]).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &QuadratureConfig::default());
        let tab = TabulatedSolution::new(&sol, 30.0, 0.01);
        for &(t, x) in &[(0.0, 0.4), (0.05, -1.0), (0.2, 2.0), (0.5, 0.1), (0.9, -0.3)] {
            let (a, b) = (sol.eval(t, x).unwrap(), tab.eval(t, x).unwrap());
            assert!((a.u - b.u).abs() < 1e-9 && (a.ux - b.ux).abs() < 1e-9 && (a.uxx - b.uxx).abs() < 1e-8, "{t} {x} {a:?} {b:?}");
        }
    }

    #[test]
    fn fd_agrees_with_cole_hopf() {
        let (m, p) = sk_point(1.5, 0.5);
        let mu = DiscreteMeasure::dirac(0.4).unwrap();
        let exact = ParisiSolution::new(&m, p, &mu, &QuadratureConfig::default()).value_at_origin().unwrap();
        let fd = solve_fd(&m, p, &mu, FdGrid::default()).unwrap();
        assert!((fd.value - exact).abs() < 1e-5, "{} {}", fd.value, exact);
    }

    #[test]
    fn lipschitz_bounds_hold() {
        let (m, p) = sk_point(1.2, 0.4);
        let mu = DiscreteMeasure::new(vec![0.2, 0.5], vec![0.5, 1.0]).unwrap();
        let nu = DiscreteMeasure::dirac(0.45).unwrap();
        let r = lipschitz_audit(&m, p, &mu, &nu, &QuadratureConfig::default()).unwrap();
        assert!(r.holds(), "{r:?}");
        assert!(r.sup_u > 0.0);
    }
}
