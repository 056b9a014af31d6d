//! Replica-symmetric fixed points and the generalized AT line.
//!
//! `Q_*` is the set of solutions of `E tanh^2(h + sqrt(xi'(q)) Z) = q`. The
//! stability parameter is `alpha(q) = xi''(q) E sech^4(h + sqrt(xi'(q)) Z)`;
//! `alpha = min_{Q_*} alpha(q)` and `q_*` is the largest minimizer.

use thiserror::Error;

use crate::gauss::{expect1, GaussError, Gaussian1, QuadratureConfig};
use crate::model::{Model, SystemPoint};
use crate::special::sech;

/// `(pi^2 - 3) / (6 sqrt(2 pi))`.
pub const LAMBDA0: f64 = 0.456_762_607_537_717_8;
/// `(pi^2 - 6) / (18 sqrt(2 pi))`.
pub const LAMBDA1: f64 = 0.085_763_822_445_667_16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtError {
    #[error("no replica-symmetric fixed point found on [0, 1]")]
    NoFixedPoint,
    #[error("fixed point {q} not certified (residual {residual:e} with refined quadrature)")]
    Uncertified { q: f64, residual: f64 },
    #[error("alpha target {0} must be positive")]
    BadTarget(f64),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlineOptions {
    pub scan_step: f64,
    pub bisect_tol: f64,
    pub tie_tol: f64,
    pub certify_tol: f64,
    pub quad: QuadratureConfig,
}

impl Default for AtlineOptions {
    fn default() -> Self {
        Self {
            scan_step: 1e-3,
            bisect_tol: 1e-12,
            tie_tol: 1e-9,
            certify_tol: 1e-10,
            quad: QuadratureConfig::default(),
        }
    }
}

/// `E tanh^2(h + sqrt(xi'(q)) Z)`.
pub fn overlap_map(model: &Model, point: SystemPoint, q: f64, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    let g = Gaussian1::from_var(point.h, model.xi(point.beta, q).d1);
    expect1(|x| x.tanh().powi(2), g, cfg)
}

/// `alpha(q) = xi''(q) E sech^4(h + sqrt(xi'(q)) Z)`.
pub fn alpha_at(model: &Model, point: SystemPoint, q: f64, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    let xi = model.xi(point.beta, q);
    let g = Gaussian1::from_var(point.h, xi.d1);
    Ok(xi.d2 * expect1(|x| sech(x).powi(4), g, cfg)?)
}

/// All roots of `E tanh^2(h + sqrt(xi'(q)) Z) = q` found by a uniform scan for
/// sign changes followed by bisection. Each root is re-checked with doubled
/// quadrature.
pub fn fixed_points(model: &Model, point: SystemPoint, opts: &AtlineOptions) -> Result<Vec<f64>, AtError> {
    let phi = |q: f64| -> Result<f64, GaussError> { Ok(overlap_map(model, point, q, &opts.quad)? - q) };
    let n = (1.0 / opts.scan_step).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let vals = grid.iter().map(|q| phi(*q)).collect::<Result<Vec<f64>, _>>()?;
    let mut roots = Vec::new();
    for i in 0..=n {
        if vals[i] == 0.0 {
            roots.push(grid[i]);
            continue;
        }
        if i < n && vals[i] * vals[i + 1] < 0.0 {
            let (mut lo, mut hi, mut flo) = (grid[i], grid[i + 1], vals[i]);
            while hi - lo > opts.bisect_tol {
                let mid = 0.5 * (lo + hi);
                let fm = phi(mid)?;
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fm * flo < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
    }
    if roots.is_empty() {
        return Err(AtError::NoFixedPoint);
    }
    let fine = opts.quad.refined();
    for &q in &roots {
        let r = overlap_map(model, point, q, &fine)? - q;
        // a bisection tolerance in q allows a residual of |phi'| * tol
        if r.abs() > opts.certify_tol.max(4.0 * opts.bisect_tol) {
            return Err(AtError::Uncertified { q, residual: r });
        }
    }
    Ok(roots)
}

/// `q_*`, `alpha` and the full root set at one system point.
#[derive(Debug, Clone, PartialEq)]
pub struct AtRecord {
    pub point: SystemPoint,
    pub q_star: f64,
    pub alpha: f64,
    /// `(q, alpha(q))` for every root.
    pub roots: Vec<(f64, f64)>,
}

impl AtRecord {
    /// Inside the generalized AT region, `alpha <= 1`.
    pub fn in_at(&self) -> bool {
        self.alpha <= 1.0
    }
}

pub fn at_record(model: &Model, point: SystemPoint, opts: &AtlineOptions) -> Result<AtRecord, AtError> {
    let qs = fixed_points(model, point, opts)?;
    let roots = qs
        .iter()
        .map(|q| Ok((*q, alpha_at(model, point, *q, &opts.quad)?)))
        .collect::<Result<Vec<_>, GaussError>>()?;
    let amin = roots.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let q_star = roots
        .iter()
        .filter(|r| r.1 <= amin + opts.tie_tol)
        .map(|r| r.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(AtRecord { point, q_star, alpha: amin, roots })
}

/// `alpha(beta, h)`.
pub fn alpha_of(model: &Model, point: SystemPoint, opts: &AtlineOptions) -> Result<f64, AtError> {
    Ok(at_record(model, point, opts)?.alpha)
}

/// One solution of `alpha(beta, h) = target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelPoint {
    pub beta: f64,
    pub h: f64,
    pub q_star: f64,
    pub alpha: f64,
    /// Index of the crossing in increasing `h`, 0 for the first.
    pub branch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSetOptions {
    pub scan_points: usize,
    pub h_max: f64,
    pub tol: f64,
    pub atline: AtlineOptions,
}

impl Default for LevelSetOptions {
    fn default() -> Self {
        Self { scan_points: 32, h_max: 1e4, tol: 1e-10, atline: AtlineOptions::default() }
    }
}

/// All `h >= 0` with `F(h) = 0`, found by bracketing on `[0, h_hi]` where `h_hi`
/// is grown by doubling until `F(h_hi) < 0`, then a scan and bisection.
/// Crossings whose bisection ends at a jump (|F| > accept) are dropped.
fn h_roots<F>(f: F, opts: &LevelSetOptions, accept: f64) -> Result<Vec<f64>, AtError>
where
    F: Fn(f64) -> Result<f64, AtError>,
{
    let f0 = f(0.0)?;
    if f0.abs() <= opts.tol {
        // the crossing sits on the boundary h = 0
        let mut out = vec![0.0];
        out.extend(h_roots_from(&f, opts, accept, 1e-9)?);
        return Ok(out);
    }
    h_roots_from(&f, opts, accept, 0.0)
}

fn h_roots_from<F>(f: &F, opts: &LevelSetOptions, accept: f64, start: f64) -> Result<Vec<f64>, AtError>
where
    F: Fn(f64) -> Result<f64, AtError>,
{
    let mut hi = 1.0_f64.max(2.0 * start);
    while f(hi)? >= 0.0 {
        hi *= 2.0;
        if hi > opts.h_max {
            return Ok(Vec::new());
        }
    }
    let n = opts.scan_points.max(2);
    let hs: Vec<f64> = (0..=n).map(|i| start + (hi - start) * i as f64 / n as f64).collect();
    let vals = hs.iter().map(|h| f(*h)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for i in 0..n {
        if vals[i] == 0.0 && i > 0 {
            out.push(hs[i]);
            continue;
        }
        if vals[i] * vals[i + 1] < 0.0 {
            let (mut lo, mut up, mut flo) = (hs[i], hs[i + 1], vals[i]);
            let mut fm = flo;
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                fm = f(mid)?;
                if fm.abs() <= opts.tol || up - lo <= 1e-14 * up.max(1.0) {
                    lo = mid;
                    up = mid;
                    break;
                }
                if fm * flo < 0.0 {
                    up = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            if fm.abs() <= accept {
                out.push(0.5 * (lo + up));
            }
        }
    }
    Ok(out)
}

/// Points of `{alpha(beta, h) = target}` for each `beta`.
pub fn level_set(model: &Model, target: f64, betas: &[f64], opts: &LevelSetOptions) -> Result<Vec<LevelPoint>, AtError> {
    if !(target > 0.0) {
        return Err(AtError::BadTarget(target));
    }
    let mut out = Vec::new();
    for &beta in betas {
        let f = |h: f64| -> Result<f64, AtError> { Ok(alpha_of(model, SystemPoint::new(beta, h)?, &opts.atline)? - target) };
        for (branch, h) in h_roots(f, opts, 1e-8)?.into_iter().enumerate() {
            let rec = at_record(model, SystemPoint::new(beta, h)?, &opts.atline)?;
            out.push(LevelPoint { beta, h, q_star: rec.q_star, alpha: rec.alpha, branch });
        }
    }
    Ok(out)
}

/// Both sides of the sufficient condition
/// `alpha <= (2/3)(xi0''(q_*)/xi0''(1))(1 - LAMBDA0 xi0''(1) / (beta xi0'(q_*)^{3/2}))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoThirds {
    pub lhs: f64,
    pub rhs: f64,
    pub in_region: bool,
}

pub fn two_thirds(model: &Model, rec: &AtRecord) -> TwoThirds {
    let q = rec.q_star;
    let x = model.xi0(q);
    let d2_one = model.xi0(1.0).d2;
    let rhs = if x.d1 > 0.0 {
        (2.0 / 3.0) * (x.d2 / d2_one) * (1.0 - LAMBDA0 * d2_one / (rec.point.beta * x.d1.powf(1.5)))
    } else {
        f64::NEG_INFINITY
    };
    TwoThirds { lhs: rec.alpha, rhs, in_region: rec.point.h > 0.0 && rec.alpha <= rhs }
}

/// A point on the boundary of the two-thirds region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub beta: f64,
    pub h: f64,
    pub q_star: f64,
    pub alpha: f64,
    pub rhs: f64,
}

/// Boundary of the two-thirds region, `alpha = rhs`, for each `beta`.
pub fn two_thirds_boundary(model: &Model, betas: &[f64], opts: &LevelSetOptions) -> Result<Vec<BoundaryPoint>, AtError> {
    let mut out = Vec::new();
    for &beta in betas {
        let f = |h: f64| -> Result<f64, AtError> {
            let rec = at_record(model, SystemPoint::new(beta, h)?, &opts.atline)?;
            let t = two_thirds(model, &rec);
            Ok(if t.rhs.is_finite() { t.lhs - t.rhs } else { 1.0 })
        };
        for h in h_roots(f, opts, 1e-8)? {
            let rec = at_record(model, SystemPoint::new(beta, h)?, &opts.atline)?;
            let t = two_thirds(model, &rec);
            out.push(BoundaryPoint { beta, h, q_star: rec.q_star, alpha: rec.alpha, rhs: t.rhs });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QstarBounds {
    /// `tanh^2(h) / 2`.
    pub tanh_bound: f64,
    /// `1 - sqrt(alpha) / (sqrt(2) beta beta_2)`, when the model has a `t^2` term.
    pub parabolic_bound: Option<f64>,
}

impl QstarBounds {
    pub fn best(&self) -> f64 {
        self.parabolic_bound.map_or(self.tanh_bound, |p| p.max(self.tanh_bound))
    }
}

pub fn qstar_lower_bounds(model: &Model, point: SystemPoint, alpha: f64) -> QstarBounds {
    let b2sq = model.quadratic_coeff();
    let parabolic_bound = (b2sq > 0.0).then(|| 1.0 - alpha.sqrt() / (2f64.sqrt() * point.beta * b2sq.sqrt()));
    QstarBounds { tanh_bound: 0.5 * point.h.tanh().powi(2), parabolic_bound }
}

/// `d/dq E tanh^2(h + sqrt(xi'(q)) Z) - 1`, written as
/// `alpha(q) - 1 + xi''(q) E sech^4(X)(1 - cosh 2X)`.
pub fn stability_jacobian(model: &Model, point: SystemPoint, q: f64, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    let xi = model.xi(point.beta, q);
    let g = Gaussian1::from_var(point.h, xi.d1);
    let a = xi.d2 * expect1(|x| sech(x).powi(4), g, cfg)?;
    // sech^4 (1 - cosh 2x) = -2 tanh^2 sech^2, which avoids overflow
    let extra = xi.d2 * expect1(|x| -2.0 * x.tanh().powi(2) * sech(x).powi(2), g, cfg)?;
    Ok(a - 1.0 + extra)
}

/// `|xi''(q_*)(1 - q_*) - 1.5 alpha|` against `LAMBDA0 xi0''(q_*) / (beta xi0'(q_*)^{3/2})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QlimCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl QlimCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

pub fn qlim_inequality(model: &Model, rec: &AtRecord) -> QlimCheck {
    let q = rec.q_star;
    let beta = rec.point.beta;
    let x0 = model.xi0(q);
    let lhs = (model.xi(beta, q).d2 * (1.0 - q) - 1.5 * rec.alpha).abs();
    let rhs = if x0.d1 > 0.0 { LAMBDA0 * x0.d2 / (beta * x0.d1.powf(1.5)) } else { f64::INFINITY };
    QlimCheck { lhs, rhs }
}
