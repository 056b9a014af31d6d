//! The Parisi functional over atomic measures: value, first variation,
//! optimality certificate, minimization over k atoms and phase classification.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::descent::{delta_ux2, em_profile, McProfile, SdeConfig, SdeError};
use crate::gauss::{expect1, GaussError, Gaussian1, QuadratureConfig};
use crate::model::{Model, SystemPoint};
use crate::pde::{DiscreteMeasure, ParisiSolution, PdeError, TabulatedSolution};
use crate::special::{log_cosh, sech};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarError {
    #[error("invalid options: {0}")]
    BadOptions(&'static str),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalValue {
    pub value: f64,
    pub u_part: f64,
    pub linear_part: f64,
}

/// `1/2 int_0^1 xi''(s) mu[0,s] s ds`, exact from `int xi'' s = s xi' - xi`.
pub fn linear_term(model: &Model, beta: f64, measure: &DiscreteMeasure) -> f64 {
    let prim = |s: f64| {
        let d = model.xi(beta, s);
        s * d.d1 - d.xi
    };
    let atoms = measure.atoms();
    let cdf = measure.cdf();
    let mut acc = 0.0;
    for i in 0..atoms.len() {
        let next = atoms.get(i + 1).copied().unwrap_or(1.0);
        acc += cdf[i] * (prim(next) - prim(atoms[i]));
    }
    0.5 * acc
}

pub fn parisi_value(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, cfg: &QuadratureConfig) -> Result<FunctionalValue, VarError> {
    let u_part = ParisiSolution::new(model, point, measure, cfg).value_at_origin()?;
    let linear_part = linear_term(model, point.beta, measure);
    Ok(FunctionalValue { value: u_part - linear_part, u_part, linear_part })
}

/// `P(delta_q) = E log cosh(h + sqrt(xi'(q)) Z) - xi'(q)(1 - q)/2 + (xi(1) - xi(q))/2`.
pub fn rs_value(model: &Model, point: SystemPoint, q: f64, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    let dq = model.xi(point.beta, q);
    let x1 = model.xi(point.beta, 1.0).xi;
    let e = expect1(log_cosh, Gaussian1::from_var(point.h, dq.d1), cfg)?;
    Ok(e - 0.5 * dq.d1 * (1.0 - q) + 0.5 * (x1 - dq.xi))
}

// Chebyshev interpolant of a smooth function on [a, b] with its antiderivative
// normalized to vanish at b.
#[derive(Debug, Clone)]
struct ChebPiece {
    a: f64,
    b: f64,
    coef: Vec<f64>,
    anti: Vec<f64>,
}

fn clenshaw(c: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in c.iter().skip(1).rev() {
        let t = 2.0 * x * b1 - b2 + ck;
        b2 = b1;
        b1 = t;
    }
    x * b1 - b2 + c[0]
}

impl ChebPiece {
    fn fit<F>(a: f64, b: f64, mut f: F, tol: f64) -> Result<Self, VarError>
    where
        F: FnMut(f64) -> Result<f64, VarError>,
    {
        let map = |x: f64| 0.5 * (a + b) + 0.5 * (b - a) * x;
        let mut n = 16;
        let mut vals: Vec<f64> = (0..=n)
            .map(|j| f(map((std::f64::consts::PI * j as f64 / n as f64).cos())))
            .collect::<Result<_, _>>()?;
        let mut prev: Option<f64> = None;
        loop {
            let piece = Self::from_values(a, b, &vals);
            let total = -piece.tail(a);
            let tailc = piece.coef[n - 2..].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
            let scale = 1.0 + total.abs();
            if let Some(p) = prev {
                if (total - p).abs() <= tol * scale && tailc * (b - a) <= tol * scale {
                    return Ok(piece);
                }
            }
            if n >= 512 {
                return Ok(piece);
            }
            prev = Some(total);
            let m = 2 * n;
            let mut next = vec![0.0; m + 1];
            for j in 0..=m {
                next[j] = if j % 2 == 0 {
                    vals[j / 2]
                } else {
                    f(map((std::f64::consts::PI * j as f64 / m as f64).cos()))?
                };
            }
            vals = next;
            n = m;
        }
    }

    fn from_values(a: f64, b: f64, vals: &[f64]) -> Self {
        let n = vals.len() - 1;
        let mut coef = vec![0.0; n + 1];
        for (k, ck) in coef.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, v) in vals.iter().enumerate() {
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                s += w * v * (std::f64::consts::PI * (j * k) as f64 / n as f64).cos();
            }
            *ck = 2.0 * s / n as f64;
        }
        coef[0] *= 0.5;
        coef[n] *= 0.5;
        let half = 0.5 * (b - a);
        let mut anti = vec![0.0; n + 2];
        for j in 1..=n + 1 {
            let lo = coef[j - 1] * if j == 1 { 2.0 } else { 1.0 };
            let hi = coef.get(j + 1).copied().unwrap_or(0.0);
            anti[j] = half * (lo - hi) / (2.0 * j as f64);
        }
        anti[0] = -anti[1..].iter().sum::<f64>();
        Self { a, b, coef, anti }
    }

    fn x(&self, t: f64) -> f64 {
        ((2.0 * t - self.a - self.b) / (self.b - self.a)).clamp(-1.0, 1.0)
    }

    fn value(&self, t: f64) -> f64 {
        clenshaw(&self.coef, self.x(t))
    }

    /// `int_t^b f`.
    fn tail(&self, t: f64) -> f64 {
        -clenshaw(&self.anti, self.x(t))
    }
}

/// `phi(s) = (xi''(s)/2)(E u_x^2(s, X_s) - s)` for `s` below `q_1`, where the
/// diffusion is free and `u(s, .)` is the heat flow of `u(q_1, .)`.
fn free_phi(tab: &TabulatedSolution, s: f64, cfg: &QuadratureConfig) -> Result<f64, VarError> {
    let sol = tab.solution();
    let d = sol.model().xi(sol.point().beta, s);
    let g = Gaussian1::from_var(sol.point().h, d.d1);
    let err = std::cell::Cell::new(None);
    let e = expect1(
        |x| match tab.eval(s, x) {
            Ok(u) => u.ux * u.ux,
            Err(e) => {
                err.set(Some(e));
                0.0
            }
        },
        g,
        cfg,
    )?;
    if let Some(e) = err.take() {
        return Err(e.into());
    }
    Ok(0.5 * d.d2 * (e - s))
}

#[derive(Debug, Clone)]
enum GRepr {
    Quadrature(Vec<ChebPiece>),
    MonteCarlo { pre: Option<ChebPiece>, profile: McProfile },
}

/// `G_mu(t) = int_t^1 (xi''(s)/2)(E u_x^2(s, X_s) - s) ds`.
#[derive(Debug, Clone)]
pub struct GFunction {
    repr: GRepr,
}

impl GFunction {
    /// Quadrature for one atom, Monte Carlo from the first atom on otherwise.
    pub fn new(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, cfg: &QuadratureConfig, sde: &SdeConfig) -> Result<Self, VarError> {
        if measure.len() == 1 {
            let q = measure.min_support();
            let phi = |s: f64| -> Result<f64, VarError> {
                let d2 = model.xi(point.beta, s).d2;
                Ok(0.5 * d2 * (delta_ux2(model, point, q, s, cfg)? - s))
            };
            let mut pieces = Vec::new();
            if q > 0.0 {
                pieces.push(ChebPiece::fit(0.0, q, phi, 1e-11)?);
            }
            if q < 1.0 {
                pieces.push(ChebPiece::fit(q, 1.0, phi, 1e-11)?);
            }
            return Ok(Self { repr: GRepr::Quadrature(pieces) });
        }
        let sol = ParisiSolution::new(model, point, measure, cfg);
        let profile = em_profile(&sol, sde)?;
        let q1 = measure.min_support();
        let pre = if q1 > 0.0 {
            let v1 = model.xi(point.beta, 1.0).d1;
            let tab = TabulatedSolution::new(&sol, point.h.abs() + 14.0 * v1.sqrt() + 2.0, 0.01);
            Some(ChebPiece::fit(0.0, q1, |s| free_phi(&tab, s, cfg), 1e-10)?)
        } else {
            None
        };
        Ok(Self { repr: GRepr::MonteCarlo { pre, profile } })
    }

    pub fn value(&self, t: f64) -> f64 {
        match &self.repr {
            GRepr::Quadrature(pieces) => {
                let mut acc = 0.0;
                for p in pieces {
                    if t >= p.b {
                        continue;
                    }
                    acc += if t > p.a { p.tail(t) } else { p.tail(p.a) };
                }
                acc
            }
            GRepr::MonteCarlo { pre, profile } => {
                let times = &profile.times;
                if t < times[0] {
                    let base = profile.tail[0];
                    return base + pre.as_ref().map_or(0.0, |p| p.tail(t));
                }
                let i = times.partition_point(|s| *s <= t).saturating_sub(1);
                if i + 1 >= times.len() {
                    return *profile.tail.last().unwrap();
                }
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                (1.0 - w) * profile.tail[i] + w * profile.tail[i + 1]
            }
        }
    }

    /// `G'(t) = -(xi''(t)/2)(E u_x^2(t, X_t) - t)`.
    pub fn derivative(&self, t: f64) -> f64 {
        match &self.repr {
            GRepr::Quadrature(pieces) => {
                let p = pieces.iter().find(|p| t <= p.b).unwrap_or_else(|| pieces.last().unwrap());
                -p.value(t)
            }
            GRepr::MonteCarlo { pre, profile } => {
                if let (Some(p), true) = (pre, t < profile.times[0]) {
                    return -p.value(t);
                }
                let e = 1e-3;
                (self.value((t + e).min(1.0)) - self.value((t - e).max(0.0))) / ((t + e).min(1.0) - (t - e).max(0.0))
            }
        }
    }

    /// Monte Carlo standard error of `G` (zero for quadrature).
    pub fn stderr(&self) -> f64 {
        match &self.repr {
            GRepr::Quadrature(_) => 0.0,
            GRepr::MonteCarlo { profile, .. } => profile.tail_stderr.iter().fold(0.0, |m, v| m.max(*v)),
        }
    }

    fn mc_profile(&self) -> Option<&McProfile> {
        match &self.repr {
            GRepr::MonteCarlo { profile, .. } => Some(profile),
            GRepr::Quadrature(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariation {
    pub t: Vec<f64>,
    pub g: Vec<f64>,
    pub g_prime: Vec<f64>,
    pub min: f64,
    /// Grid points with `G <= min + 1e-6 max(1, |min|)`.
    pub argmin: Vec<f64>,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FvOptions {
    pub quad: QuadratureConfig,
    pub sde: SdeConfig,
}

impl Default for FvOptions {
    fn default() -> Self {
        Self { quad: QuadratureConfig::default(), sde: SdeConfig { n_paths: 20_000, dt: 2e-3, ..SdeConfig::default() } }
    }
}

pub fn first_variation(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, t_grid: &[f64], opts: &FvOptions) -> Result<FirstVariation, VarError> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(VarError::BadOptions("t grid must be non-empty and inside [0, 1]"));
    }
    let gf = GFunction::new(model, point, measure, &opts.quad, &opts.sde)?;
    Ok(summarize(&gf, t_grid))
}

fn summarize(gf: &GFunction, t_grid: &[f64]) -> FirstVariation {
    let g: Vec<f64> = t_grid.iter().map(|t| gf.value(*t)).collect();
    let g_prime: Vec<f64> = t_grid.iter().map(|t| gf.derivative(*t)).collect();
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let band = 1e-6 * min.abs().max(1.0);
    let argmin = t_grid.iter().zip(&g).filter(|(_, v)| **v <= min + band).map(|(t, _)| *t).collect();
    FirstVariation { t: t_grid.to_vec(), g, g_prime, min, argmin, stderr: gf.stderr() }
}

/// Uniform grid with the given step plus the atoms of `measure`.
pub fn test_grid(step: f64, measure: &DiscreteMeasure) -> Vec<f64> {
    let n = (1.0 / step).round().max(1.0) as usize;
    let mut t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).chain(measure.atoms().iter().copied()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomCheck {
    pub q: f64,
    /// `E u_x^2(q, X_q) - q`.
    pub overlap_gap: f64,
    /// `xi''(q) E u_xx^2(q, X_q)`.
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub verdict: Verdict,
    /// `max over atoms of G(q_i) - min G`.
    pub residual: f64,
    pub stderr: f64,
    pub atoms: Vec<AtomCheck>,
    /// `u_x^2(0, h)`, bounded by the first atom at an optimum.
    pub ux2_origin: f64,
    pub reasons: Vec<String>,
    pub first_variation: FirstVariation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub tol: f64,
    pub grid_step: f64,
    pub fv: FvOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { tol: 1e-6, grid_step: 1e-3, fv: FvOptions::default() }
    }
}

pub fn certify(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, opts: &CertifyOptions) -> Result<Certificate, VarError> {
    let cfg = &opts.fv.quad;
    let tol = opts.tol;
    let gf = GFunction::new(model, point, measure, cfg, &opts.fv.sde)?;
    let fv = summarize(&gf, &test_grid(opts.grid_step, measure));
    let residual = measure.atoms().iter().map(|q| gf.value(*q) - fv.min).fold(f64::NEG_INFINITY, f64::max);
    let sol = ParisiSolution::new(model, point, measure, cfg);
    let ux2_origin = sol.eval(0.0, point.h)?.ux.powi(2);
    let mut atoms = Vec::new();
    // per-check slack: 3 standard errors for Monte Carlo quantities
    let mut slack = vec![3.0 * fv.stderr];
    if let Some(p) = gf.mc_profile() {
        for &q in measure.atoms() {
            let i = nearest(&p.times, q);
            let d2 = model.xi(point.beta, q).d2;
            atoms.push(AtomCheck { q, overlap_gap: p.mean_ux2[i] - q, stability: d2 * p.mean_uxx2[i] });
            slack.push(3.0 * p.ux2_stderr[i]);
        }
    } else {
        let q = measure.min_support();
        let d = model.xi(point.beta, q);
        let g = Gaussian1::from_var(point.h, d.d1);
        let e2 = expect1(|x| x.tanh().powi(2), g, cfg)?;
        let e4 = expect1(|x| sech(x).powi(4), g, cfg)?;
        atoms.push(AtomCheck { q, overlap_gap: e2 - q, stability: d.d2 * e4 });
        slack.push(0.0);
    }
    let mut reasons = Vec::new();
    let mut fail = false;
    let mut unsure = false;
    let mut judge = |excess: f64, s: f64, what: String| {
        if excess > tol + s {
            fail = true;
            reasons.push(what);
        } else if excess > tol {
            unsure = true;
        }
    };
    judge(residual, slack[0], format!("G at an atom exceeds min G by {residual:.3e}"));
    for (k, a) in atoms.iter().enumerate() {
        let s = slack[(k + 1).min(slack.len() - 1)];
        judge(a.overlap_gap.abs(), s, format!("E u_x^2({}) - q = {:.3e}", a.q, a.overlap_gap));
        judge(a.stability - 1.0, s, format!("xi''(q) E u_xx^2 = {:.9} at q = {}", a.stability, a.q));
    }
    if measure.max_support() >= 1.0 {
        fail = true;
        reasons.push("atom at 1".to_string());
    }
    if ux2_origin > measure.min_support() + tol {
        fail = true;
        reasons.push(format!("u_x^2(0,h) = {ux2_origin:.9} above the first atom"));
    }
    let stderr = slack.iter().fold(0.0_f64, |m, v| m.max(*v)) / 3.0;
    let verdict = if fail {
        Verdict::Fail
    } else if unsure || stderr > tol {
        Verdict::Undecided
    } else {
        Verdict::Pass
    };
    Ok(Certificate { verdict, residual, stderr, atoms, ux2_origin, reasons, first_variation: fv })
}

fn nearest(times: &[f64], q: f64) -> usize {
    let mut best = 0;
    for (i, t) in times.iter().enumerate() {
        if (t - q).abs() < (times[best] - q).abs() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_evals: usize,
    /// Rules used inside the optimizer; the reported value uses the caller's.
    pub quad: QuadratureConfig,
    pub merge_tol: f64,
    pub min_weight: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { starts: 8, seed: 0x9a21_51, max_evals: 4000, quad: QuadratureConfig::coarse(), merge_tol: 1e-5, min_weight: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub measure: DiscreteMeasure,
    pub value: FunctionalValue,
    pub converged: bool,
}

// Unconstrained coordinates: atoms are partial sums of exp(theta_j) over a
// total that includes a fixed last gap, weights a softmax with last logit 0.
fn decode(x: &[f64], k: usize) -> Option<DiscreteMeasure> {
    let gaps: Vec<f64> = x[..k].iter().map(|v| v.clamp(-60.0, 60.0).exp()).chain(std::iter::once(1.0)).collect();
    let tot: f64 = gaps.iter().sum();
    let mut acc = 0.0;
    let atoms: Vec<f64> = gaps[..k]
        .iter()
        .map(|g| {
            acc += g;
            acc / tot
        })
        .collect();
    let logits: Vec<f64> = x[k..].iter().map(|v| v.clamp(-60.0, 60.0)).chain(std::iter::once(0.0)).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    if atoms.windows(2).any(|p| p[1] <= p[0]) {
        return None;
    }
    DiscreteMeasure::from_weights(&atoms, &w).ok().filter(|m| m.len() == k)
}

fn encode(atoms: &[f64], weights: &[f64]) -> Vec<f64> {
    let k = atoms.len();
    let last_gap = (1.0 - atoms[k - 1]).max(1e-9);
    let mut x = Vec::with_capacity(2 * k - 1);
    let mut prev = 0.0;
    for &q in atoms {
        x.push(((q - prev).max(1e-9) / last_gap).ln());
        prev = q;
    }
    let wk = weights[k - 1].max(1e-12);
    for &w in &weights[..k - 1] {
        x.push((w.max(1e-12) / wk).ln());
    }
    x
}

struct NmResult {
    x: Vec<f64>,
    f: f64,
    converged: bool,
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, max_evals: usize) -> NmResult {
    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    let mut converged = false;
    let sort = |pts: &mut Vec<Vec<f64>>, vals: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        idx.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
        *pts = idx.iter().map(|i| pts[*i].clone()).collect();
        *vals = idx.iter().map(|i| vals[*i]).collect();
    };
    while evals < max_evals {
        sort(&mut pts, &mut vals);
        let spread = vals[n] - vals[0];
        let diam = pts[1..].iter().map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        let scale = 1.0 + vals[0].abs();
        if (spread <= 1e-13 * scale && diam < 1e-6) || spread <= 1e-15 * scale {
            converged = true;
            break;
        }
        let mut c = vec![0.0; n];
        for p in &pts[..n] {
            for j in 0..n {
                c[j] += p[j] / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| c[j] + t * (pts[n][j] - c[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let p: Vec<f64> = (0..n).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
                    vals[i] = f(&p);
                    pts[i] = p;
                }
                evals += n;
            }
        }
    }
    sort(&mut pts, &mut vals);
    NmResult { x: pts[0].clone(), f: vals[0], converged }
}

fn cmp_candidates(a: &(f64, DiscreteMeasure), b: &(f64, DiscreteMeasure)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| {
        for (x, y) in a.1.atoms().iter().chain(a.1.cdf()).zip(b.1.atoms().iter().chain(b.1.cdf())) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    })
}

fn minimize_one(model: &Model, point: SystemPoint, cfg: &QuadratureConfig) -> Result<f64, VarError> {
    let n = 200;
    let vals: Vec<f64> = (0..=n).map(|i| rs_value(model, point, i as f64 / n as f64, cfg)).collect::<Result<_, _>>()?;
    let i = (0..=n).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
    let lo = i.saturating_sub(1) as f64 / n as f64;
    let hi = (i + 1).min(n) as f64 / n as f64;
    // the value is stationary where E tanh^2 = q
    let psi = |q: f64| -> Result<f64, GaussError> {
        let g = Gaussian1::from_var(point.h, model.xi(point.beta, q).d1);
        Ok(expect1(|x| x.tanh().powi(2), g, cfg)? - q)
    };
    let mut cands = vec![i as f64 / n as f64];
    let mut polish = |a: f64, b: f64| -> Result<(), VarError> {
        let (mut a, mut b) = (a, b);
        let (fa, fb) = (psi(a)?, psi(b)?);
        if fa == 0.0 {
            cands.push(a);
            return Ok(());
        }
        if fa.signum() == fb.signum() {
            return Ok(());
        }
        while b - a > 1e-14 {
            let m = 0.5 * (a + b);
            if psi(m)?.signum() == fa.signum() {
                a = m;
            } else {
                b = m;
            }
        }
        cands.push(0.5 * (a + b));
        Ok(())
    };
    polish(lo, i as f64 / n as f64)?;
    polish(i as f64 / n as f64, hi)?;
    // golden section as a fallback where psi keeps its sign
    let (mut a, mut b) = (lo, hi);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (rs_value(model, point, c, cfg)?, rs_value(model, point, d, cfg)?);
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = rs_value(model, point, c, cfg)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = rs_value(model, point, d, cfg)?;
        }
    }
    cands.push(0.5 * (a + b));
    // among numerically equal values prefer the exact stationary point
    let mut best = (f64::INFINITY, f64::INFINITY, 0.0);
    for q in cands {
        let v = rs_value(model, point, q, cfg)?;
        let r = psi(q)?.abs();
        if v < best.0 - 1e-14 || (v <= best.0 + 1e-14 && r < best.1) {
            best = (v.min(best.0), r, q);
        }
    }
    Ok(best.2)
}

/// Best `k`-atomic measure. `warm` (typically the `(k-1)` optimum) seeds one
/// start by splitting its heaviest atom.
pub fn minimize_k(
    model: &Model,
    point: SystemPoint,
    k: usize,
    cfg: &QuadratureConfig,
    opts: &MinimizeOptions,
    warm: Option<&DiscreteMeasure>,
) -> Result<Minimum, VarError> {
    if k == 0 {
        return Err(VarError::BadOptions("k must be at least 1"));
    }
    if k == 1 {
        let q = minimize_one(model, point, cfg)?;
        let measure = DiscreteMeasure::dirac(q)?;
        let value = parisi_value(model, point, &measure, cfg)?;
        return Ok(Minimum { measure, value, converged: true });
    }
    let objective = |x: &[f64]| -> f64 {
        match decode(x, k) {
            Some(m) => {
                let u = ParisiSolution::new(model, point, &m, &opts.quad).value_at_origin();
                match u {
                    Ok(u) => u - linear_term(model, point.beta, &m),
                    Err(_) => f64::INFINITY,
                }
            }
            None => f64::INFINITY,
        }
    };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm {
        let (atoms, weights) = split_heaviest(w, k);
        starts.push(encode(&atoms, &weights));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
    while starts.len() < opts.starts.max(1) {
        let mut atoms: Vec<f64> = (0..k).map(|_| rng.gen_range(0.02..0.98)).collect();
        atoms.sort_by(f64::total_cmp);
        for i in 1..k {
            if atoms[i] - atoms[i - 1] < 0.01 {
                atoms[i] = (atoms[i - 1] + 0.01).min(0.99);
            }
        }
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        starts.push(encode(&atoms, &weights));
    }
    let results: Vec<NmResult> = starts
        .par_iter()
        .map(|x0| {
            let first = nelder_mead(&objective, x0, 0.4, opts.max_evals / 2);
            let second = nelder_mead(&objective, &first.x, 0.05, opts.max_evals / 2);
            if second.f <= first.f { second } else { first }
        })
        .collect();
    let mut cands: Vec<(f64, DiscreteMeasure, bool)> = results
        .into_iter()
        .filter_map(|r| decode(&r.x, k).map(|m| (r.f, m, r.converged)))
        .collect();
    if cands.is_empty() {
        return Err(VarError::BadOptions("optimizer found no admissible measure"));
    }
    cands.sort_by(|a, b| cmp_candidates(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
    let (_, raw, converged) = cands.swap_remove(0);
    let simple = raw.simplified(opts.merge_tol, opts.min_weight);
    let v_raw = parisi_value(model, point, &raw, cfg)?;
    let v_simple = parisi_value(model, point, &simple, cfg)?;
    let (measure, value) = if simple != raw && v_simple.value <= v_raw.value + 1e-10 { (simple, v_simple) } else { (raw, v_raw) };
    Ok(Minimum { measure, value, converged })
}

fn split_heaviest(m: &DiscreteMeasure, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut atoms = m.atoms().to_vec();
    let mut weights = m.weights();
    while atoms.len() < k {
        let i = (0..atoms.len()).max_by(|a, b| weights[*a].total_cmp(&weights[*b])).unwrap();
        let q = atoms[i];
        let lo = atoms.get(i.wrapping_sub(1)).copied().unwrap_or(0.0);
        let hi = atoms.get(i + 1).copied().unwrap_or(1.0);
        let (a, b) = ((q - 0.05).max(0.5 * (lo + q)).max(1e-3), (q + 0.05).min(0.5 * (q + hi)).min(0.999));
        let w = weights[i];
        atoms[i] = a;
        weights[i] = 0.5 * w;
        atoms.insert(i + 1, b.max(a + 1e-4));
        weights.insert(i + 1, 0.5 * w);
    }
    (atoms, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Rs,
    /// Replica symmetry breaking with the given number of breaks (atoms - 1).
    Rsb(usize),
    Undecided,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Rs => write!(f, "RS"),
            Phase::Rsb(k) => write!(f, "{k}RSB"),
            Phase::Undecided => write!(f, "UNDECIDED"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub measure: DiscreteMeasure,
    pub value: FunctionalValue,
    pub certificate: Certificate,
    /// Best value found for each number of atoms tried.
    pub ladder: Vec<(usize, f64)>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    pub max_k: usize,
    pub quad: QuadratureConfig,
    pub certify: CertifyOptions,
    pub minimize: MinimizeOptions,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self { max_k: 3, quad: QuadratureConfig::default(), certify: CertifyOptions::default(), minimize: MinimizeOptions::default() }
    }
}

pub fn classify(model: &Model, point: SystemPoint, opts: &ClassifyOptions) -> Result<PhaseReport, VarError> {
    if opts.max_k == 0 {
        return Err(VarError::BadOptions("max_k must be at least 1"));
    }
    let mut ladder = Vec::new();
    let mut warm: Option<DiscreteMeasure> = None;
    let mut best: Option<(Minimum, Certificate)> = None;
    for k in 1..=opts.max_k {
        let min = minimize_k(model, point, k, &opts.quad, &opts.minimize, warm.as_ref())?;
        ladder.push((k, min.value.value));
        let cert = certify(model, point, &min.measure, &opts.certify)?;
        if cert.verdict == Verdict::Pass {
            let phase = if min.measure.len() == 1 { Phase::Rs } else { Phase::Rsb(min.measure.len() - 1) };
            return Ok(PhaseReport { phase, measure: min.measure, value: min.value, certificate: cert, ladder, note: None });
        }
        warm = Some(min.measure.clone());
        if best.as_ref().map_or(true, |(b, _)| min.value.value < b.value.value) {
            best = Some((min, cert));
        }
    }
    let (min, cert) = best.unwrap();
    let decreasing = ladder.windows(2).all(|w| w[1].1 < w[0].1 - 1e-9);
    let note = if ladder.len() > 1 && decreasing {
        Some("value still decreasing in k".to_string())
    } else {
        None
    };
    Ok(PhaseReport { phase: Phase::Undecided, measure: min.measure, value: min.value, certificate: cert, ladder, note })
}

/// Best one- and two-atomic measures and the gap `P(one) - P(two)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepMargin {
    pub one: Minimum,
    pub two: Minimum,
    pub margin: f64,
}

pub fn deep_margin(model: &Model, point: SystemPoint, cfg: &QuadratureConfig, opts: &MinimizeOptions) -> Result<DeepMargin, VarError> {
    let one = minimize_k(model, point, 1, cfg, opts, None)?;
    let two = minimize_k(model, point, 2, cfg, opts, Some(&one.measure))?;
    let margin = one.value.value - two.value.value;
    Ok(DeepMargin { one, two, margin })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn linear_term_matches_direct_integral() {
        let m: Model = "2:0.25,3:0.2,4:0.25".parse().unwrap();
        let mu = DiscreteMeasure::new(vec![0.2, 0.5, 0.8], vec![0.3, 0.6, 1.0]).unwrap();
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            acc += m.xi(1.7, s).d2 * mu.cdf_at(s) * s / n as f64;
        }
        assert!((linear_term(&m, 1.7, &mu) - 0.5 * acc).abs() < 1e-8);
    }

    #[test]
    fn dirac_values() {
        let m: Model = "2:0.25,4:0.25".parse().unwrap();
        let p = SystemPoint::new(1.3, 0.4).unwrap();
        let v0 = parisi_value(&m, p, &DiscreteMeasure::dirac(0.0).unwrap(), &cfg()).unwrap();
        assert!((v0.value - (0.4f64.cosh().ln() + 0.5 * m.xi(1.3, 1.0).xi)).abs() < 1e-12);
        for &q in &[0.1, 0.5, 0.9] {
            let a = parisi_value(&m, p, &DiscreteMeasure::dirac(q).unwrap(), &cfg()).unwrap().value;
            let b = rs_value(&m, p, q, &cfg()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let tiny = SystemPoint::new(1e-7, 0.7).unwrap();
        let v = parisi_value(&m, tiny, &DiscreteMeasure::dirac(0.3).unwrap(), &cfg()).unwrap().value;
        assert!((v - 0.7f64.cosh().ln()).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_tail_integral() {
        let p = ChebPiece::fit(0.2, 1.3, |s| Ok(s.sin() * s.exp()), 1e-13).unwrap();
        let prim = |s: f64| 0.5 * s.exp() * (s.sin() - s.cos());
        for &t in &[0.2, 0.5, 1.0, 1.3] {
            assert!((p.tail(t) - (prim(1.3) - prim(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn first_variation_basics() {
        let m = Model::sk();
        let p = SystemPoint::new(0.8, 0.3).unwrap();
        let q = crate::atline::at_record(&m, p, &Default::default()).unwrap().q_star;
        let mu = DiscreteMeasure::dirac(q).unwrap();
        let grid = test_grid(1e-3, &mu);
        let fv = first_variation(&m, p, &mu, &grid, &FvOptions::default()).unwrap();
        assert_eq!(*fv.g.last().unwrap(), 0.0);
        let iq = grid.iter().position(|t| *t == q).unwrap();
        assert!(fv.g_prime[iq].abs() < 1e-7);
        assert!(fv.g[iq] - fv.min < 1e-9);
        assert!(fv.argmin.iter().any(|t| (t - q).abs() < 2e-3));
        // derivative against differences of G
        let gf = GFunction::new(&m, p, &mu, &cfg(), &SdeConfig::default()).unwrap();
        for &t in &[0.1, 0.5, 0.9] {
            let e = 1e-5;
            let fd = (gf.value(t + e) - gf.value(t - e)) / (2.0 * e);
            assert!((fd - gf.derivative(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn one_atom_optimum_is_the_fixed_point() {
        let m = Model::sk();
        let p = SystemPoint::new(0.8, 0.3).unwrap();
        let q = crate::atline::at_record(&m, p, &Default::default()).unwrap().q_star;
        let min = minimize_k(&m, p, 1, &cfg(), &MinimizeOptions::default(), None).unwrap();
        assert!((min.measure.min_support() - q).abs() < 1e-5);
    }

    #[test]
    fn certificate_cases() {
        let m = Model::sk();
        let hot = SystemPoint::new(0.5, 0.0).unwrap();
        let c = certify(&m, hot, &DiscreteMeasure::dirac(0.0).unwrap(), &CertifyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Pass, "{:?}", c.reasons);
        let cold = SystemPoint::new(2.0, 0.1).unwrap();
        let q = crate::atline::at_record(&m, cold, &Default::default()).unwrap().q_star;
        let c = certify(&m, cold, &DiscreteMeasure::dirac(q).unwrap(), &CertifyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
        let c = certify(&m, hot, &DiscreteMeasure::dirac(1.0).unwrap(), &CertifyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
    }

    #[test]
    fn mixing_variations_do_not_decrease_a_certified_optimum() {
        let m = Model::sk();
        let p = SystemPoint::new(1.2, 1.0).unwrap();
        let min = minimize_k(&m, p, 1, &cfg(), &MinimizeOptions::default(), None).unwrap();
        let base = min.value.value;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q: f64 = rng.gen_range(0.0..1.0);
            let mixed = min.measure.mix(&DiscreteMeasure::dirac(q).unwrap(), 1e-3).unwrap();
            let v = parisi_value(&m, p, &mixed, &cfg()).unwrap().value;
            assert!(v >= base - 1e-7);
        }
    }

    #[test]
    fn directional_derivative_matches_first_variation() {
        let m: Model = "2:0.25,4:0.25".parse().unwrap();
        let p = SystemPoint::new(1.4, 0.5).unwrap();
        let mu = DiscreteMeasure::dirac(0.45).unwrap();
        let nu = DiscreteMeasure::new(vec![0.2, 0.7], vec![0.4, 1.0]).unwrap();
        let gf = GFunction::new(&m, p, &mu, &cfg(), &SdeConfig::default()).unwrap();
        let pair: f64 = nu.atoms().iter().zip(nu.weights()).map(|(q, w)| w * gf.value(*q)).sum::<f64>() - gf.value(0.45);
        let base = parisi_value(&m, p, &mu, &cfg()).unwrap().value;
        let quot = |th: f64| (parisi_value(&m, p, &mu.mix(&nu, th).unwrap(), &cfg()).unwrap().value - base) / th;
        let rich = 2.0 * quot(1e-4) - quot(2e-4);
        assert!((rich - pair).abs() < 1e-5, "{rich} {pair}");
    }

    #[test]
    fn classify_high_temperature() {
        let r = classify(&Model::sk(), SystemPoint::new(0.5, 0.0).unwrap(), &ClassifyOptions::default()).unwrap();
        assert_eq!(r.phase, Phase::Rs);
        assert_eq!(r.measure.len(), 1);
        assert!(r.certificate.residual <= 1e-6);
    }

    #[test]
    fn encode_decode_round_trip() {
        let atoms = [0.1, 0.35, 0.8];
        let w = [0.2, 0.5, 0.3];
        let m = decode(&encode(&atoms, &w), 3).unwrap();
        for (a, b) in m.atoms().iter().zip(atoms) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in m.weights().iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
