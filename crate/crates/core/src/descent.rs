//! Expectations along the auxiliary diffusion
//! `dX = xi''(s) mu[0,s] u_x(s, X) ds + sqrt(xi''(s)) dW`, `X_0 = h`.
//!
//! Before the first atom the drift vanishes and `X_t ~ N(h, xi'(t))`. For a
//! single atom at `q` and `t >= q`, `u_x = tanh` and the change of measure
//! `sech(Y_q) / sech(Y_t) * exp(-(xi'(t) - xi'(q)) / 2)` gives the law of `X_t`
//! from the driftless process `Y`. Integrating out `Y_t` given `Y_q = y` turns
//! that weight into a two-component mixture: `X_t ~ N(y +- r^2, r^2)` with
//! probabilities `(1 +- tanh y) / 2`, `r^2 = xi'(t) - xi'(q)`. The mixture is
//! what [`girsanov_expect`] evaluates; it has bounded weights at any `beta`.
//! [`girsanov_expect_ratio`] keeps the literal ratio form for cross-checks.
//!
//! General measures go through Euler-Maruyama in the intrinsic clock
//! `v = xi'(t)`, optionally with Talay-Tubaro extrapolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::gauss::{expect1, expect2, nested_ratio, rule_for, GaussError, Gaussian1, Gaussian2, QuadratureConfig};
use crate::model::{Model, SystemPoint};
use crate::pde::{DiscreteMeasure, ParisiSolution, PdeError, TabulatedSolution};
use crate::special::{log_sech, sech};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("free law needs t <= inf supp mu = {inf_supp}, got t = {t}")]
    NotFree { t: f64, inf_supp: f64 },
    #[error("quadrature is only available for t <= inf supp mu or a single atom; use Monte Carlo")]
    NeedsMonteCarlo,
    #[error("invalid SDE configuration: {0}")]
    BadConfig(&'static str),
    #[error("Monte Carlo produced a non-finite sample")]
    NonFinite,
    #[error("Euler-Maruyama path left the box |x| <= {0}")]
    Unstable(f64),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Talay-Tubaro extrapolation `2 E_dt - E_2dt` on shared increments.
    pub richardson: bool,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { dt: 1e-3, n_paths: 100_000, seed: 0x5eed_2024, richardson: true }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.dt > 0.0 && self.dt <= 1e-2) {
            return Err(SdeError::BadConfig("dt must lie in (0, 0.01]"));
        }
        if self.n_paths < 1000 {
            return Err(SdeError::BadConfig("need at least 1000 paths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Law of `X_t` when `mu[0, t) = 0`.
pub fn free_law(model: &Model, point: SystemPoint, measure: &DiscreteMeasure, t: f64) -> Result<Gaussian1, SdeError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SdeError::BadTime(t));
    }
    if t > measure.min_support() {
        return Err(SdeError::NotFree { t, inf_supp: measure.min_support() });
    }
    Ok(Gaussian1::from_var(point.h, model.xi(point.beta, t).d1))
}

// E f(X_t) for mu = delta_q, t >= q, several functions at once.
fn mixture_expect<const N: usize, F>(
    model: &Model,
    point: SystemPoint,
    q: f64,
    t: f64,
    f: F,
    cfg: &QuadratureConfig,
) -> Result<[f64; N], SdeError>
where
    F: Fn(f64) -> [f64; N],
{
    if !(0.0..=1.0).contains(&t) || t < q {
        return Err(SdeError::BadTime(t));
    }
    let vq = model.xi(point.beta, q).d1;
    let r2 = (model.xi(point.beta, t).d1 - vq).max(0.0);
    let outer_std = vq.sqrt();
    let r = r2.sqrt();
    let outer = rule_for(outer_std, cfg);
    let inner = rule_for(r, cfg);
    let mut acc = [0.0; N];
    let ys: Vec<(f64, f64)> = if outer_std == 0.0 {
        vec![(point.h, 1.0)]
    } else {
        outer.z.iter().zip(&outer.w).map(|(z, w)| (point.h + outer_std * z, *w)).collect()
    };
    for (y, wy) in ys {
        let th = y.tanh();
        for (sign, p) in [(1.0, 0.5 * (1.0 + th)), (-1.0, 0.5 * (1.0 - th))] {
            if p == 0.0 {
                continue;
            }
            let c = y + sign * r2;
            if r == 0.0 {
                let v = f(c);
                for k in 0..N {
                    acc[k] += wy * p * v[k];
                }
                continue;
            }
            for (z, wz) in inner.z.iter().zip(&inner.w) {
                let v = f(c + r * z);
                for k in 0..N {
                    acc[k] += wy * p * wz * v[k];
                }
            }
        }
    }
    if acc.iter().all(|v| v.is_finite()) {
        Ok(acc)
    } else {
        Err(GaussError::NonFinite(t).into())
    }
}

/// `E_h f(X_t)` for `mu = delta_q` and `t >= q`, via the Gaussian mixture.
pub fn girsanov_expect<F: Fn(f64) -> f64>(
    model: &Model,
    point: SystemPoint,
    q: f64,
    t: f64,
    f: F,
    cfg: &QuadratureConfig,
) -> Result<f64, SdeError> {
    Ok(mixture_expect(model, point, q, t, |x| [f(x)], cfg)?[0])
}

/// Same expectation as [`girsanov_expect`] from the literal weight
/// `E f(Y_t) sech(Y_q) / sech(Y_t) e^{-(xi'(t) - xi'(q))/2}` over the Gaussian
/// pair `(Y_q, Y_t)`. Loses accuracy once `xi'(t)` is large.
pub fn girsanov_expect_ratio<F: Fn(f64) -> f64>(
    model: &Model,
    point: SystemPoint,
    q: f64,
    t: f64,
    f: F,
    cfg: &QuadratureConfig,
) -> Result<f64, SdeError> {
    if !(0.0..=1.0).contains(&t) || t < q {
        return Err(SdeError::BadTime(t));
    }
    let vq = model.xi(point.beta, q).d1;
    let vt = model.xi(point.beta, t).d1;
    let g = Gaussian2 { mean: [point.h, point.h], cov: [[vq, vq], [vq, vt]] };
    Ok(expect2(|yq, yt| f(yt) * (log_sech(yq) - log_sech(yt) - 0.5 * (vt - vq)).exp(), g, cfg)?)
}

/// Moments of `u` derivatives along the diffusion at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub ux2: f64,
    pub uxx2: f64,
    pub uxxx2: f64,
    pub uxx3: f64,
}

/// `E u_x^2, E u_xx^2, E u_xxx^2, E u_xx^3` at `(s, X_s)` for `mu = delta_q`.
pub fn delta_moments(model: &Model, point: SystemPoint, q: f64, s: f64, cfg: &QuadratureConfig) -> Result<Moments, SdeError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SdeError::BadTime(s));
    }
    if s >= q {
        let v = mixture_expect(
            model,
            point,
            q,
            s,
            |x| {
                let th = x.tanh();
                let s2 = sech(x).powi(2);
                let u3 = -2.0 * th * s2;
                [th * th, s2 * s2, u3 * u3, s2 * s2 * s2]
            },
            cfg,
        )?;
        return Ok(Moments { ux2: v[0], uxx2: v[1], uxxx2: v[2], uxx3: v[3] });
    }
    // before the atom u(s, .) is the heat flow of ln cosh over xi'(q) - xi'(s)
    let vs = model.xi(point.beta, s).d1;
    let a = (model.xi(point.beta, q).d1 - vs).max(0.0).sqrt();
    let inner = rule_for(a, cfg);
    let outer = Gaussian1::from_var(point.h, vs);
    let derivs = |x: f64| {
        let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
        for (z, w) in inner.z.iter().zip(&inner.w) {
            let y = x + a * z;
            let th = y.tanh();
            let s2 = 1.0 - th * th;
            d1 += w * th;
            d2 += w * s2;
            d3 += w * (-2.0 * th * s2);
        }
        (d1, d2, d3)
    };
    let ux2 = expect1(|x| derivs(x).0.powi(2), outer, cfg)?;
    let uxx2 = expect1(|x| derivs(x).1.powi(2), outer, cfg)?;
    let uxxx2 = expect1(|x| derivs(x).2.powi(2), outer, cfg)?;
    let uxx3 = expect1(|x| derivs(x).1.powi(3), outer, cfg)?;
    Ok(Moments { ux2, uxx2, uxxx2, uxx3 })
}

/// `E u_x^2(s, X_s)` for `mu = delta_q`; the cheap part of [`delta_moments`].
pub fn delta_ux2(model: &Model, point: SystemPoint, q: f64, s: f64, cfg: &QuadratureConfig) -> Result<f64, SdeError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SdeError::BadTime(s));
    }
    if s >= q {
        return Ok(mixture_expect(model, point, q, s, |x| [x.tanh().powi(2)], cfg)?[0]);
    }
    let vs = model.xi(point.beta, s).d1;
    let a = (model.xi(point.beta, q).d1 - vs).max(0.0).sqrt();
    let inner = rule_for(a, cfg);
    let ux = |x: f64| inner.z.iter().zip(&inner.w).map(|(z, w)| w * (x + a * z).tanh()).sum::<f64>();
    Ok(expect1(|x| ux(x).powi(2), Gaussian1::from_var(point.h, vs), cfg)?)
}

/// `g(y) = E u_x^2(y, X_y) - y` on `[q_*, 1]` for `mu = delta_{q_*}`.
#[derive(Debug, Clone)]
pub struct GFunctionContext {
    pub model: Model,
    pub point: SystemPoint,
    pub q_star: f64,
    pub cfg: QuadratureConfig,
}

impl GFunctionContext {
    pub fn new(model: &Model, point: SystemPoint, q_star: f64, cfg: &QuadratureConfig) -> Self {
        Self { model: model.clone(), point, q_star, cfg: *cfg }
    }

    pub fn g(&self, y: f64) -> Result<f64, SdeError> {
        Ok(delta_ux2(&self.model, self.point, self.q_star, y, &self.cfg)? - y)
    }

    /// `g'(y) = xi''(y) E u_xx^2(y, X_y) - 1`.
    pub fn g_prime(&self, y: f64) -> Result<f64, SdeError> {
        let d2 = self.model.xi(self.point.beta, y).d2;
        Ok(d2 * delta_moments(&self.model, self.point, self.q_star, y, &self.cfg)?.uxx2 - 1.0)
    }

    /// `g` from the nested form `E[E'(tanh^2(Y') cosh Y') / E' cosh Y'] - y`,
    /// `Y ~ N(h, xi'(q_*))`, `Y' = Y + sqrt(xi'(y) - xi'(q_*)) Z'`.
    pub fn g_nested(&self, y: f64) -> Result<f64, SdeError> {
        let vq = self.model.xi(self.point.beta, self.q_star).d1;
        let r = (self.model.xi(self.point.beta, y).d1 - vq).max(0.0).sqrt();
        let v = nested_ratio(
            |x| x.sinh() * x.tanh(),
            |x| x.cosh(),
            Gaussian1::from_var(self.point.h, vq),
            r,
            &self.cfg,
        )?;
        Ok(v - y)
    }
}

/// Residuals of the two Ito identities at time `s` for `mu = delta_q`:
/// `d/ds E u_x^2 = xi'' E u_xx^2` and
/// `d/ds E u_xx^2 = xi'' E[u_xxx^2 - 2 mu u_xx^3]`.
/// At `s = q` both one-sided derivatives are checked, with `mu[0,s)` on the
/// left and `mu[0,s]` on the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItoResiduals {
    pub first: f64,
    pub second: f64,
}

pub fn ito_audit(model: &Model, point: SystemPoint, q: f64, s: f64, cfg: &QuadratureConfig) -> Result<ItoResiduals, SdeError> {
    let m = |t: f64| delta_moments(model, point, q, t, cfg);
    let d2 = model.xi(point.beta, s).d2;
    let base = m(s)?;
    let eps = 1e-4_f64;
    let check = |deriv: (f64, f64), mu: f64, at: &Moments| {
        (
            (deriv.0 - d2 * at.uxx2).abs(),
            (deriv.1 - d2 * (at.uxxx2 - 2.0 * mu * at.uxx3)).abs(),
        )
    };
    let gap = (s - q).abs();
    if gap > 2.0 * eps {
        let e = eps.min(0.5 * gap).min(s.max(1e-12)).min(1.0 - s).max(1e-7);
        let (a, b) = (m(s + e)?, m(s - e)?);
        let deriv = ((a.ux2 - b.ux2) / (2.0 * e), (a.uxx2 - b.uxx2) / (2.0 * e));
        let mu = if s >= q { 1.0 } else { 0.0 };
        let (r1, r2) = check(deriv, mu, &base);
        return Ok(ItoResiduals { first: r1, second: r2 });
    }
    // one-sided second-order differences on each side of the atom
    let (mut r1, mut r2) = (0.0_f64, 0.0_f64);
    if s + 2.0 * eps <= 1.0 {
        let at = m(q)?;
        let (a, b) = (m(q + eps)?, m(q + 2.0 * eps)?);
        let deriv = ((-3.0 * at.ux2 + 4.0 * a.ux2 - b.ux2) / (2.0 * eps), (-3.0 * at.uxx2 + 4.0 * a.uxx2 - b.uxx2) / (2.0 * eps));
        let (x, y) = check(deriv, 1.0, &at);
        r1 = r1.max(x);
        r2 = r2.max(y);
    }
    if q - 2.0 * eps >= 0.0 {
        let at = m(q)?;
        let (a, b) = (m(q - eps)?, m(q - 2.0 * eps)?);
        let deriv = ((3.0 * at.ux2 - 4.0 * a.ux2 + b.ux2) / (2.0 * eps), (3.0 * at.uxx2 - 4.0 * a.uxx2 + b.uxx2) / (2.0 * eps));
        // left of the atom mu[0, s) = 0 and u(s-, .) has the same derivatives
        let (x, y) = check(deriv, 0.0, &at);
        r1 = r1.max(x);
        r2 = r2.max(y);
    }
    Ok(ItoResiduals { first: r1, second: r2 })
}

// Uniform table of u_x and u_xx at one time, cubic Hermite in between.
#[derive(Debug, Clone)]
struct DriftTable {
    x0: f64,
    dx: f64,
    ux: Vec<f64>,
    uxx: Vec<f64>,
}

impl DriftTable {
    fn build(tab: &TabulatedSolution, t: f64, lo: f64, hi: f64, dx: f64) -> Result<Self, SdeError> {
        let n = ((hi - lo) / dx).ceil() as usize + 1;
        let mut ux = Vec::with_capacity(n);
        let mut uxx = Vec::with_capacity(n);
        for i in 0..n {
            let d = tab.eval(t, lo + i as f64 * dx)?;
            ux.push(d.ux);
            uxx.push(d.uxx);
        }
        Ok(Self { x0: lo, dx, ux, uxx })
    }

    // u_x and the derivative of its interpolant
    fn both(&self, x: f64) -> (f64, f64) {
        let last = self.ux.len() - 1;
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 {
            return (self.ux[0], self.uxx[0]);
        }
        if pos >= last as f64 {
            return (self.ux[last], self.uxx[last]);
        }
        let i = (pos.floor() as usize).min(last - 1);
        let s = pos - i as f64;
        let s2 = s * s;
        let d = (6.0 * s2 - 6.0 * s) * (self.ux[i] - self.ux[i + 1]) / self.dx
            + (3.0 * s2 - 4.0 * s + 1.0) * self.uxx[i]
            + (3.0 * s2 - 2.0 * s) * self.uxx[i + 1];
        (self.ux(x), d)
    }

    fn ux(&self, x: f64) -> f64 {
        let last = self.ux.len() - 1;
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 {
            return self.ux[0];
        }
        if pos >= last as f64 {
            return self.ux[last];
        }
        let i = (pos.floor() as usize).min(last - 1);
        let s = pos - i as f64;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.ux[i]
            + (s3 - 2.0 * s2 + s) * self.dx * self.uxx[i]
            + (-2.0 * s3 + 3.0 * s2) * self.ux[i + 1]
            + (s3 - s2) * self.dx * self.uxx[i + 1]
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    t: f64,
    dv: f64,
    mu: f64,
    table: Option<usize>,
}

// Time discretization from the first atom (or t_end) onward; drift-free
// stretches before the first atom are sampled exactly.
struct Plan {
    h: f64,
    v0: f64,
    steps: Vec<Step>,
    tables: Vec<DriftTable>,
    /// times of the coarse nodes, starting at the first stepped time
    nodes: Vec<f64>,
    bound: f64,
}

impl Plan {
    fn new(sol: &ParisiSolution, t_end: f64, cfg: &SdeConfig) -> Result<Self, SdeError> {
        let model = sol.model();
        let point = sol.point();
        let measure = sol.measure();
        let beta = point.beta;
        let t0 = measure.min_support().min(t_end);
        let q_last = measure.max_support();
        let mut cuts: Vec<f64> = vec![t0];
        cuts.extend(measure.atoms().iter().copied().filter(|q| *q > t0 && *q < t_end));
        cuts.push(t_end);
        let mut steps = Vec::new();
        let mut nodes = vec![t0];
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let n = 2 * ((len / (2.0 * cfg.dt)).ceil() as usize).max(1);
            for i in 0..n {
                let a = w[0] + len * i as f64 / n as f64;
                let b = w[0] + len * (i + 1) as f64 / n as f64;
                let dv = model.xi(beta, b).d1 - model.xi(beta, a).d1;
                steps.push(Step { t: a, dv, mu: measure.cdf_at(a), table: None });
                if i % 2 == 1 {
                    nodes.push(b);
                }
            }
        }
        // drift tables where u_x is not closed form
        let mut tables = Vec::new();
        let needs_table = |s: &Step| s.mu > 0.0 && s.t < q_last;
        if steps.iter().any(needs_table) {
            let v1 = model.xi(beta, 1.0).d1;
            let spread = model.xi(beta, q_last).d1 - model.xi(beta, t0).d1;
            let w = 8.0 * v1.sqrt() + spread + 5.0;
            let tab = TabulatedSolution::new(sol, point.h.abs() + w + 12.0 * v1.sqrt() + 2.0, 0.01);
            for s in steps.iter_mut() {
                if needs_table(s) {
                    tables.push(DriftTable::build(&tab, s.t, point.h - w, point.h + w, 0.05)?);
                    s.table = Some(tables.len() - 1);
                }
            }
        }
        let bound = point.h.abs() + 20.0 * model.xi(beta, 1.0).d1.sqrt();
        Ok(Self { h: point.h, v0: model.xi(beta, t0).d1, steps, tables, nodes, bound })
    }

    fn ux(&self, step: &Step, x: f64) -> f64 {
        match step.table {
            Some(i) => self.tables[i].ux(x),
            None => x.tanh(),
        }
    }

    // Fine and coarse states at every coarse node.
    fn path(&self, rng: &mut ChaCha8Rng, fine: &mut Vec<f64>, coarse: &mut Vec<f64>) -> Result<(), SdeError> {
        fine.clear();
        coarse.clear();
        let z: f64 = StandardNormal.sample(rng);
        let mut xf = self.h + self.v0.sqrt() * z;
        let mut xc = xf;
        fine.push(xf);
        coarse.push(xc);
        for pair in self.steps.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            let (d1, d2) = (a.dv.sqrt() * z1, b.dv.sqrt() * z2);
            if a.mu > 0.0 {
                xc += a.mu * self.ux(a, xc) * (a.dv + b.dv);
                xf += a.mu * self.ux(a, xf) * a.dv;
            }
            xf += d1;
            if b.mu > 0.0 {
                xf += b.mu * self.ux(b, xf) * b.dv;
            }
            xf += d2;
            xc += d1 + d2;
            if !(xf.abs() <= self.bound && xc.abs() <= self.bound) {
                return Err(SdeError::Unstable(self.bound));
            }
            fine.push(xf);
            coarse.push(xc);
        }
        Ok(())
    }
}

const CHUNK: usize = 1024;

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Euler-Maruyama estimate of `E_h f(X_t)` for a general discrete measure.
pub fn em_expect<F>(sol: &ParisiSolution, t: f64, f: F, cfg: &SdeConfig) -> Result<McEstimate, SdeError>
where
    F: Fn(f64) -> f64 + Sync,
{
    cfg.validate()?;
    if !(0.0..=1.0).contains(&t) {
        return Err(SdeError::BadTime(t));
    }
    let plan = Plan::new(sol, t, cfg)?;
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<(f64, f64), SdeError> {
            let (mut s, mut s2) = (0.0, 0.0);
            let (mut fine, mut coarse) = (Vec::new(), Vec::new());
            for p in c * CHUNK..((c + 1) * CHUNK).min(cfg.n_paths) {
                let mut rng = path_rng(cfg.seed, p);
                plan.path(&mut rng, &mut fine, &mut coarse)?;
                let xf = *fine.last().unwrap();
                let xc = *coarse.last().unwrap();
                let v = if cfg.richardson && !plan.steps.is_empty() { 2.0 * f(xf) - f(xc) } else { f(xf) };
                s += v;
                s2 += v * v;
            }
            Ok((s, s2))
        })
        .collect::<Result<_, _>>()?;
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = cfg.n_paths as f64;
    let mean = s / n;
    let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
    if !mean.is_finite() {
        return Err(SdeError::NonFinite);
    }
    Ok(McEstimate { mean, stderr: (var / n).sqrt(), n_paths: cfg.n_paths })
}

/// Monte Carlo profile of `phi(s) = (xi''(s)/2)(E u_x^2(s, X_s) - s)` from the
/// first atom to 1, with per-path tail integrals `int_s^1 phi`.
#[derive(Debug, Clone)]
pub struct McProfile {
    pub times: Vec<f64>,
    pub mean_ux2: Vec<f64>,
    pub ux2_stderr: Vec<f64>,
    pub mean_uxx2: Vec<f64>,
    /// `int_{times[i]}^1 phi(s) ds`.
    pub tail: Vec<f64>,
    pub tail_stderr: Vec<f64>,
}

pub fn em_profile(sol: &ParisiSolution, cfg: &SdeConfig) -> Result<McProfile, SdeError> {
    cfg.validate()?;
    let plan = Plan::new(sol, 1.0, cfg)?;
    let model = sol.model();
    let beta = sol.point().beta;
    let nodes = plan.nodes.clone();
    let nn = nodes.len();
    let half_xi2: Vec<f64> = nodes.iter().map(|s| 0.5 * model.xi(beta, *s).d2).collect();
    // (u_x, u_xx) at each node: the table of the step starting there, or the
    // closed form once past the last atom
    let q_last = sol.measure().max_support();
    let h = sol.point().h;
    let mut node_tables: Vec<Option<DriftTable>> = vec![None; nn];
    let missing: Vec<usize> = (0..nn)
        .filter(|&i| nodes[i] < q_last && plan.steps.get(2 * i).and_then(|st| st.table).is_none())
        .collect();
    let v1 = model.xi(beta, 1.0).d1;
    let w = 8.0 * v1.sqrt() + v1 + 5.0;
    if !missing.is_empty() {
        let tab = TabulatedSolution::new(sol, h.abs() + w + 12.0 * v1.sqrt() + 2.0, 0.01);
        for &i in &missing {
            node_tables[i] = Some(DriftTable::build(&tab, nodes[i], h - w, h + w, 0.05)?);
        }
    }
    let node_eval = |i: usize, x: f64| -> (f64, f64) {
        if let Some(t) = &node_tables[i] {
            return t.both(x);
        }
        match plan.steps.get(2 * i).and_then(|st| st.table) {
            Some(k) => plan.tables[k].both(x),
            None => {
                let th = x.tanh();
                (th, 1.0 - th * th)
            }
        }
    };
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);
    let parts: Vec<[Vec<f64>; 5]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<_, SdeError> {
            let mut m = vec![0.0; nn];
            let mut mq = vec![0.0; nn];
            let mut m2 = vec![0.0; nn];
            let mut s = vec![0.0; nn];
            let mut s2 = vec![0.0; nn];
            let (mut fine, mut coarse) = (Vec::new(), Vec::new());
            let mut sample = vec![0.0; nn];
            let mut tail = vec![0.0; nn];
            for p in c * CHUNK..((c + 1) * CHUNK).min(cfg.n_paths) {
                let mut rng = path_rng(cfg.seed, p);
                plan.path(&mut rng, &mut fine, &mut coarse)?;
                for i in 0..nn {
                    let (af, bf) = node_eval(i, fine[i]);
                    let (ac, bc) = node_eval(i, coarse[i]);
                    let (vf, vc) = (af * af, ac * ac);
                    sample[i] = if cfg.richardson { 2.0 * vf - vc } else { vf };
                    m[i] += sample[i];
                    mq[i] += sample[i] * sample[i];
                    m2[i] += if cfg.richardson { 2.0 * bf * bf - bc * bc } else { bf * bf };
                }
                tail[nn - 1] = 0.0;
                for i in (0..nn - 1).rev() {
                    let a = half_xi2[i] * (sample[i] - nodes[i]);
                    let b = half_xi2[i + 1] * (sample[i + 1] - nodes[i + 1]);
                    tail[i] = tail[i + 1] + 0.5 * (nodes[i + 1] - nodes[i]) * (a + b);
                }
                for i in 0..nn {
                    s[i] += tail[i];
                    s2[i] += tail[i] * tail[i];
                }
            }
            Ok([m, mq, m2, s, s2])
        })
        .collect::<Result<_, _>>()?;
    let n = cfg.n_paths as f64;
    let mut mean_ux2 = vec![0.0; nn];
    let mut sq_ux2 = vec![0.0; nn];
    let mut mean_uxx2 = vec![0.0; nn];
    let mut ts = vec![0.0; nn];
    let mut ts2 = vec![0.0; nn];
    for [m, mq, m2, s, s2] in &parts {
        for i in 0..nn {
            mean_ux2[i] += m[i];
            sq_ux2[i] += mq[i];
            mean_uxx2[i] += m2[i];
            ts[i] += s[i];
            ts2[i] += s2[i];
        }
    }
    let mut tail = vec![0.0; nn];
    let mut tail_stderr = vec![0.0; nn];
    let mut ux2_stderr = vec![0.0; nn];
    for i in 0..nn {
        mean_ux2[i] /= n;
        ux2_stderr[i] = (((sq_ux2[i] / n - mean_ux2[i] * mean_ux2[i]) * n / (n - 1.0)).max(0.0) / n).sqrt();
        mean_uxx2[i] /= n;
        let mu = ts[i] / n;
        tail[i] = mu;
        tail_stderr[i] = (((ts2[i] / n - mu * mu) * n / (n - 1.0)).max(0.0) / n).sqrt();
    }
    if tail.iter().chain(&mean_ux2).any(|v| !v.is_finite()) {
        return Err(SdeError::NonFinite);
    }
    Ok(McProfile { times: nodes, mean_ux2, ux2_stderr, mean_uxx2, tail, tail_stderr })
}

/// `E_h f(X_t)` by quadrature where available: the free law for
/// `t <= inf supp mu`, the Girsanov mixture for a single atom.
pub fn quadrature_expect<F: Fn(f64, f64) -> f64>(sol: &ParisiSolution, t: f64, f: F) -> Result<f64, SdeError> {
    let measure = sol.measure();
    let cfg = sol.config();
    if t <= measure.min_support() {
        let g = free_law(sol.model(), sol.point(), measure, t)?;
        return Ok(expect1(|x| f(t, x), g, cfg)?);
    }
    if measure.len() == 1 {
        return girsanov_expect(sol.model(), sol.point(), measure.min_support(), t, |x| f(t, x), cfg);
    }
    Err(SdeError::NeedsMonteCarlo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn mixture_and_ratio_forms_agree() {
        let m = Model::sk();
        let p = SystemPoint::new(1.5, 0.6).unwrap();
        for &t in &[0.5, 0.7, 1.0] {
            let a = girsanov_expect(&m, p, 0.4, t, |x| x.tanh().powi(2), &cfg()).unwrap();
            let b = girsanov_expect_ratio(&m, p, 0.4, t, |x| x.tanh().powi(2), &cfg()).unwrap();
            assert!((a - b).abs() < 1e-10, "t={t} {a} {b}");
        }
    }

    #[test]
    fn girsanov_is_free_law_at_the_atom() {
        let m: Model = "4:0.25".parse().unwrap();
        let p = SystemPoint::new(2.0, 0.8).unwrap();
        let a = girsanov_expect(&m, p, 0.5, 0.5, |x| sech(x).powi(4), &cfg()).unwrap();
        let g = Gaussian1::from_var(0.8, m.xi(2.0, 0.5).d1);
        let b = expect1(|x| sech(x).powi(4), g, &cfg()).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn girsanov_weight_has_unit_mean() {
        let p = SystemPoint::new(2.0, 0.7).unwrap();
        let v = girsanov_expect_ratio(&Model::sk(), p, 0.5, 1.0, |_| 1.0, &cfg()).unwrap();
        assert!((v - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ux2_profile_is_nondecreasing() {
        let m: Model = "4:0.25".parse().unwrap();
        let p = SystemPoint::new(2.5, 0.4).unwrap();
        let mut prev = -1.0;
        for i in 0..=40 {
            let s = i as f64 / 40.0;
            let v = delta_moments(&m, p, 0.55, s, &cfg()).unwrap().ux2;
            assert!(v >= prev - 1e-13);
            prev = v;
        }
    }

    #[test]
    fn probability_mass_is_preserved() {
        let p = SystemPoint::new(5.0, 2.0).unwrap();
        let v = girsanov_expect(&Model::sk(), p, 0.9, 1.0, |_| 1.0, &cfg()).unwrap();
        assert!((v - 1.0).abs() < 1e-13);
    }

    #[test]
    fn g_forms_agree_and_vanish_at_fixed_point() {
        let m = Model::sk();
        let p = SystemPoint::new(3.0, 1.0).unwrap();
        let q = crate::atline::at_record(&m, p, &Default::default()).unwrap().q_star;
        let ctx = GFunctionContext::new(&m, p, q, &cfg());
        assert!(ctx.g(q).unwrap().abs() < 1e-10);
        for &y in &[q, 0.5 * (q + 1.0), 1.0] {
            let (a, b) = (ctx.g(y).unwrap(), ctx.g_nested(y).unwrap());
            assert!((a - b).abs() < 1e-10, "y={y} {a} {b}");
        }
        let alpha = crate::atline::alpha_at(&m, p, q, &cfg()).unwrap();
        assert!((ctx.g_prime(q).unwrap() - (alpha - 1.0)).abs() < 1e-12);
        let e = 1e-5;
        let y = 0.5 * (q + 1.0);
        let fd = (ctx.g(y + e).unwrap() - ctx.g(y - e).unwrap()) / (2.0 * e);
        assert!((fd - ctx.g_prime(y).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn ito_identities_hold() {
        let m: Model = "2:0.25,4:0.25".parse().unwrap();
        let p = SystemPoint::new(1.7, 0.5).unwrap();
        for &s in &[0.1, 0.3, 0.45, 0.6, 0.9] {
            let r = ito_audit(&m, p, 0.45, s, &cfg()).unwrap();
            assert!(r.first < 1e-6 && r.second < 1e-6, "s={s} {r:?}");
        }
    }

    #[test]
    fn free_law_requires_no_drift() {
        let mu = DiscreteMeasure::dirac(0.3).unwrap();
        let p = SystemPoint::new(1.0, 0.2).unwrap();
        assert!(free_law(&Model::sk(), p, &mu, 0.2).is_ok());
        assert!(matches!(free_law(&Model::sk(), p, &mu, 0.5), Err(SdeError::NotFree { .. })));
    }

    #[test]
    fn em_matches_quadrature_small() {
        let m = Model::sk();
        let p = SystemPoint::new(1.5, 0.5).unwrap();
        let mu = DiscreteMeasure::dirac(0.4).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &cfg());
        let sde = SdeConfig { n_paths: 20_000, dt: 2e-3, ..Default::default() };
        let mc = em_expect(&sol, 0.9, |x| x.tanh().powi(2), &sde).unwrap();
        let ex = girsanov_expect(&m, p, 0.4, 0.9, |x| x.tanh().powi(2), &cfg()).unwrap();
        assert!((mc.mean - ex).abs() < 4.0 * mc.stderr, "{mc:?} {ex}");
        let again = em_expect(&sol, 0.9, |x| x.tanh().powi(2), &sde).unwrap();
        assert_eq!(mc, again);
    }

    #[test]
    fn em_two_atoms_tracks_quadrature_before_first_atom() {
        let m = Model::sk();
        let p = SystemPoint::new(1.3, 0.3).unwrap();
        let mu = DiscreteMeasure::new(vec![0.3, 0.6], vec![0.5, 1.0]).unwrap();
        let sol = ParisiSolution::new(&m, p, &mu, &cfg());
        let sde = SdeConfig { n_paths: 4_000, dt: 5e-3, ..Default::default() };
        let mc = em_expect(&sol, 0.2, |x| x * x, &sde).unwrap();
        let ex = quadrature_expect(&sol, 0.2, |_, x| x * x).unwrap();
        assert!((mc.mean - ex).abs() < 4.0 * mc.stderr);
        let prof = em_profile(&sol, &sde).unwrap();
        assert!(prof.mean_ux2.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(*prof.tail.last().unwrap(), 0.0);
    }
}
