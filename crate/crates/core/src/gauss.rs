//! Gaussian expectations by quadrature.
//!
//! Narrow Gaussians use a Gauss-Hermite rule. Once the standard deviation
//! exceeds `gh_max_std` the integrand is no longer well resolved by a fixed
//! polynomial rule (sech-type kernels have poles at distance `pi/2` from the real
//! axis), so wider Gaussians switch to the trapezoid rule in the standardized
//! variable with a step that resolves both the bell and the integrand. For
//! analytic integrands the trapezoid rule converges geometrically in the step.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussError {
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFinite(f64),
    #[error("covariance matrix is not positive semi-definite (eigenvalue {0})")]
    NotPsd(f64),
    #[error("invalid Gaussian parameters: {0}")]
    BadParams(&'static str),
    #[error("inner expectation in the denominator is not positive")]
    NonPositiveDenominator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Gauss-Hermite order used for `std <= gh_max_std`.
    pub nodes_1d: usize,
    /// Truncation of the standardized variable, `|z| <= truncation`.
    pub truncation: f64,
    /// Target spacing of trapezoid nodes in the original variable.
    pub x_step: f64,
    /// Largest standard deviation handled by the Gauss-Hermite rule.
    pub gh_max_std: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { nodes_1d: 101, truncation: 12.0, x_step: 0.2, gh_max_std: 0.5 }
    }
}

impl QuadratureConfig {
    /// Lighter rules for inner loops of optimizers; about 1e-10 on the
    /// library's integrands.
    pub fn coarse() -> Self {
        Self { nodes_1d: 40, truncation: 10.0, x_step: 0.35, gh_max_std: 0.5 }
    }

    /// Twice as many nodes in every rule.
    pub fn refined(&self) -> Self {
        Self { nodes_1d: 2 * self.nodes_1d, x_step: 0.5 * self.x_step, ..*self }
    }

    pub fn validate(&self) -> Result<(), GaussError> {
        if self.nodes_1d < 8 {
            return Err(GaussError::BadParams("nodes_1d must be at least 8"));
        }
        if !(self.truncation >= 6.0 && self.truncation.is_finite()) {
            return Err(GaussError::BadParams("truncation must be at least 6"));
        }
        if !(self.x_step > 0.0 && self.x_step <= 1.0) {
            return Err(GaussError::BadParams("x_step must lie in (0, 1]"));
        }
        if !(self.gh_max_std >= 0.0) {
            return Err(GaussError::BadParams("gh_max_std must be non-negative"));
        }
        Ok(())
    }
}

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`. Weights sum to one.
#[derive(Debug, Clone)]
pub struct Rule {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1 {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian1 {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub fn from_var(mean: f64, var: f64) -> Self {
        Self { mean, std: var.max(0.0).sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// Eigen-decomposition of a symmetric 2x2 matrix, largest eigenvalue first.
/// Eigenvectors are unit length.
pub fn sym_eigen2(m: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let (a, b, c) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = mid + rad;
    let det = a * c - b * b;
    let l2 = if l1.abs() > 0.0 && mid > 0.0 { det / l1 } else { mid - rad };
    let v1 = if b != 0.0 {
        // pick the better conditioned of the two equivalent forms
        let (x1, y1) = (l1 - c, b);
        let (x2, y2) = (b, l1 - a);
        let (x, y) = if x1 * x1 + y1 * y1 >= x2 * x2 + y2 * y2 { (x1, y1) } else { (x2, y2) };
        let n = x.hypot(y);
        [x / n, y / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}

fn rule_cache() -> &'static Mutex<HashMap<(u8, u64, u64), Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u8, u64, u64), Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Gauss-Hermite rule of order `n` for the standard normal.
pub fn gauss_hermite(n: usize) -> Arc<Rule> {
    let key = (0u8, n as u64, 0u64);
    if let Some(r) = rule_cache().lock().unwrap().get(&key) {
        return r.clone();
    }
    let r = Arc::new(build_gauss_hermite(n));
    rule_cache().lock().unwrap().insert(key, r.clone());
    r
}

/// Trapezoid rule with nodes `j * dz`, `|j * dz| <= truncation`, `dz = 0.4 / m`.
pub fn trapezoid(m: usize, truncation: f64) -> Arc<Rule> {
    let key = (1u8, m as u64, truncation.to_bits());
    if let Some(r) = rule_cache().lock().unwrap().get(&key) {
        return r.clone();
    }
    let dz = 0.4 / m as f64;
    let n = (truncation / dz).floor() as i64;
    let mut z = Vec::with_capacity(2 * n as usize + 1);
    let mut w = Vec::with_capacity(2 * n as usize + 1);
    for j in -n..=n {
        let x = j as f64 * dz;
        z.push(x);
        w.push((-0.5 * x * x).exp());
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let r = Arc::new(Rule { z, w });
    rule_cache().lock().unwrap().insert(key, r.clone());
    r
}

/// The rule used for a Gaussian with standard deviation `std`.
pub fn rule_for(std: f64, cfg: &QuadratureConfig) -> Arc<Rule> {
    if std <= cfg.gh_max_std {
        gauss_hermite(cfg.nodes_1d)
    } else {
        let m = (0.4 * std / cfg.x_step).ceil().max(1.0) as usize;
        trapezoid(m, cfg.truncation)
    }
}

// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
// probabilists' Hermite polynomials (zero diagonal, off-diagonal sqrt(k)),
// weights the squared first components of the unit eigenvectors. Implicit QL
// with Wilkinson shifts, carrying only the first row of the eigenvector matrix.
fn build_gauss_hermite(n: usize) -> Rule {
    let mut d = vec![0.0_f64; n];
    let mut e: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).chain(std::iter::once(0.0)).collect();
    let mut z0 = vec![0.0; n];
    z0[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 200, "QL iteration did not converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let t = z0[i + 1];
                z0[i + 1] = s * z0[i] + c * t;
                z0[i] = c * z0[i] - s * t;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut pairs: Vec<(f64, f64)> = d.into_iter().zip(z0.into_iter().map(|v| v * v)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove round-off asymmetry
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let tot: f64 = pairs.iter().map(|p| p.1).sum();
    Rule { z: pairs.iter().map(|p| p.0).collect(), w: pairs.iter().map(|p| p.1 / tot).collect() }
}

/// `E f(X)` for `X ~ g`. A zero standard deviation evaluates `f(mean)`.
pub fn expect1<F: Fn(f64) -> f64>(f: F, g: Gaussian1, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    if !(g.mean.is_finite() && g.std.is_finite() && g.std >= 0.0) {
        return Err(GaussError::BadParams("mean and std must be finite, std >= 0"));
    }
    if g.std == 0.0 {
        let v = f(g.mean);
        return if v.is_finite() { Ok(v) } else { Err(GaussError::NonFinite(g.mean)) };
    }
    let r = rule_for(g.std, cfg);
    let mut acc = 0.0;
    for (z, w) in r.z.iter().zip(&r.w) {
        let x = g.mean + g.std * z;
        let v = f(x);
        if !v.is_finite() {
            return Err(GaussError::NonFinite(x));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `E f(X)` for a bivariate Gaussian, integrating along the eigenvectors of the
/// covariance. Rank-deficient covariances reduce to a one-dimensional rule.
pub fn expect2<F: Fn(f64, f64) -> f64>(f: F, g: Gaussian2, cfg: &QuadratureConfig) -> Result<f64, GaussError> {
    let c = g.cov;
    if !c.iter().flatten().chain(g.mean.iter()).all(|v| v.is_finite()) {
        return Err(GaussError::BadParams("mean and covariance must be finite"));
    }
    let (lam, vec) = sym_eigen2(c);
    let scale = lam[0].abs().max(1e-300);
    if lam[1] < -1e-12 * scale || lam[0] < 0.0 {
        return Err(GaussError::NotPsd(lam[1].min(lam[0])));
    }
    let s1 = lam[0].max(0.0).sqrt();
    let s2 = if lam[1] <= 1e-14 * scale { 0.0 } else { lam[1].sqrt() };
    let [m0, m1] = g.mean;
    let [e1, e2] = vec;
    let eval = |x: f64, y: f64| -> Result<f64, GaussError> {
        let v = f(x, y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GaussError::NonFinite(x))
        }
    };
    if s1 == 0.0 {
        return eval(m0, m1);
    }
    let r1 = rule_for(s1, cfg);
    if s2 == 0.0 {
        let mut acc = 0.0;
        for (z, w) in r1.z.iter().zip(&r1.w) {
            acc += w * eval(m0 + s1 * z * e1[0], m1 + s1 * z * e1[1])?;
        }
        return Ok(acc);
    }
    let r2 = rule_for(s2, cfg);
    let mut acc = 0.0;
    for (z1, w1) in r1.z.iter().zip(&r1.w) {
        let (bx, by) = (m0 + s1 * z1 * e1[0], m1 + s1 * z1 * e1[1]);
        let mut inner = 0.0;
        for (z2, w2) in r2.z.iter().zip(&r2.w) {
            inner += w2 * eval(bx + s2 * z2 * e2[0], by + s2 * z2 * e2[1])?;
        }
        acc += w1 * inner;
    }
    Ok(acc)
}

/// `E_Y F(E' a(Y'), E' b(Y'))` with `Y ~ outer` and `Y' = Y + inner_std Z'`.
pub fn nested_expect<A, B, F>(
    combine: F,
    a: A,
    b: B,
    outer: Gaussian1,
    inner_std: f64,
    cfg: &QuadratureConfig,
) -> Result<f64, GaussError>
where
    A: Fn(f64) -> f64,
    B: Fn(f64) -> f64,
    F: Fn(f64, f64) -> f64,
{
    if !(inner_std.is_finite() && inner_std >= 0.0) {
        return Err(GaussError::BadParams("inner std must be finite and non-negative"));
    }
    let inner = rule_for(inner_std, cfg);
    expect1(
        |y| {
            let (mut sa, mut sb) = (0.0, 0.0);
            if inner_std == 0.0 {
                sa = a(y);
                sb = b(y);
            } else {
                for (z, w) in inner.z.iter().zip(&inner.w) {
                    let x = y + inner_std * z;
                    sa += w * a(x);
                    sb += w * b(x);
                }
            }
            combine(sa, sb)
        },
        outer,
        cfg,
    )
}

/// `E_Y [E' num(Y') / E' den(Y')]`, failing if a denominator is not positive.
pub fn nested_ratio<N, D>(
    num: N,
    den: D,
    outer: Gaussian1,
    inner_std: f64,
    cfg: &QuadratureConfig,
) -> Result<f64, GaussError>
where
    N: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let bad = std::cell::Cell::new(false);
    let v = nested_expect(
        |n, d| {
            if d > 0.0 {
                n / d
            } else {
                bad.set(true);
                0.0
            }
        },
        num,
        den,
        outer,
        inner_std,
        cfg,
    )?;
    if bad.get() {
        return Err(GaussError::NonPositiveDenominator);
    }
    Ok(v)
}

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sech(x: f64) -> f64 {
        1.0 / x.cosh()
    }

    #[test]
    fn hermite_rule_integrates_polynomials() {
        let r = gauss_hermite(101);
        // E Z^(2k) = (2k-1)!!
        let mut df = 1.0;
        for k in 1..=20 {
            df *= (2 * k - 1) as f64;
            let m: f64 = r.z.iter().zip(&r.w).map(|(z, w)| w * z.powi(2 * k)).sum();
            assert!((m / df - 1.0).abs() < 1e-11, "k={k} {m} {df}");
        }
        let odd: f64 = r.z.iter().zip(&r.w).map(|(z, w)| w * z.powi(7)).sum();
        assert!(odd.abs() < 1e-12);
    }

    #[test]
    fn small_rules_are_exact_for_low_degree() {
        for n in [8, 20, 40, 202] {
            let r = gauss_hermite(n);
            let m4: f64 = r.z.iter().zip(&r.w).map(|(z, w)| w * z.powi(4)).sum();
            assert!((m4 - 3.0).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn known_expectations() {
        let cfg = QuadratureConfig::default();
        // E cosh(a + sZ) = cosh(a) exp(s^2/2)
        for &s in &[0.1, 0.5, 1.0, 3.0] {
            let v = expect1(|x| x.cosh(), Gaussian1::new(0.3, s), &cfg).unwrap();
            let e = 0.3f64.cosh() * (0.5 * s * s).exp();
            assert!((v / e - 1.0).abs() < 1e-12, "s={s} {v} {e}");
        }
        // E (X^2) = mean^2 + var
        let v = expect1(|x| x * x, Gaussian1::new(1.5, 40.0), &cfg).unwrap();
        assert!((v / (2.25 + 1600.0) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn doubling_is_stable_for_sech_kernels() {
        let cfg = QuadratureConfig::default();
        let fine = cfg.refined();
        for &s in &[0.05, 0.3, 0.7, 1.0, 2.0, 5.0, 20.0, 100.0] {
            for &m in &[0.0, 0.4, 3.0] {
                let g = Gaussian1::new(m, s);
                let f = |x: f64| sech(x).powi(4);
                let a = expect1(f, g, &cfg).unwrap();
                let b = expect1(f, g, &fine).unwrap();
                assert!((a - b).abs() < 1e-10, "s={s} m={m} {a} {b}");
                let f = crate::special::log_cosh;
                let a = expect1(f, g, &cfg).unwrap();
                let b = expect1(f, g, &fine).unwrap();
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "s={s} m={m}");
            }
        }
    }

    #[test]
    fn degenerate_gaussian_is_point_mass() {
        let cfg = QuadratureConfig::default();
        let v = expect1(|x| x.tanh(), Gaussian1::new(0.7, 0.0), &cfg).unwrap();
        assert_eq!(v, 0.7f64.tanh());
        let g = Gaussian2 { mean: [0.2, -0.1], cov: [[1.0, 1.0], [1.0, 1.0]] };
        let a = expect2(|x, y| (x + y).tanh().powi(2), g, &cfg).unwrap();
        let b = expect1(|u| u.tanh().powi(2), Gaussian1::new(0.1, 2.0), &cfg).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn nonfinite_and_bad_covariance_are_reported() {
        let cfg = QuadratureConfig::default();
        let e = expect1(|x| 1.0 / x, Gaussian1::new(0.0, 0.0), &cfg);
        assert!(matches!(e, Err(GaussError::NonFinite(_))));
        let g = Gaussian2 { mean: [0.0, 0.0], cov: [[1.0, 2.0], [2.0, 1.0]] };
        assert!(matches!(expect2(|_, _| 1.0, g, &cfg), Err(GaussError::NotPsd(_))));
    }

    #[test]
    fn expect2_covariance_moments() {
        let cfg = QuadratureConfig::default();
        let g = Gaussian2 { mean: [0.5, -1.0], cov: [[2.0, 0.7], [0.7, 0.5]] };
        let exy = expect2(|x, y| x * y, g, &cfg).unwrap();
        assert!((exy - (0.7 - 0.5)).abs() < 1e-12);
        let exx = expect2(|x, _| x * x, g, &cfg).unwrap();
        assert!((exx - 2.25).abs() < 1e-12);
    }

    #[test]
    fn nested_ratio_matches_closed_form() {
        // E'cosh(Y') = cosh(Y) e^{r^2/2}, E'sinh(Y') = sinh(Y) e^{r^2/2}
        let cfg = QuadratureConfig::default();
        let v = nested_ratio(|x| x.sinh(), |x| x.cosh(), Gaussian1::new(0.4, 0.8), 1.3, &cfg).unwrap();
        let e = expect1(|y| y.tanh(), Gaussian1::new(0.4, 0.8), &cfg).unwrap();
        assert!((v - e).abs() < 1e-12);
    }

    #[test]
    fn eigen2_reconstructs() {
        let m = [[3.0, 1.2], [1.2, 0.4]];
        let (l, v) = sym_eigen2(m);
        for i in 0..2 {
            for j in 0..2 {
                let r = l[0] * v[0][i] * v[0][j] + l[1] * v[1][i] * v[1][j];
                assert!((r - m[i][j]).abs() < 1e-14);
            }
        }
    }
}
