//! Mixed p-spin covariance functions.
//!
//! A model is a finite mixture `xi0(t) = sum_p beta_p^2 t^p` with every `p >= 2`.
//! At inverse temperature `beta` the covariance is `xi = beta^2 xi0`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty model specification")]
    Empty,
    #[error("malformed term `{0}`, expected `p:coeff`")]
    Malformed(String),
    #[error("exponent {0} is below 2")]
    ExponentTooSmall(u32),
    #[error("duplicate exponent {0}")]
    Duplicate(u32),
    #[error("coefficient {0} is negative or not finite")]
    BadCoefficient(f64),
    #[error("all coefficients are zero")]
    AllZero,
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("h must be non-negative and finite, got {0}")]
    BadField(f64),
}

/// One term `coeff * t^p` of `xi0`. `coeff` is `beta_p^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub p: u32,
    pub coeff: f64,
}

/// The normalized mixture `xi0`, terms sorted by exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    terms: Vec<Term>,
}

/// `xi` and its first three derivatives at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiDerivs {
    pub xi: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// An (inverse temperature, external field) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemPoint {
    pub beta: f64,
    pub h: f64,
}

impl SystemPoint {
    pub fn new(beta: f64, h: f64) -> Result<Self, ModelError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(ModelError::BadBeta(beta));
        }
        if !(h.is_finite() && h >= 0.0) {
            return Err(ModelError::BadField(h));
        }
        Ok(Self { beta, h })
    }
}

impl Model {
    pub fn new(mut terms: Vec<Term>) -> Result<Self, ModelError> {
        if terms.is_empty() {
            return Err(ModelError::Empty);
        }
        terms.sort_by_key(|t| t.p);
        for w in terms.windows(2) {
            if w[0].p == w[1].p {
                return Err(ModelError::Duplicate(w[0].p));
            }
        }
        for t in &terms {
            if t.p < 2 {
                return Err(ModelError::ExponentTooSmall(t.p));
            }
            if !(t.coeff.is_finite() && t.coeff >= 0.0) {
                return Err(ModelError::BadCoefficient(t.coeff));
            }
        }
        if terms.iter().all(|t| t.coeff == 0.0) {
            return Err(ModelError::AllZero);
        }
        terms.retain(|t| t.coeff > 0.0);
        Ok(Self { terms })
    }

    /// Sherrington-Kirkpatrick, `xi0(t) = t^2 / 2`.
    pub fn sk() -> Self {
        Self::new(vec![Term { p: 2, coeff: 0.5 }]).unwrap()
    }

    /// Pure p-spin with `xi0(t) = coeff * t^p`.
    pub fn pure(p: u32, coeff: f64) -> Result<Self, ModelError> {
        Self::new(vec![Term { p, coeff }])
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Coefficient of `t^2`, i.e. `beta_2^2`.
    pub fn quadratic_coeff(&self) -> f64 {
        self.terms.iter().find(|t| t.p == 2).map_or(0.0, |t| t.coeff)
    }

    /// `xi0` and its first three derivatives at `t`.
    pub fn xi0(&self, t: f64) -> XiDerivs {
        let mut out = XiDerivs { xi: 0.0, d1: 0.0, d2: 0.0, d3: 0.0 };
        for &Term { p, coeff } in &self.terms {
            let pf = p as f64;
            let pi = p as i32;
            out.xi += coeff * t.powi(pi);
            out.d1 += coeff * pf * t.powi(pi - 1);
            out.d2 += coeff * pf * (pf - 1.0) * t.powi(pi - 2);
            if p >= 3 {
                out.d3 += coeff * pf * (pf - 1.0) * (pf - 2.0) * t.powi(pi - 3);
            }
        }
        out
    }

    /// `xi = beta^2 xi0` and derivatives at `t`.
    pub fn xi(&self, beta: f64, t: f64) -> XiDerivs {
        let b2 = beta * beta;
        let x = self.xi0(t);
        XiDerivs { xi: b2 * x.xi, d1: b2 * x.d1, d2: b2 * x.d2, d3: b2 * x.d3 }
    }

    /// `xi0'(t)`, the normalized overlap variance.
    pub fn sigma(&self, t: f64) -> f64 {
        self.xi0(t).d1
    }

    /// The high-temperature threshold `1 / sqrt(xi0''(1))`.
    pub fn beta_star(&self) -> f64 {
        1.0 / self.xi0(1.0).d2.sqrt()
    }

    /// Solve `xi0'(t) = target` for `t` in `[0, 1]` by bisection.
    ///
    /// Returns `None` if the target lies outside `[xi0'(0), xi0'(1)]`.
    pub fn sigma_inverse(&self, target: f64) -> Option<f64> {
        let (lo_v, hi_v) = (self.sigma(0.0), self.sigma(1.0));
        if !(lo_v..=hi_v).contains(&target) {
            return None;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.sigma(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.max(1e-300) {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

impl FromStr for Model {
    type Err = ModelError;

    /// Parses `p:coeff[,p:coeff]*`, e.g. `2:0.5` for SK.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut terms = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let (p, c) = part
                .split_once(':')
                .ok_or_else(|| ModelError::Malformed(part.to_string()))?;
            let p: u32 = p
                .trim()
                .parse()
                .map_err(|_| ModelError::Malformed(part.to_string()))?;
            let coeff: f64 = c
                .trim()
                .parse()
                .map_err(|_| ModelError::Malformed(part.to_string()))?;
            terms.push(Term { p, coeff });
        }
        Self::new(terms)
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}:{}", t.p, t.coeff)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sk_and_mixtures() {
        let m: Model = "2:0.5".parse().unwrap();
        assert_eq!(m, Model::sk());
        let m: Model = "4:0.25, 2:0.25".parse().unwrap();
        assert_eq!(m.terms()[0].p, 2);
        assert_eq!(m.to_string(), "2:0.25,4:0.25");
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!("".parse::<Model>(), Err(ModelError::Empty));
        assert_eq!("1:0.5".parse::<Model>(), Err(ModelError::ExponentTooSmall(1)));
        assert_eq!("2:0.5,2:0.1".parse::<Model>(), Err(ModelError::Duplicate(2)));
        assert_eq!("2:-1".parse::<Model>(), Err(ModelError::BadCoefficient(-1.0)));
        assert_eq!("2:0,3:0".parse::<Model>(), Err(ModelError::AllZero));
        assert!(matches!("2-0.5".parse::<Model>(), Err(ModelError::Malformed(_))));
        assert!(SystemPoint::new(0.0, 0.1).is_err());
        assert!(SystemPoint::new(1.0, -0.1).is_err());
    }

    #[test]
    fn sk_derivatives() {
        let m = Model::sk();
        let x = m.xi(2.0, 0.5);
        assert!((x.xi - 0.5).abs() < 1e-15);
        assert!((x.d1 - 2.0).abs() < 1e-15);
        assert!((x.d2 - 4.0).abs() < 1e-15);
        assert_eq!(x.d3, 0.0);
        assert!((m.beta_star() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_spin_threshold() {
        let m: Model = "4:0.25".parse().unwrap();
        assert!((m.beta_star() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        let t = m.sigma_inverse(0.3).unwrap();
        assert!((m.sigma(t) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_differences() {
        let m: Model = "2:0.3,3:0.2,5:0.1".parse().unwrap();
        for &t in &[0.1, 0.4, 0.9] {
            let e = 1e-5;
            let x = m.xi0(t);
            let (a, b) = (m.xi0(t + e), m.xi0(t - e));
            assert!(((a.xi - b.xi) / (2.0 * e) - x.d1).abs() < 1e-9);
            assert!(((a.d1 - b.d1) / (2.0 * e) - x.d2).abs() < 1e-9);
            assert!(((a.d2 - b.d2) / (2.0 * e) - x.d3).abs() < 1e-8);
        }
    }
}
