//! Phase diagram scans over a `(T, h)` or `(beta, h)` grid.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::atline::{at_record, two_thirds, AtRecord, AtlineOptions};
use crate::gauss::QuadratureConfig;
use crate::model::{Model, SystemPoint};
use crate::variational::{classify, deep_margin, CertifyOptions, ClassifyOptions, FvOptions, Phase};

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("bad axis `{0}`: expected min:max:count")]
    BadAxis(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// `count` evenly spaced values from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self, ScanError> {
        let ok = min.is_finite() && max.is_finite() && count >= 1 && max >= min && (count > 1 || min == max);
        if ok {
            Ok(Self { min, max, count })
        } else {
            Err(ScanError::BadAxis(format!("{min}:{max}:{count}")))
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.count == 1 {
            return self.min;
        }
        if i + 1 == self.count {
            return self.max;
        }
        self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

impl FromStr for Axis {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScanError::BadAxis(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [v] => {
                let v: f64 = v.trim().parse().map_err(|_| bad())?;
                Axis::new(v, v, 1).map_err(|_| bad())
            }
            [a, b, n] => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                let n: usize = n.trim().parse().map_err(|_| bad())?;
                Axis::new(a, b, n).map_err(|_| bad())
            }
            _ => Err(bad()),
        }
    }
}

/// Outer grid coordinate. Temperature axes must stay positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outer {
    Temperature(Axis),
    Beta(Axis),
}

impl Outer {
    fn len(&self) -> usize {
        match self {
            Outer::Temperature(a) | Outer::Beta(a) => a.count,
        }
    }

    /// `(T, beta)` at index `i`.
    fn at(&self, i: usize) -> (f64, f64) {
        match self {
            Outer::Temperature(a) => {
                let t = a.value(i);
                (t, 1.0 / t)
            }
            Outer::Beta(a) => {
                let b = a.value(i);
                (1.0 / b, b)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSpec {
    pub model: Model,
    pub outer: Outer,
    pub h: Axis,
    pub deep: bool,
    pub atline: AtlineOptions,
    pub classify: ClassifyOptions,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl ScanSpec {
    pub fn new(model: Model, outer: Outer, h: Axis) -> Self {
        Self { model, outer, h, deep: false, atline: AtlineOptions::default(), classify: scan_classify_options(), workers: None }
    }

    pub fn len(&self) -> usize {
        self.outer.len() * self.h.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Classification settings used per grid point: coarse rules for both the
/// optimizer and the certificate.
pub fn scan_classify_options() -> ClassifyOptions {
    let quad = QuadratureConfig::coarse();
    ClassifyOptions {
        quad,
        certify: CertifyOptions { fv: FvOptions { quad, ..FvOptions::default() }, ..CertifyOptions::default() },
        ..ClassifyOptions::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowPhase {
    Classified(Phase),
    /// `alpha > 1`: replica symmetry is broken without running the optimizer.
    RsbByAt,
}

impl fmt::Display for RowPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowPhase::Classified(p) => p.fmt(f),
            RowPhase::RsbByAt => f.write_str("RSB_BY_AT"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepRow {
    pub one: f64,
    pub two: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub t: f64,
    pub beta: f64,
    pub h: f64,
    pub q_star: f64,
    pub alpha: f64,
    pub in_at: bool,
    pub two_thirds: bool,
    pub beta_star_region: bool,
    pub phase: RowPhase,
    pub residual: Option<f64>,
    pub value: Option<f64>,
    pub deep: Option<DeepRow>,
    /// Why the point ended up UNDECIDED, if it did.
    pub reason: Option<String>,
}

impl ScanRow {
    fn failed(t: f64, beta: f64, h: f64, reason: String) -> Self {
        ScanRow {
            t,
            beta,
            h,
            q_star: f64::NAN,
            alpha: f64::NAN,
            in_at: false,
            two_thirds: false,
            beta_star_region: false,
            phase: RowPhase::Classified(Phase::Undecided),
            residual: None,
            value: None,
            deep: None,
            reason: Some(reason),
        }
    }
}

pub fn scan_point(spec: &ScanSpec, t: f64, beta: f64, h: f64) -> ScanRow {
    let model = &spec.model;
    let point = match SystemPoint::new(beta, h) {
        Ok(p) => p,
        Err(e) => return ScanRow::failed(t, beta, h, e.to_string()),
    };
    let rec: AtRecord = match at_record(model, point, &spec.atline) {
        Ok(r) => r,
        Err(e) => return ScanRow::failed(t, beta, h, e.to_string()),
    };
    let mut row = ScanRow {
        t,
        beta,
        h,
        q_star: rec.q_star,
        alpha: rec.alpha,
        in_at: rec.in_at(),
        two_thirds: two_thirds(model, &rec).in_region,
        beta_star_region: beta <= model.beta_star(),
        phase: RowPhase::RsbByAt,
        residual: None,
        value: None,
        deep: None,
        reason: None,
    };
    if !row.in_at {
        if spec.deep {
            match deep_margin(model, point, &spec.classify.quad, &spec.classify.minimize) {
                Ok(d) => {
                    row.deep = Some(DeepRow { one: d.one.value.value, two: d.two.value.value, margin: d.margin });
                    row.value = Some(d.two.value.value);
                }
                Err(e) => row.reason = Some(format!("deep: {e}")),
            }
        }
        return row;
    }
    match classify(model, point, &spec.classify) {
        Ok(rep) => {
            row.phase = RowPhase::Classified(rep.phase);
            row.residual = Some(rep.certificate.residual);
            row.value = Some(rep.value.value);
            if rep.phase == Phase::Undecided {
                let mut why = rep.certificate.reasons.join("; ");
                if let Some(n) = rep.note {
                    why = if why.is_empty() { n } else { format!("{why}; {n}") };
                }
                row.reason = Some(if why.is_empty() { "no certified measure".into() } else { why });
            }
        }
        Err(e) => {
            row.phase = RowPhase::Classified(Phase::Undecided);
            row.reason = Some(e.to_string());
        }
    }
    row
}

/// Evaluates every grid point; rows come back in row-major order (outer axis
/// slowest) regardless of the worker count.
pub fn run_scan(spec: &ScanSpec) -> Result<Vec<ScanRow>, ScanError> {
    let n_h = spec.h.count;
    let work = || -> Vec<ScanRow> {
        (0..spec.len())
            .into_par_iter()
            .map(|k| {
                let (t, beta) = spec.outer.at(k / n_h);
                scan_point(spec, t, beta, spec.h.value(k % n_h))
            })
            .collect()
    };
    match spec.workers {
        None => Ok(work()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| ScanError::Pool(e.to_string()))?;
            Ok(pool.install(work))
        }
    }
}

/// `x` with 12 significant digits, plain notation for moderate magnitudes.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", (SIG - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-5..SIG).contains(&exp) {
        let mant = trim_zeros(mant);
        return format!("{mant}e{exp}");
    }
    // re-render from the rounded mantissa so the digits match exactly
    let rounded: f64 = sci.parse().unwrap();
    let decimals = (SIG - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{rounded:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

pub const CSV_HEADER: &str = "T,beta,h,q_star,alpha,in_AT,two_thirds,beta_star_region,phase,certificate_residual,parisi_value";
pub const DEEP_HEADER: &str = "T,beta,h,one_atom_value,two_atom_value,margin";

pub fn write_csv(rows: &[ScanRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 120);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_sig(r.t),
            fmt_sig(r.beta),
            fmt_sig(r.h),
            fmt_sig(r.q_star),
            fmt_sig(r.alpha),
            flag(r.in_at),
            flag(r.two_thirds),
            flag(r.beta_star_region),
            r.phase,
            opt(r.residual),
            opt(r.value)
        );
    }
    s
}

/// Sidecar table for `--deep`: one line per row with a two-atom margin.
pub fn write_deep_csv(rows: &[ScanRow]) -> String {
    let mut s = String::from(DEEP_HEADER);
    s.push('\n');
    for r in rows {
        if let Some(d) = &r.deep {
            let _ = writeln!(s, "{},{},{},{},{},{}", fmt_sig(r.t), fmt_sig(r.beta), fmt_sig(r.h), fmt_sig(d.one), fmt_sig(d.two), fmt_sig(d.margin));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_endpoints() {
        let a: Axis = "0.2:3:100".parse().unwrap();
        assert_eq!(a.value(0), 0.2);
        assert_eq!(a.value(99), 3.0);
        assert_eq!(a.values().len(), 100);
        let one: Axis = "1.5".parse().unwrap();
        assert_eq!(one.values(), vec![1.5]);
        assert!("1:0:5".parse::<Axis>().is_err());
        assert!("1:2".parse::<Axis>().is_err());
        assert!("0:1:1".parse::<Axis>().is_err());
    }

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(-0.0), "0");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_sig(123456.789012345), "123456.789012");
        assert_eq!(fmt_sig(2.0 / 3.0 * 1e-7), "6.66666666667e-8");
        assert_eq!(fmt_sig(0.999_999_999_999_9), "1");
        assert_eq!(fmt_sig(-2.5e13), "-2.5e13");
        assert_eq!(fmt_sig(0.00012), "0.00012");
    }

    #[test]
    fn small_scan_is_ordered_and_consistent() {
        let spec = ScanSpec::new(Model::sk(), Outer::Temperature(Axis::new(0.5, 2.0, 3).unwrap()), Axis::new(0.0, 1.0, 2).unwrap());
        let rows = run_scan(&spec).unwrap();
        assert_eq!(rows.len(), 6);
        let th: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.h)).collect();
        assert_eq!(th, vec![(0.5, 0.0), (0.5, 1.0), (1.25, 0.0), (1.25, 1.0), (2.0, 0.0), (2.0, 1.0)]);
        for r in &rows {
            assert_eq!(r.in_at, r.alpha <= 1.0);
            if !r.in_at {
                assert_eq!(r.phase, RowPhase::RsbByAt);
            }
            if r.two_thirds || r.beta_star_region {
                assert_eq!(r.phase, RowPhase::Classified(Phase::Rs));
            }
        }
        // T = 0.5, h = 0 is below the AT line; T = 2, h = 0 is above it
        assert_eq!(rows[0].phase, RowPhase::RsbByAt);
        assert_eq!(rows[4].phase, RowPhase::Classified(Phase::Rs));
        let csv = write_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }
}
