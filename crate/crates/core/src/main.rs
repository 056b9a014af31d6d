use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use parisi::atline::{at_record, level_set, qlim_inequality, two_thirds, two_thirds_boundary, AtlineOptions, LevelSetOptions};
use parisi::descent::{em_expect, quadrature_expect, SdeConfig};
use parisi::dispersive::{run_suite, Suite, SuiteOptions};
use parisi::gauss::QuadratureConfig;
use parisi::model::{Model, SystemPoint};
use parisi::pde::{solve_fd_refined, DiscreteMeasure, FdGrid, ParisiSolution};
use parisi::scan::{fmt_sig, run_scan, write_csv, write_deep_csv, Axis, Outer, ScanSpec};
use parisi::variational::{certify, classify, minimize_k, parisi_value, ClassifyOptions, MinimizeOptions, Phase};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "parisi", version, about = "Parisi functional, AT line and phase diagrams for mixed p-spin models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// `sk`, `4spin`, or terms `p:beta_p^2,...` (SK is `2:0.5`)
    #[arg(long, default_value = "sk", value_parser = parse_model)]
    model: Model,
}

#[derive(Args, Clone)]
struct PointArg {
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    h: f64,
}

impl PointArg {
    fn point(&self) -> Result<SystemPoint, Failure> {
        SystemPoint::new(self.beta, self.h).map_err(|e| Failure::usage(e.to_string()))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the Parisi PDE for a discrete measure and report u(0, h)
    PdeSolve {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        point: PointArg,
        /// `q1:m1,q2:m2,...` with m_i the cdf at q_i
        #[arg(long)]
        measure: DiscreteMeasure,
        /// Also run the finite-difference solver and report the gap
        #[arg(long)]
        fd: bool,
    },
    /// E f(X_t) for the optimal-control SDE
    SdeExpect {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        point: PointArg,
        #[arg(long)]
        measure: DiscreteMeasure,
        #[arg(long)]
        t: f64,
        #[arg(long, value_enum, default_value_t = Observable::Sech4)]
        f: Observable,
        #[arg(long, value_enum, default_value_t = SdeMethod::Both)]
        method: SdeMethod,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0x5eed_2024)]
        seed: u64,
    },
    /// Minimize over k-atomic measures, certify, report the phase
    Classify {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        point: PointArg,
        #[arg(long, default_value_t = 3)]
        max_k: usize,
    },
    /// Best k-atomic measure
    Minimize {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        point: PointArg,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        certify: bool,
    },
    /// q_*, alpha and in_AT at a point, or the AT line alpha = 1 over --betas
    AtLine {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, conflicts_with = "betas", requires = "h")]
        beta: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, value_parser = parse_axis)]
        betas: Option<Axis>,
    },
    /// Points with alpha(beta, h) = alpha over --betas
    LevelSet {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_parser = parse_axis)]
        betas: Axis,
    },
    /// Two-thirds sufficient condition at a point, or its boundary over --betas
    TwoThirds {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, conflicts_with = "betas", requires = "h")]
        beta: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, value_parser = parse_axis)]
        betas: Option<Axis>,
    },
    /// Dispersive, spectral, sign and RS-region checks
    VerifyDispersive {
        #[command(flatten)]
        model: ModelArg,
        /// Run only one suite (default: all)
        #[arg(long, value_parser = parse_suite)]
        suite: Option<Suite>,
        /// Level set(s) alpha = value for the 2-d, spectral and longtime suites
        #[arg(long, value_delimiter = ',')]
        level_alpha: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_axis)]
        betas: Option<Axis>,
        /// Write scenario,lhs,rhs,slack here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Phase diagram over a (T, h) or (beta, h) grid
    PhaseScan {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long = "T", value_parser = parse_axis, conflicts_with = "beta", required_unless_present = "beta")]
        temperature: Option<Axis>,
        #[arg(long, value_parser = parse_axis)]
        beta: Option<Axis>,
        #[arg(long, value_parser = parse_axis)]
        h: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
        /// For alpha > 1 rows, also find a two-atom measure beating every one-atom one
        #[arg(long)]
        deep: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 3)]
        max_k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Observable {
    X,
    X2,
    Tanh2,
    Sech2,
    Sech4,
    Logcosh,
}

impl Observable {
    fn eval(self, x: f64) -> f64 {
        match self {
            Observable::X => x,
            Observable::X2 => x * x,
            Observable::Tanh2 => x.tanh().powi(2),
            Observable::Sech2 => x.cosh().recip().powi(2),
            Observable::Sech4 => x.cosh().recip().powi(4),
            Observable::Logcosh => x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SdeMethod {
    Quadrature,
    Em,
    Both,
}

fn parse_model(s: &str) -> Result<Model, String> {
    match s.to_ascii_lowercase().as_str() {
        "sk" => Ok(Model::sk()),
        "4spin" | "4-spin" => Model::pure(4, 0.25).map_err(|e| e.to_string()),
        _ => s.parse().map_err(|e: parisi::model::ModelError| e.to_string()),
    }
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: parisi::scan::ScanError| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|_| format!("unknown suite `{s}`; expected one of 1d, 2d, spectral, sign, longtime, rs"))
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }

    fn numerical(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_NUMERICAL, msg: e.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pde_solve(model: &Model, p: SystemPoint, measure: &DiscreteMeasure, fd: bool) -> CmdResult {
    let cfg = QuadratureConfig::default();
    let sol = ParisiSolution::new(model, p, measure, &cfg);
    let u = sol.value_at_origin().map_err(Failure::numerical)?;
    let v = parisi_value(model, p, measure, &cfg).map_err(Failure::numerical)?;
    println!("u(0,h) = {}", fmt_sig(u));
    println!("P(mu) = {}", fmt_sig(v.value));
    if fd {
        let f = solve_fd_refined(model, p, measure, FdGrid::default(), 1e-7, 2).map_err(Failure::numerical)?;
        println!("u(0,h) finite differences = {}", fmt_sig(f.value));
        println!("|closed form - fd| = {}", fmt_sig((u - f.value).abs()));
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn sde_expect(model: &Model, p: SystemPoint, measure: &DiscreteMeasure, t: f64, f: Observable, method: SdeMethod, sde: SdeConfig) -> CmdResult {
    if !(0.0..=1.0).contains(&t) {
        return Err(Failure::usage("--t must lie in [0, 1]"));
    }
    let sol = ParisiSolution::new(model, p, measure, &QuadratureConfig::default());
    let mut quad = None;
    if method != SdeMethod::Em {
        match quadrature_expect(&sol, t, |_, x| f.eval(x)) {
            Ok(v) => {
                println!("quadrature = {}", fmt_sig(v));
                quad = Some(v);
            }
            Err(e) if method == SdeMethod::Both => println!("quadrature unavailable: {e}"),
            Err(e) => return Err(Failure::numerical(e)),
        }
    }
    if method != SdeMethod::Quadrature {
        let mc = em_expect(&sol, t, |x| f.eval(x), &sde).map_err(Failure::numerical)?;
        println!("euler-maruyama = {} +- {} ({} paths)", fmt_sig(mc.mean), fmt_sig(mc.stderr), mc.n_paths);
        if let Some(q) = quad {
            println!("z = {}", fmt_sig((mc.mean - q) / mc.stderr.max(f64::MIN_POSITIVE)));
        }
    }
    Ok(0)
}

fn classify_cmd(model: &Model, p: SystemPoint, max_k: usize) -> CmdResult {
    let opts = ClassifyOptions { max_k, ..ClassifyOptions::default() };
    let rec = at_record(model, p, &AtlineOptions::default()).map_err(Failure::numerical)?;
    let rep = classify(model, p, &opts).map_err(Failure::numerical)?;
    println!("phase = {}", rep.phase);
    println!("measure = {}", rep.measure);
    println!("parisi_value = {}", fmt_sig(rep.value.value));
    println!("certificate_residual = {}", fmt_sig(rep.certificate.residual));
    for (k, v) in &rep.ladder {
        println!("best {k}-atom value = {}", fmt_sig(*v));
    }
    println!("q_star = {}  alpha = {}", fmt_sig(rec.q_star), fmt_sig(rec.alpha));
    for r in &rep.certificate.reasons {
        println!("note: {r}");
    }
    if let Some(n) = &rep.note {
        println!("note: {n}");
    }
    // an RS verdict outside the AT region contradicts the AT condition
    if rep.phase == Phase::Rs && !rec.in_at() {
        eprintln!("violation: RS certified at alpha = {} > 1", rec.alpha);
        return Ok(EXIT_VIOLATION);
    }
    Ok(0)
}

fn minimize_cmd(model: &Model, p: SystemPoint, k: usize, cert: bool) -> CmdResult {
    let cfg = QuadratureConfig::default();
    let m = minimize_k(model, p, k, &cfg, &MinimizeOptions::default(), None).map_err(Failure::numerical)?;
    println!("measure = {}", m.measure);
    println!("parisi_value = {}", fmt_sig(m.value.value));
    println!("converged = {}", m.converged);
    if cert {
        let c = certify(model, p, &m.measure, &Default::default()).map_err(Failure::numerical)?;
        println!("certificate = {:?} residual = {}", c.verdict, fmt_sig(c.residual));
    }
    Ok(0)
}

fn at_line(model: &Model, beta: Option<f64>, h: Option<f64>, betas: Option<Axis>) -> CmdResult {
    match (beta, betas) {
        (Some(b), None) => {
            let p = SystemPoint::new(b, h.unwrap_or(0.0)).map_err(|e| Failure::usage(e.to_string()))?;
            let rec = at_record(model, p, &AtlineOptions::default()).map_err(Failure::numerical)?;
            println!("q_star = {}", fmt_sig(rec.q_star));
            println!("alpha = {}", fmt_sig(rec.alpha));
            println!("in_AT = {}", rec.in_at());
            for (q, a) in &rec.roots {
                println!("root q = {}  alpha(q) = {}", fmt_sig(*q), fmt_sig(*a));
            }
            let ql = qlim_inequality(model, &rec);
            println!("q_star lower-bound inequality: {} <= {} ({})", fmt_sig(ql.lhs), fmt_sig(ql.rhs), if ql.holds() { "holds" } else { "FAILS" });
            Ok(if ql.holds() { 0 } else { EXIT_VIOLATION })
        }
        (None, Some(axis)) => level_cmd(model, 1.0, axis),
        _ => Err(Failure::usage("give either --beta/--h or --betas")),
    }
}

fn level_cmd(model: &Model, alpha: f64, betas: Axis) -> CmdResult {
    let pts = level_set(model, alpha, &betas.values(), &LevelSetOptions::default()).map_err(Failure::numerical)?;
    println!("beta,h,q_star,alpha,branch");
    for p in pts {
        println!("{},{},{},{},{}", fmt_sig(p.beta), fmt_sig(p.h), fmt_sig(p.q_star), fmt_sig(p.alpha), p.branch);
    }
    Ok(0)
}

fn two_thirds_cmd(model: &Model, beta: Option<f64>, h: Option<f64>, betas: Option<Axis>) -> CmdResult {
    match (beta, betas) {
        (Some(b), None) => {
            let p = SystemPoint::new(b, h.unwrap_or(0.0)).map_err(|e| Failure::usage(e.to_string()))?;
            let rec = at_record(model, p, &AtlineOptions::default()).map_err(Failure::numerical)?;
            let t = two_thirds(model, &rec);
            println!("alpha = {}", fmt_sig(t.lhs));
            println!("bound = {}", fmt_sig(t.rhs));
            println!("in_region = {}", t.in_region);
            Ok(0)
        }
        (None, Some(axis)) => {
            let pts = two_thirds_boundary(model, &axis.values(), &LevelSetOptions::default()).map_err(Failure::numerical)?;
            println!("beta,h,q_star,alpha,bound");
            for p in pts {
                println!("{},{},{},{},{}", fmt_sig(p.beta), fmt_sig(p.h), fmt_sig(p.q_star), fmt_sig(p.alpha), fmt_sig(p.rhs));
            }
            Ok(0)
        }
        _ => Err(Failure::usage("give either --beta/--h or --betas")),
    }
}

fn verify(model: &Model, suite: Option<Suite>, alphas: Option<Vec<f64>>, betas: Option<Axis>, csv: &Option<PathBuf>) -> CmdResult {
    let mut opts = SuiteOptions::default();
    if let Some(a) = alphas {
        if a.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(Failure::usage("--level-alpha values must lie in (0, 1)"));
        }
        opts.alphas = a;
    }
    if let Some(b) = betas {
        opts.betas = b.values();
    }
    let suites: Vec<Suite> = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let mut table = String::from("suite,scenario,check,lhs,rhs,slack,status\n");
    let mut failed = 0usize;
    let mut total = 0usize;
    for s in suites {
        let rows = run_suite(model, s, &opts).map_err(Failure::numerical)?;
        for r in rows {
            total += 1;
            if !r.check.holds() {
                failed += 1;
            }
            println!("{:<9} {:<45} {}", r.suite.to_string(), r.scenario, r.check);
            let status = if !r.check.applicable {
                "n/a"
            } else if r.check.holds() {
                "pass"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{}",
                r.suite,
                r.scenario,
                r.check.name,
                fmt_sig(r.check.lhs),
                fmt_sig(r.check.rhs),
                fmt_sig(r.check.slack()),
                status
            );
        }
    }
    println!("{} checks, {} failed", total, failed);
    if let Some(path) = csv {
        fs::write(path, table).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(if failed == 0 { 0 } else { EXIT_VIOLATION })
}

#[allow(clippy::too_many_arguments)]
fn phase_scan(
    model: Model,
    temperature: Option<Axis>,
    beta: Option<Axis>,
    h: Axis,
    out: &Option<PathBuf>,
    deep: bool,
    workers: Option<usize>,
    max_k: usize,
) -> CmdResult {
    let outer = match (temperature, beta) {
        (Some(t), None) if t.min > 0.0 => Outer::Temperature(t),
        (Some(_), None) => return Err(Failure::usage("--T must be positive")),
        (None, Some(b)) if b.min > 0.0 => Outer::Beta(b),
        (None, Some(_)) => return Err(Failure::usage("--beta must be positive")),
        _ => return Err(Failure::usage("give exactly one of --T and --beta")),
    };
    if h.min < 0.0 {
        return Err(Failure::usage("--h must be non-negative"));
    }
    if workers == Some(0) || max_k == 0 {
        return Err(Failure::usage("--workers and --max-k must be positive"));
    }
    let mut spec = ScanSpec::new(model, outer, h);
    spec.deep = deep;
    spec.workers = workers;
    spec.classify.max_k = max_k;
    let rows = run_scan(&spec).map_err(Failure::numerical)?;
    for r in &rows {
        if let Some(why) = &r.reason {
            eprintln!("T={} h={} {}: {why}", fmt_sig(r.t), fmt_sig(r.h), r.phase);
        }
    }
    write_out(out, &write_csv(&rows))?;
    if deep {
        let side = out.as_ref().map(|p| {
            let mut s = p.clone().into_os_string();
            s.push(".deep.csv");
            PathBuf::from(s)
        });
        write_out(&side, &write_deep_csv(&rows))?;
    }
    Ok(0)
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Cmd::PdeSolve { model, point, measure, fd } => pde_solve(&model.model, point.point()?, &measure, fd),
        Cmd::SdeExpect { model, point, measure, t, f, method, paths, dt, seed } => {
            let sde = SdeConfig { dt, n_paths: paths, seed, ..SdeConfig::default() };
            sde.validate().map_err(|e| Failure::usage(e.to_string()))?;
            sde_expect(&model.model, point.point()?, &measure, t, f, method, sde)
        }
        Cmd::Classify { model, point, max_k } => {
            if max_k == 0 {
                return Err(Failure::usage("--max-k must be positive"));
            }
            classify_cmd(&model.model, point.point()?, max_k)
        }
        Cmd::Minimize { model, point, k, certify } => {
            if k == 0 {
                return Err(Failure::usage("--k must be positive"));
            }
            minimize_cmd(&model.model, point.point()?, k, certify)
        }
        Cmd::AtLine { model, beta, h, betas } => at_line(&model.model, beta, h, betas),
        Cmd::LevelSet { model, alpha, betas } => level_cmd(&model.model, alpha, betas),
        Cmd::TwoThirds { model, beta, h, betas } => two_thirds_cmd(&model.model, beta, h, betas),
        Cmd::VerifyDispersive { model, suite, level_alpha, betas, csv } => verify(&model.model, suite, level_alpha, betas, &csv),
        Cmd::PhaseScan { model, temperature, beta, h, out, deep, workers, max_k } => {
            phase_scan(model.model, temperature, beta, h, &out, deep, workers, max_k)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
