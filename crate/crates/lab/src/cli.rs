//! Command-line driver.
//!
//! Exit codes: 0 success, 1 a declared tolerance failed, 2 usage or input
//! error, 3 resource or budget exhausted.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use brwlab_core::engine::{prune_policy, simulate, EngineError, SimConfig, DEFAULT_CAP, DEFAULT_K};
use brwlab_core::offspring::{normalize_to_boundary, DEFAULT_BOUNDARY_TOL};
use brwlab_core::oracle::{default_battery, exact_expectation, exact_martingale_gap, EnumerationBudget, OracleError};
use brwlab_core::spine::{importance_replica, ImportanceAccumulator, SpineError, SpineFunctional, SpineSampler};
use brwlab_core::walk::{
    check_estimates, renewal_function, renewal_function_mc, renewal_function_time_dp, EstimateKind, EstimateParams,
    WalkError,
};
use brwlab_core::{check_boundary, derive_step_law, LawError, OffspringLaw, RenewalTable};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::fspec::FSpec;
use crate::harness::{
    exp_additive_upper, exp_liminf_ratio, exp_min_fluctuation, exp_pair_correlation, AdditiveUpperConfig,
    EventMethod, EventScalingConfig, ExperimentResult, HarnessError, LawContext, LiminfRatioConfig, MinFluctConfig,
    Overrides, PairConfig, Tolerance,
};
use crate::lawfile::{load_law, write_law_file, LawFileError};
use crate::output::{CsvSink, Field, RunConfig};
use crate::runner::{fold_replicas_with, map_replicas, with_threads};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "brwlab", version, about = "Branching random walks in the boundary case: simulation and exact checks")]
pub struct Cli {
    /// Worker threads (default: available parallelism). Never changes results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Omit the `# generated-unix` line from CSV outputs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Boundary-case moments and hypotheses of a law.
    Check(CheckArgs),
    /// Forward simulation, one CSV row per (replica, depth).
    Simulate(SimulateArgs),
    /// Renewal function and walk estimates.
    #[command(subcommand)]
    Walk(WalkCommand),
    /// Spine sampling under the truncated measure.
    Spine(SpineArgs),
    /// Exact many-to-one and martingale checks.
    Oracle(OracleArgs),
    /// Desk-scale experiments with declared tolerances.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct LawArg {
    /// Builtin name (ssrw-coupled, two-atom, bernoulli-pm:H) or JSON law file.
    #[arg(long)]
    pub law: String,
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Master seed; falls back to $BRWLAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_TOL)]
    pub tol: f64,
    /// Write the affinely normalized boundary law to this file.
    #[arg(long)]
    pub normalize: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub replicas: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = f64::INFINITY)]
    pub prune_level: f64,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum WalkCommand {
    /// Tabulate R on a grid `lo:hi:step`.
    Renewal(RenewalArgs),
    /// Both sides of a walk estimate.
    Estimates(EstimateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RenewalMethodArg {
    Ladder,
    TimeDp,
    Mc,
}

#[derive(Debug, Args)]
pub struct RenewalArgs {
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long, default_value = "0:50:1")]
    pub grid: String,
    /// Ladder epochs (ladder method) or time steps (others).
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value = "ladder")]
    pub method: RenewalMethodArg,
    #[arg(long, default_value_t = 10_000)]
    pub replicas: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub law: LawArg,
    /// F1, AJ, K1, AS1, AS2, L22 or Eppel.
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value = "10,100,1000", value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long, default_value = "0", value_delimiter = ',')]
    pub x: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub y: f64,
    #[arg(long, default_value_t = 0.5)]
    pub r: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpineArgs {
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Time `n`; taken from the functional for `event:A(n,lambda)`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub replicas: u64,
    /// one, w-alpha, w-ratio or event:A(n,lambda).
    #[arg(long, default_value = "one")]
    pub functional: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k_const: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value = "default")]
    pub battery: String,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    MinFluct,
    AdditiveUpper,
    LiminfRatio,
    PairCorr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EventMethodArg {
    None,
    Exact,
    Mc,
    Importance,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum)]
    pub name: ExperimentName,
    #[command(flatten)]
    pub law: LawArg,
    #[arg(long, default_value = "16,32,64", value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Second time for pair-corr.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k_const: f64,
    #[arg(long, default_value_t = 1000)]
    pub replicas: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "1.1*loglog")]
    pub f_conv: String,
    #[arg(long, default_value = "loglog")]
    pub f_div: String,
    #[arg(long)]
    pub prune_level: Option<f64>,
    #[arg(long, default_value_t = 0.005)]
    pub bias_target: f64,
    /// Window-event part of min-fluct.
    #[arg(long, value_enum, default_value = "none")]
    pub event_method: EventMethodArg,
    #[arg(long, default_value = "8,16", value_delimiter = ',')]
    pub event_n: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub event_replicas: u64,
    /// Tolerance override `verdict-prefix=lo:hi`; repeatable.
    #[arg(long = "tol")]
    pub tolerances: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON verdict file (default: `<out>.verdict.json`).
    #[arg(long)]
    pub verdict: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Resource(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Resource(_) => EXIT_RESOURCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Resource(m) => m,
        }
    }
}

impl From<LawFileError> for CliError {
    fn from(e: LawFileError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<LawError> for CliError {
    fn from(e: LawError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<WalkError> for CliError {
    fn from(e: WalkError) -> Self {
        match e {
            WalkError::DpTooLarge { .. } => CliError::Resource(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::TreeTooLarge { .. } => CliError::Resource(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SpineError> for CliError {
    fn from(e: SpineError) -> Self {
        match e {
            SpineError::TreeTooLarge { .. } => CliError::Resource(e.to_string()),
            SpineError::Walk(w) => w.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::BudgetExceeded { .. } => CliError::Resource(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_resource() {
            CliError::Resource(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Resource(format!("output error: {e}"))
    }
}

/// Parse argv, run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be ≥ 1");
        return EXIT_USAGE;
    }
    let threads = cli.threads;
    match with_threads(threads, || run(&cli)) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_TOLERANCE,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn seed_of(arg: &SeedArg) -> Result<u64, CliError> {
    if let Some(s) = arg.seed {
        return Ok(s);
    }
    match std::env::var("BRWLAB_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("BRWLAB_SEED is not a u64: `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn out_name(p: &Option<PathBuf>) -> Vec<String> {
    p.iter().map(|p| p.display().to_string()).collect()
}

/// `lo:hi:step`, inclusive of `hi` up to rounding.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("grid must be lo:hi:step, got `{s}`"));
    let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [lo, hi, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
        return Err(bad());
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| lo + i as f64 * step).collect())
}

fn renewal_for(law: &OffspringLaw, cover: f64) -> Result<Option<RenewalTable>, CliError> {
    let step = derive_step_law(law)?;
    let Some(span) = step.lattice_span() else { return Ok(None) };
    let m = (cover / span).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=m).map(|i| i as f64 * span).collect();
    Ok(Some(renewal_function(&step, &grid, 1_000_000)?))
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let ts = !cli.no_timestamp;
    match &cli.command {
        Command::Check(a) => run_check(a),
        Command::Simulate(a) => run_simulate(a, ts),
        Command::Walk(WalkCommand::Renewal(a)) => run_renewal(a, ts),
        Command::Walk(WalkCommand::Estimates(a)) => run_estimates(a, ts),
        Command::Spine(a) => run_spine(a, ts),
        Command::Oracle(a) => run_oracle(a, ts),
        Command::Experiment(a) => run_experiment(a, ts),
    }
}

fn run_check(a: &CheckArgs) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    if let Some(path) = &a.normalize {
        let norm = normalize_to_boundary(&law, a.tol, 200)?;
        write_law_file(path, &norm.law)?;
        println!("scale: {}", norm.scale);
        println!("drift: {}", norm.drift);
        println!("normalized law written to {}", path.display());
        let r = check_boundary(&norm.law, a.tol)?;
        print_report(&r);
        return Ok(r.boundary);
    }
    let r = check_boundary(&law, a.tol)?;
    print_report(&r);
    Ok(r.boundary)
}

fn print_report(r: &brwlab_core::BoundaryReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "mean_offspring: {}", r.mean_offspring);
    let _ = writeln!(out, "exp_mass: {}", r.exp_mass);
    let _ = writeln!(out, "tilt_mean: {}", r.tilt_mean);
    let _ = writeln!(out, "sigma2: {}", r.sigma2);
    let _ = writeln!(out, "eta_log2_moment: {}", r.eta_log2_moment);
    let _ = writeln!(out, "eps0_moment: {} (eps0 = {})", r.eps0_moment, r.eps0);
    let _ = writeln!(out, "supercritical: {}", r.supercritical);
    let _ = writeln!(out, "boundary: {} (tol {})", r.boundary, r.tol);
    let _ = writeln!(out, "integrability: {} {} {}", r.int1, r.int2, r.int3);
}

fn run_simulate(a: &SimulateArgs, ts: bool) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    let seed = seed_of(&a.seed)?;
    let report = check_boundary(&law, DEFAULT_BOUNDARY_TOL)?;
    let step = derive_step_law(&law)?;
    let mut cfg = SimConfig::new(a.n, a.alpha);
    cfg.prune = prune_policy(a.prune_level, 0.0, a.cap)?;
    cfg.sigma2 = report.sigma2;
    let s = step.support();
    cfg.step_range = Some(s[s.len() - 1].0 - s[0].0);
    let max_step = s.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let renewal = renewal_for(&law, a.alpha + a.n as f64 * max_step + 1.0)?;
    let config = RunConfig::new("simulate")
        .param("n", a.n)
        .param("alpha", a.alpha)
        .param("prune_level", a.prune_level.to_string())
        .param("cap", a.cap);
    let config = RunConfig { law: Some(a.law.law.clone()), seed: Some(seed), replicas: Some(a.replicas), outputs: out_name(&a.out), ..config };
    let rows = map_replicas(seed, 0..a.replicas, |r, rng| simulate(&law, &cfg, renewal.as_ref(), seed, rng).map(|s| (r, s)))?;
    let mut sink = CsvSink::open(
        a.out.as_deref(),
        &config,
        ts,
        &["replica", "k", "z", "min", "w", "d", "w_alpha", "d_alpha", "pruned_w", "pruned_d", "pruned_bound", "truncated"],
    )?;
    for (r, st) in &rows {
        for rec in &st.records {
            sink.row(&[
                (*r).into(),
                rec.k.into(),
                rec.z.into(),
                rec.min.unwrap_or(f64::INFINITY).into(),
                rec.w.into(),
                rec.d.into(),
                rec.w_alpha.into(),
                rec.d_alpha.into(),
                rec.pruned_w.into(),
                rec.pruned_d.into(),
                rec.pruned_bound.into(),
                st.truncated.into(),
            ])?;
        }
    }
    sink.finish()?;
    if rows.iter().any(|(_, s)| s.truncated) {
        return Err(CliError::Resource(format!("population cap {} reached; output is partial", a.cap)));
    }
    Ok(true)
}

fn run_renewal(a: &RenewalArgs, ts: bool) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    let step = derive_step_law(&law)?;
    let grid = parse_grid(&a.grid)?;
    let seed = seed_of(&a.seed)?;
    let table = match a.method {
        RenewalMethodArg::Ladder => renewal_function(&step, &grid, a.horizon)?,
        RenewalMethodArg::TimeDp => renewal_function_time_dp(&step, &grid, a.horizon)?,
        RenewalMethodArg::Mc => {
            renewal_function_mc(&step, &grid, a.horizon, a.replicas as usize, &mut brwlab_core::rng::replica_rng(seed, 0))?
        }
    };
    let method = format!("{:?}", table.method());
    let mut config = RunConfig::new("walk renewal")
        .param("grid", &a.grid)
        .param("horizon", a.horizon)
        .param("method", &method);
    config.law = Some(a.law.law.clone());
    config.outputs = out_name(&a.out);
    if matches!(a.method, RenewalMethodArg::Mc) {
        config.seed = Some(seed);
        config.replicas = Some(a.replicas);
    }
    let mut sink = CsvSink::open(a.out.as_deref(), &config, ts, &["x", "r", "stderr", "tail_bound", "c_r_estimate"])?;
    for (i, (&x, &v)) in table.grid().iter().zip(table.values()).enumerate() {
        let se = table.stderr().map(|s| s[i]).unwrap_or(0.0);
        sink.row(&[x.into(), v.into(), se.into(), table.tail_bound().into(), table.c_r_estimate().into()])?;
    }
    sink.finish()?;
    Ok(true)
}

fn run_estimates(a: &EstimateArgs, ts: bool) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    let step = derive_step_law(&law)?;
    let kind = EstimateKind::parse(&a.spec).ok_or_else(|| CliError::Usage(format!("unknown estimate `{}`", a.spec)))?;
    let x_max = a.x.iter().cloned().fold(0.0, f64::max).max(a.y.abs()) + a.b.abs() + 8.0;
    let renewal = renewal_for(&law, x_max)?.ok_or(WalkError::NonLattice)?;
    let params = EstimateParams { xs: a.x.clone(), ns: a.n.clone(), a: a.a, b: a.b, y: a.y, r: a.r };
    let report = check_estimates(&step, &renewal, kind, &params)?;
    let mut config = RunConfig::new("walk estimates")
        .param("spec", format!("{kind:?}"))
        .param("n", &a.n)
        .param("x", &a.x)
        .param("a", a.a)
        .param("b", a.b)
        .param("y", a.y)
        .param("r", a.r);
    config.law = Some(a.law.law.clone());
    config.outputs = out_name(&a.out);
    let mut sink = CsvSink::open(a.out.as_deref(), &config, ts, &["x", "n", "lhs", "rhs", "ratio"])?;
    for row in &report.rows {
        sink.row(&[row.x.into(), row.n.into(), row.lhs.into(), row.rhs.into(), row.ratio.into()])?;
    }
    sink.finish()?;
    eprintln!("sup ratio: {}", report.sup_ratio);
    Ok(true)
}

/// `one`, `w-alpha`, `w-ratio`, `event:A(n,lambda)`; returns the functional
/// and the time it fixes, if any.
pub fn parse_functional(s: &str, k_const: f64) -> Result<(SpineFunctional, Option<usize>), CliError> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    match t.as_str() {
        "one" => return Ok((SpineFunctional::One, None)),
        "w-alpha" => return Ok((SpineFunctional::WAlpha, None)),
        "w-ratio" => return Ok((SpineFunctional::WRatio, None)),
        _ => {}
    }
    let bad = || CliError::Usage(format!("functional must be one, w-alpha, w-ratio or event:A(n,lambda); got `{s}`"));
    let inner = t.strip_prefix("event:A(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
    let (n, lambda) = inner.split_once(',').ok_or_else(bad)?;
    let n: usize = n.parse().map_err(|_| bad())?;
    let lambda: f64 = lambda.parse().map_err(|_| bad())?;
    if n < 2 || !lambda.is_finite() {
        return Err(bad());
    }
    Ok((SpineFunctional::EventA { lambda, k_const }, Some(n)))
}

fn run_spine(a: &SpineArgs, ts: bool) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    let seed = seed_of(&a.seed)?;
    let (functional, fixed_n) = parse_functional(&a.functional, a.k_const)?;
    let n = match (fixed_n, a.n) {
        (Some(f), Some(g)) if f != g => {
            return Err(CliError::Usage(format!("--n {g} disagrees with the functional's n = {f}")));
        }
        (Some(f), _) => f,
        (None, Some(g)) => g,
        (None, None) => return Err(CliError::Usage("--n is required".into())),
    };
    let depth = functional.depth(n);
    let step = derive_step_law(&law)?;
    let max_step = step.support().iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let renewal = renewal_for(&law, a.alpha + depth as f64 * max_step + 1.0)?.ok_or(WalkError::NonLattice)?;
    SpineSampler::new(&law, &renewal, a.alpha)?;
    let rows = fold_replicas_with(
        seed,
        0..a.replicas,
        || SpineSampler::new(&law, &renewal, a.alpha).expect("validated above"),
        Vec::new,
        |sampler, acc, r, rng| -> Result<(), SpineError> {
            acc.push((r, importance_replica(sampler, functional, n, rng)?));
            Ok(())
        },
        |acc, mut part| acc.append(&mut part),
    )?;
    let mut config = RunConfig::new("spine")
        .param("alpha", a.alpha)
        .param("n", n)
        .param("functional", &a.functional)
        .param("k_const", a.k_const);
    config.law = Some(a.law.law.clone());
    config.seed = Some(seed);
    config.replicas = Some(a.replicas);
    config.outputs = out_name(&a.out);
    let mut sink = CsvSink::open(a.out.as_deref(), &config, ts, &["replica", "value", "weight"])?;
    let mut acc = ImportanceAccumulator::default();
    for (r, s) in &rows {
        acc.push(*s);
        let (v, w) = s.unwrap_or((f64::NAN, 0.0));
        sink.row(&[(*r).into(), v.into(), w.into()])?;
    }
    sink.finish()?;
    let est = acc.finish();
    eprintln!("estimate: {} ± {} ({} accepted, {} rejected)", est.estimate, est.stderr, est.accepted, est.rejected);
    Ok(true)
}

fn run_oracle(a: &OracleArgs, ts: bool) -> Result<bool, CliError> {
    if a.battery != "default" {
        return Err(CliError::Usage(format!("unknown battery `{}`; only `default` exists", a.battery)));
    }
    let law = load_law(&a.law.law)?;
    let step = derive_step_law(&law)?;
    let budget = EnumerationBudget { max_depth: a.n.max(16), ..EnumerationBudget::default() };
    let mut config = RunConfig::new("oracle").param("n", a.n).param("alpha", a.alpha).param("battery", &a.battery);
    config.law = Some(a.law.law.clone());
    config.outputs = out_name(&a.out);
    config.tolerances.insert("gap".into(), a.tol);
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    for (name, f) in default_battery(a.n) {
        let (tree, walk) = exact_expectation(&law, &step, a.n, &*f, &budget)?;
        rows.push((format!("many-to-one {name}"), tree, walk, (tree - walk).abs()));
    }
    if let Some(renewal) = renewal_for(&law, a.alpha + a.n as f64 * 4.0 + 8.0)? {
        for k in 1..=a.n {
            let gap = exact_martingale_gap(&law, &renewal, a.alpha, k, &budget)?;
            rows.push((format!("martingale D_alpha n={k}"), f64::NAN, f64::NAN, gap));
        }
    }
    let mut sink = CsvSink::open(a.out.as_deref(), &config, ts, &["check", "lhs", "rhs", "gap", "pass"])?;
    let mut ok = true;
    for (name, l, r, g) in &rows {
        let pass = *g <= a.tol;
        ok &= pass;
        sink.row(&[Field::Text(name.clone()), (*l).into(), (*r).into(), (*g).into(), pass.into()])?;
    }
    sink.finish()?;
    Ok(ok)
}

fn parse_overrides(items: &[String]) -> Result<Overrides, CliError> {
    let mut out = BTreeMap::new();
    for it in items {
        let bad = || CliError::Usage(format!("tolerance override must be name=lo:hi, got `{it}`"));
        let (name, range) = it.split_once('=').ok_or_else(bad)?;
        let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        out.insert(name.to_string(), Tolerance::new(lo, hi));
    }
    Ok(out)
}

fn parse_f(s: &str) -> Result<FSpec, CliError> {
    s.parse().map_err(|e: crate::fspec::FSpecError| CliError::Usage(e.to_string()))
}

fn run_experiment(a: &ExperimentArgs, ts: bool) -> Result<bool, CliError> {
    let law = load_law(&a.law.law)?;
    let seed = seed_of(&a.seed)?;
    let overrides = parse_overrides(&a.tolerances)?;
    let ctx = LawContext::new(law)?;
    let f_conv = parse_f(&a.f_conv)?;
    let f_div = parse_f(&a.f_div)?;
    let result: ExperimentResult = match a.name {
        ExperimentName::MinFluct => {
            let method = match a.event_method {
                EventMethodArg::None => None,
                EventMethodArg::Exact => Some(EventMethod::Exact),
                EventMethodArg::Mc => Some(EventMethod::MonteCarlo),
                EventMethodArg::Importance => Some(EventMethod::Importance),
            };
            let cfg = MinFluctConfig {
                n_grid: a.n.clone(),
                f_convergent: f_conv,
                f_divergent: f_div,
                replicas: a.replicas,
                seed,
                prune_level: a.prune_level,
                events: method.map(|method| EventScalingConfig {
                    n_grid: a.event_n.clone(),
                    k_const: a.k_const,
                    method,
                    replicas: a.event_replicas,
                    seed,
                }),
            };
            exp_min_fluctuation(&ctx, &cfg, &overrides)?
        }
        ExperimentName::AdditiveUpper => {
            let cfg = AdditiveUpperConfig {
                n_grid: a.n.clone(),
                f_convergent: f_conv,
                f_divergent: f_div,
                replicas: a.replicas,
                seed,
                prune_level: a.prune_level,
            };
            exp_additive_upper(&ctx, &cfg, &overrides)?
        }
        ExperimentName::LiminfRatio => {
            let mut cfg = LiminfRatioConfig::new(a.n.clone(), a.replicas, seed);
            cfg.bias_target = a.bias_target;
            exp_liminf_ratio(&ctx, &cfg, &overrides)?
        }
        ExperimentName::PairCorr => {
            let n = *a.n.first().ok_or_else(|| CliError::Usage("--n is required".into()))?;
            let m = a.m.ok_or_else(|| CliError::Usage("--m is required for pair-corr".into()))?;
            let mut cfg = PairConfig::new(n, m, a.lambda, a.mu, a.replicas, seed);
            cfg.k_const = a.k_const;
            exp_pair_correlation(&ctx, &cfg, &overrides)?
        }
    };
    let verdict_path = a.verdict.clone().or_else(|| a.out.as_ref().map(|p| {
        let mut s = p.clone().into_os_string();
        s.push(".verdict.json");
        PathBuf::from(s)
    }));
    let mut config = RunConfig::new("experiment").param("name", format!("{:?}", a.name)).param("experiment", &result.config);
    config.law = Some(a.law.law.clone());
    config.seed = Some(seed);
    config.replicas = Some(a.replicas);
    config.outputs = out_name(&a.out).into_iter().chain(out_name(&verdict_path)).collect();
    config.tolerances = overrides.iter().flat_map(|(k, t)| [(format!("{k}.lo"), t.lower), (format!("{k}.hi"), t.upper)]).collect();
    write_experiment(&result, &config, a.out.as_deref(), verdict_path.as_deref(), ts)?;
    for v in &result.verdicts {
        eprintln!(
            "{} {}: {} in [{}, {}]{}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.value,
            v.lower,
            v.upper,
            if v.heuristic { " (heuristic)" } else { "" }
        );
    }
    Ok(result.passed())
}

/// Cells as CSV, the full result as JSON.
pub fn write_experiment(
    result: &ExperimentResult,
    config: &RunConfig,
    csv_path: Option<&Path>,
    verdict_path: Option<&Path>,
    timestamp: bool,
) -> Result<(), CliError> {
    let mut sink = CsvSink::open(csv_path, config, timestamp, &["label", "n", "m", "lambda", "mu", "y", "estimate", "stderr", "replicas"])?;
    for c in &result.cells {
        let k = |name: &str| Field::Float(c.key.get(name).copied().unwrap_or(f64::NAN));
        sink.row(&[
            Field::Text(c.label.clone()),
            k("n"),
            k("m"),
            k("lambda"),
            k("mu"),
            k("y"),
            c.estimate.into(),
            c.stderr.into(),
            c.replicas.into(),
        ])?;
    }
    sink.finish()?;
    if let Some(p) = verdict_path {
        let doc = serde_json::json!({ "config": config, "result": result, "passed": result.passed() });
        std::fs::write(p, serde_json::to_string_pretty(&doc).expect("result serializes") + "\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_functionals() {
        assert_eq!(parse_grid("0:2:0.5").unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(parse_grid("0:2").is_err());
        assert!(parse_grid("2:0:1").is_err());
        assert_eq!(parse_functional("w-ratio", 10.0).unwrap().0, SpineFunctional::WRatio);
        let (f, n) = parse_functional("event:A(8, 0.5)", 3.0).unwrap();
        assert_eq!(f, SpineFunctional::EventA { lambda: 0.5, k_const: 3.0 });
        assert_eq!(n, Some(8));
        assert!(parse_functional("event:A(8)", 3.0).is_err());
    }

    #[test]
    fn overrides_parse() {
        let o = parse_overrides(&["tail-slope=-2:0".to_string()]).unwrap();
        assert_eq!(o["tail-slope"], Tolerance::new(-2.0, 0.0));
        assert!(parse_overrides(&["x=1:0".to_string()]).is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(dispatch(["brwlab", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["brwlab", "check"]), EXIT_USAGE);
        assert_eq!(dispatch(["brwlab", "check", "--law", "no/such/law.json"]), EXIT_USAGE);
    }
}
