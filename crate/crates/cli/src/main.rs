//! `stl`: run online SGD and population experiments, check the comparison
//! inequalities, and print hitting-time predictions.

mod flagfile;
mod svg;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stl_core::bounds::{self, EnvelopeKind};
use stl_core::harness::{self, Dynamics, ExperimentRun, ExperimentSpec, OnlineSettings, PopulationSettings, Thresholds, POPULATION_INIT_N};
use stl_core::model::{ModelParams, NoiseDist, SpikeBasis};
use stl_core::noise::{NoiseBackend, DEFAULT_EXPLICIT_BUDGET};
use stl_core::population::{predicted_hitting_time, IntegrationConfig, Method};
use stl_core::rng::{Role, Streams};

#[derive(Parser, Debug)]
#[command(name = "stl", version, about = "Multi-spike tensor PCA: online SGD, population dynamics and recovery analysis")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run online SGD over a range of seeds.
    Simulate(SimulateArgs),
    /// Integrate the deterministic correlation dynamics.
    Population(PopulationArgs),
    /// Check random sequences against the discrete comparison envelopes.
    VerifyBounds(BoundsArgs),
    /// Print the predicted hitting time of a single correlation.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Start from a figure preset (fig1 … fig10).
    #[arg(long)]
    preset: Option<String>,
    /// Flag file with `key = value` lines; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<u32>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated SNRs in non-increasing order.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Base seed; seed k of the sweep uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    record_stride: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps_prime: Option<f64>,
    /// Output directory; defaults to `$STL_OUT_DIR/<run id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "STL_OUT_DIR", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
    /// Also write one SVG chart per seed.
    #[arg(long)]
    svg: bool,
    /// Record the eigenvalues of MMᵀ as extra CSV columns.
    #[arg(long)]
    eigs: bool,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the resolved settings as a flag file and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    noise: Option<NoiseDist>,
    /// `implicit` (Gaussian only) or `explicit`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, conflicts_with = "delta_over_n")]
    delta: Option<f64>,
    #[arg(long)]
    delta_over_n: Option<f64>,
    /// Allow the explicit backend beyond its tensor-size budget.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PopulationArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dtau: Option<f64>,
    /// Integration horizon in population time; alternative to --steps.
    #[arg(long, conflicts_with = "steps")]
    tau_max: Option<f64>,
    #[arg(long)]
    method: Option<Method>,
    /// Stop once M is within this distance of a signed permutation.
    #[arg(long)]
    stop_within: Option<f64>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// gronwall, bihari or logistic; all three when omitted.
    #[arg(long)]
    kind: Option<EnvelopeKind>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    p: u32,
    /// λ_i, or λ_i,λ_j for an off-diagonal pair.
    #[arg(long, value_delimiter = ',', num_args = 1..=2)]
    lambda: Vec<f64>,
    /// Initial correlation times √N.
    #[arg(long)]
    gamma: f64,
    #[arg(long)]
    n: f64,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
}

/// How a command failed, which fixes the exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<stl_core::Error> for Failure {
    fn from(e: stl_core::Error) -> Self {
        use stl_core::Error as E;
        if e.is_numeric() {
            return Failure::Numeric(e.to_string());
        }
        match e {
            E::Io(_) | E::Json(_) => Failure::Other(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// SNRs from `--lambda`, or `r` ones when only `--r` is given.
fn resolve_lambdas(common: &CommonArgs, current: Option<&[f64]>) -> Result<Option<Vec<f64>>, Failure> {
    match (&common.lambda, common.r) {
        (Some(l), Some(r)) if l.len() != r => Err(usage(format!("--r {r} does not match {} SNRs in --lambda", l.len()))),
        (Some(l), _) => Ok(Some(l.clone())),
        (None, Some(r)) if current.is_none_or(|c| c.len() != r) => Ok(Some(vec![1.0; r])),
        _ => Ok(None),
    }
}

fn apply_common(spec: &mut ExperimentSpec, common: &CommonArgs) -> Result<(), Failure> {
    if let Some(p) = common.p {
        spec.params.p = p;
    }
    if let Some(l) = resolve_lambdas(common, Some(&spec.params.lambdas))? {
        spec.params.r = l.len();
        spec.params.lambdas = l;
    }
    if let Some(n) = common.seeds {
        spec.n_seeds = n;
    }
    if let Some(s) = common.seed {
        spec.base_seed = s;
    }
    let t = &mut spec.thresholds;
    t.eps = common.eps.unwrap_or(t.eps);
    t.eps_prime = common.eps_prime.unwrap_or(t.eps_prime);
    Ok(())
}

fn base_spec(preset: Option<&str>) -> Result<Option<ExperimentSpec>, Failure> {
    preset.map(harness::figure_preset).transpose().map_err(Failure::from)
}

fn simulate_spec(a: &SimulateArgs) -> Result<ExperimentSpec, Failure> {
    let c = &a.common;
    let mut spec = match base_spec(c.preset.as_deref())? {
        Some(s) if matches!(s.dynamics, Dynamics::Online(_)) => s,
        Some(_) => return Err(usage("this preset integrates population dynamics; use the `population` subcommand")),
        None => {
            let p = c.p.ok_or_else(|| usage("--p is required without --preset"))?;
            let n = c.n.ok_or_else(|| usage("--n is required without --preset"))?;
            let lambdas = resolve_lambdas(c, None)?.ok_or_else(|| usage("--lambda or --r is required without --preset"))?;
            let steps = c.steps.ok_or_else(|| usage("--steps is required without --preset"))?;
            if a.delta.is_none() && a.delta_over_n.is_none() {
                return Err(usage("--delta or --delta-over-n is required without --preset"));
            }
            ExperimentSpec {
                preset: None,
                params: ModelParams { p, r: lambdas.len(), n, lambdas, sigma: 1.0, noise: NoiseDist::Gaussian },
                basis: SpikeBasis::Canonical,
                dynamics: Dynamics::Online(OnlineSettings {
                    delta: 0.0,
                    steps,
                    backend: NoiseBackend::GaussianImplicit,
                    record_stride: 1,
                    record_eigs: false,
                }),
                n_seeds: 1,
                base_seed: 0,
                thresholds: Thresholds::default(),
            }
        }
    };
    apply_common(&mut spec, c)?;
    if let Some(n) = c.n {
        spec.params.n = n;
    }
    if let Some(s) = a.sigma {
        spec.params.sigma = s;
    }
    if let Some(d) = a.noise {
        spec.params.noise = d;
    }
    let n = spec.params.n as f64;
    let Dynamics::Online(o) = &mut spec.dynamics else { unreachable!("checked above") };
    if let Some(d) = a.delta {
        o.delta = d;
    }
    if let Some(d) = a.delta_over_n {
        o.delta = d * n;
    }
    o.steps = c.steps.unwrap_or(o.steps);
    o.record_stride = c.record_stride.unwrap_or(o.record_stride);
    o.record_eigs |= c.eigs;
    match a.backend.as_deref() {
        None => {}
        Some("implicit") => o.backend = NoiseBackend::GaussianImplicit,
        Some("explicit") => o.backend = NoiseBackend::explicit(),
        Some(other) => return Err(usage(format!("unknown backend `{other}`; expected implicit or explicit"))),
    }
    if a.force {
        if let NoiseBackend::Explicit { budget } = &mut o.backend {
            *budget = u64::MAX;
        }
    }
    Ok(spec)
}

fn population_spec(a: &PopulationArgs) -> Result<ExperimentSpec, Failure> {
    let c = &a.common;
    let mut spec = match base_spec(c.preset.as_deref())? {
        Some(s) if matches!(s.dynamics, Dynamics::Population(_)) => s,
        Some(_) => return Err(usage("this preset runs online SGD; use the `simulate` subcommand")),
        None => {
            let p = c.p.ok_or_else(|| usage("--p is required without --preset"))?;
            let lambdas = resolve_lambdas(c, None)?.ok_or_else(|| usage("--lambda or --r is required without --preset"))?;
            if c.steps.is_none() && a.tau_max.is_none() {
                return Err(usage("--steps or --tau-max is required without --preset"));
            }
            let n = c.n.unwrap_or(POPULATION_INIT_N);
            ExperimentSpec {
                preset: None,
                params: ModelParams { p, r: lambdas.len(), n, lambdas, sigma: 0.0, noise: NoiseDist::Gaussian },
                basis: SpikeBasis::Canonical,
                dynamics: Dynamics::Population(PopulationSettings {
                    dtau: 0.0,
                    n_steps: 0,
                    method: Method::Rk4,
                    record_stride: 0,
                    record_eigs: false,
                    init_n: n,
                    stop_within: None,
                }),
                n_seeds: 1,
                base_seed: 0,
                thresholds: Thresholds::default(),
            }
        }
    };
    apply_common(&mut spec, c)?;
    if let Some(n) = c.n {
        spec.params.n = n;
    }
    spec.params.validate()?;
    let default_dtau = IntegrationConfig::default_dtau(&spec.params);
    let custom = spec.preset.is_none();
    let Dynamics::Population(s) = &mut spec.dynamics else { unreachable!("checked above") };
    if let Some(n) = c.n {
        s.init_n = n;
    }
    if custom || a.dtau.is_some() || c.p.is_some() || c.lambda.is_some() {
        let horizon = s.n_steps as f64 * s.dtau;
        s.dtau = a.dtau.unwrap_or(default_dtau);
        if !custom && a.tau_max.is_none() && c.steps.is_none() {
            s.n_steps = (horizon / s.dtau).ceil() as u64;
        }
    }
    if let Some(t) = a.tau_max {
        s.n_steps = (t / s.dtau).ceil() as u64;
    }
    if let Some(k) = c.steps {
        s.n_steps = k;
    }
    s.record_stride = c.record_stride.unwrap_or(if custom { (s.n_steps / 2000).max(1) } else { s.record_stride });
    s.method = a.method.unwrap_or(s.method);
    s.stop_within = a.stop_within.or(s.stop_within);
    s.record_eigs |= c.eigs;
    Ok(spec)
}

/// The settings of `spec` as a flag file for the matching subcommand.
fn flag_file(spec: &ExperimentSpec) -> String {
    let p = &spec.params;
    let mut out = String::new();
    let lambdas: Vec<String> = p.lambdas.iter().map(f64::to_string).collect();
    let _ = writeln!(out, "p = {}\nn = {}\nlambda = {}", p.p, p.n, lambdas.join(","));
    match &spec.dynamics {
        Dynamics::Online(o) => {
            let backend = match o.backend {
                NoiseBackend::GaussianImplicit => "implicit",
                NoiseBackend::Explicit { .. } => "explicit",
            };
            let noise = match p.noise {
                NoiseDist::Gaussian => "gaussian",
                NoiseDist::Rademacher => "rademacher",
            };
            let _ = writeln!(out, "sigma = {}\nnoise = {noise}\nbackend = {backend}\ndelta = {}", p.sigma, o.delta);
            let _ = writeln!(out, "steps = {}\nrecord-stride = {}\neigs = {}", o.steps, o.record_stride, o.record_eigs);
            if matches!(o.backend, NoiseBackend::Explicit { budget } if budget > DEFAULT_EXPLICIT_BUDGET) {
                out.push_str("force = true\n");
            }
        }
        Dynamics::Population(s) => {
            let method = match s.method {
                Method::Euler => "euler",
                Method::Rk4 => "rk4",
            };
            let _ = writeln!(out, "dtau = {}\nsteps = {}\nmethod = {method}", s.dtau, s.n_steps);
            let _ = writeln!(out, "record-stride = {}\neigs = {}", s.record_stride, s.record_eigs);
            if let Some(t) = s.stop_within {
                let _ = writeln!(out, "stop-within = {t}");
            }
        }
    }
    let t = &spec.thresholds;
    let _ = writeln!(out, "seeds = {}\nseed = {}\neps = {}\neps-prime = {}", spec.n_seeds, spec.base_seed, t.eps, t.eps_prime);
    out
}

fn run(spec: &ExperimentSpec, common: &CommonArgs) -> Result<(), Failure> {
    if common.print_config {
        print!("{}", flag_file(spec));
        return Ok(());
    }
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| common.out_root.join(spec.preset.as_deref().unwrap_or("custom")));
    let run: ExperimentRun = harness::run_experiment(spec, common.jobs)?;
    run.write(&dir)?;
    if common.svg {
        for (k, traj) in &run.trajectories {
            fs::write(dir.join(format!("seed_{k}.svg")), svg::render(traj)).map_err(|e| Failure::Other(e.to_string()))?;
        }
    }
    let s = &run.summary;
    let f = &s.frequencies;
    println!("wrote {}", dir.display());
    println!(
        "recovery over {} seeds: exact {:.2}, permutation {:.2}, subspace {:.2}, none {:.2}",
        s.outcomes.len(),
        f.exact,
        f.permutation,
        f.subspace,
        f.none
    );
    if !s.instability.unstable_seeds.is_empty() {
        println!("unstable seeds (|m_11| drawdown > {}): {:?}", s.instability.drop, s.instability.unstable_seeds);
    }
    eprintln!("elapsed {:.2} s", s.wall_clock_secs);
    if let Some(first) = s.failures.first() {
        let msg = format!("{} of {} seeds failed; first: seed {}: {}", s.failures.len(), s.n_seeds, first.seed, first.error);
        return Err(if s.failures.iter().any(|f| f.numeric) { Failure::Numeric(msg) } else { Failure::Other(msg) });
    }
    Ok(())
}

fn verify_bounds(a: &BoundsArgs) -> Result<(), Failure> {
    let kinds = match a.kind {
        Some(k) => vec![k],
        None => vec![EnvelopeKind::Gronwall, EnvelopeKind::Bihari, EnvelopeKind::Logistic],
    };
    let mut all_ok = true;
    for (lane, kind) in kinds.into_iter().enumerate() {
        let mut rng = Streams::new(a.seed).stream(Role::Test, lane as u64, 0);
        let rep = bounds::randomized_suite(kind, a.trials, &mut rng)?;
        let name = format!("{kind:?}").to_lowercase();
        println!("{name}: {}/{} sequences inside the envelope ({} indices checked)", rep.passed, rep.trials, rep.envelope_checked);
        if let Some((spec, v)) = rep.first_failure {
            all_ok = false;
            println!("  first violation: {v:?} for {spec:?}");
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(Failure::Other("some sequences left their envelope".into()))
    }
}

fn predict(a: &PredictArgs) -> Result<(), Failure> {
    let li = a.lambda[0];
    let lj = a.lambda.get(1).copied().unwrap_or(li);
    let h = predicted_hitting_time(a.gamma, li, lj, a.p, a.delta, a.n, a.eps)?;
    println!("tau = {}", h.tau);
    println!("steps = {}", h.steps);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => run(&simulate_spec(a)?, &a.common),
        Command::Population(a) => run(&population_spec(a)?, &a.common),
        Command::VerifyBounds(a) => verify_bounds(a),
        Command::Predict(a) => predict(a),
    }
}

fn main() -> ExitCode {
    let mut args: Vec<OsString> = std::env::args_os().collect();
    if let Some(path) = flagfile::find_config(&args) {
        let parsed = fs::read_to_string(&path)
            .map_err(|e| format!("cannot read {}: {e}", path.to_string_lossy()))
            .and_then(|text| flagfile::parse(&text));
        match parsed {
            Ok(from_file) => args = flagfile::splice(args, from_file),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Numeric(m) | Failure::Other(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
