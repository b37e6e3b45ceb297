//! Experiment orchestration: seed sweeps, figure presets, aggregation and
//! output files.
//!
//! Seed k of an experiment uses `base_seed + k` for everything it draws
//! (ground truth, initialization, noise). Seeds run on a rayon pool and results
//! are folded in seed order, so the output does not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, EliminationReport, RecoveryKind, RecoveryOutcome};
use crate::error::{Error, Result};
use crate::model::{make_ground_truth, ModelParams, NoiseDist, SpikeBasis};
use crate::noise::NoiseBackend;
use crate::population::{integrate_with, CorrelationMatrix, IntegrationConfig, Method};
use crate::rng::{Role, Streams};
use crate::sgd::{self, SgdConfig, Trajectory};
use crate::stiefel::sample_uniform;

/// Dimension used to draw initial correlations for population runs.
pub const POPULATION_INIT_N: usize = 1_000_000;

/// Online SGD settings shared by every seed of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineSettings {
    pub delta: f64,
    pub steps: u64,
    pub backend: NoiseBackend,
    pub record_stride: u64,
    pub record_eigs: bool,
}

impl OnlineSettings {
    pub fn sgd_config(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            delta: self.delta,
            steps: self.steps,
            backend: self.backend,
            record_stride: self.record_stride,
            seed,
            record_eigs: self.record_eigs,
        }
    }
}

/// Population-dynamics settings. Initial correlations are the absolute values
/// of the first r rows of a uniform frame in dimension `init_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSettings {
    pub dtau: f64,
    pub n_steps: u64,
    pub method: Method,
    pub record_stride: u64,
    pub record_eigs: bool,
    pub init_n: usize,
    /// Stop once every column has one entry within this distance of ±1 and all
    /// other entries are below it. Checked on recorded steps only.
    pub stop_within: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dynamics {
    Online(OnlineSettings),
    Population(PopulationSettings),
}

/// Thresholds used when analysing each trajectory. None of them come from the
/// model; they are reporting tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Recovery and elimination use `|m| ≥ 1 − eps`.
    pub eps: f64,
    /// Bound on competing entries after a pair is eliminated.
    pub eps_prime: f64,
    /// Bound on entries outside the recovered assignment.
    pub small_bound: f64,
    /// Level for the reported hitting times.
    pub hit_level: f64,
    /// Level that `|m_11|` must reach before its drawdown is tracked.
    pub instability_level: f64,
    /// Drawdown of `|m_11|` after the crossing that flags a seed as unstable.
    pub instability_drop: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps: 0.1, eps_prime: 0.2, small_bound: 0.2, hit_level: 0.5, instability_level: 0.5, instability_drop: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: Option<String>,
    pub params: ModelParams,
    pub basis: SpikeBasis,
    pub dynamics: Dynamics,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub thresholds: Thresholds,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n_seeds == 0 {
            return Err(Error::InvalidParams("n_seeds must be ≥ 1".into()));
        }
        let t = &self.thresholds;
        for (name, v) in [("eps", t.eps), ("eps_prime", t.eps_prime), ("small_bound", t.small_bound)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        match &self.dynamics {
            Dynamics::Online(o) => {
                o.sgd_config(self.base_seed).validate()?;
                o.backend.check(&self.params)?;
            }
            Dynamics::Population(s) => {
                if !(s.dtau > 0.0 && s.dtau.is_finite()) || s.record_stride == 0 {
                    return Err(Error::InvalidParams("population runs need dtau > 0 and record_stride ≥ 1".into()));
                }
                if s.init_n < self.params.r {
                    return Err(Error::InvalidParams(format!("init_n = {} is below r = {}", s.init_n, self.params.r)));
                }
            }
        }
        Ok(())
    }

    /// Population time covered by one recorded step index.
    fn dtau(&self) -> f64 {
        match &self.dynamics {
            Dynamics::Online(o) => o.delta / self.params.sqrt_n(),
            Dynamics::Population(s) => s.dtau,
        }
    }
}

/// Analysis of a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub index: usize,
    pub seed: u64,
    pub recovery: RecoveryOutcome,
    pub elimination: EliminationReport,
    /// Greedy selection on `λ_iλ_j m_ij(0)^{p−2}`.
    pub predicted_ordering: Vec<(usize, usize)>,
    pub initial_m: Vec<Vec<f64>>,
    pub final_m: Vec<Vec<f64>>,
    /// First population time with `|m_ij| ≥ hit_level`, row-major.
    pub hitting_tau: Vec<Option<f64>>,
    pub m11_drawdown: Option<f64>,
    pub unstable: bool,
    pub max_orthonormality_residual: f64,
    pub max_tangency_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub index: usize,
    pub seed: u64,
    pub numeric: bool,
    pub error: String,
}

/// Fractions of completed seeds per outcome kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Frequencies {
    pub exact: f64,
    pub permutation: f64,
    pub subspace: f64,
    pub none: f64,
}

impl Frequencies {
    pub fn of(kinds: &[RecoveryKind]) -> Self {
        if kinds.is_empty() {
            return Frequencies::default();
        }
        let share = |k: RecoveryKind| kinds.iter().filter(|&&x| x == k).count() as f64 / kinds.len() as f64;
        Frequencies {
            exact: share(RecoveryKind::Exact),
            permutation: share(RecoveryKind::Permutation),
            subspace: share(RecoveryKind::Subspace),
            none: share(RecoveryKind::None),
        }
    }

    pub fn total(&self) -> f64 {
        self.exact + self.permutation + self.subspace + self.none
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairHitting {
    pub pair: (usize, usize),
    pub hits: usize,
    pub mean_tau: Option<f64>,
    pub median_tau: Option<f64>,
    pub q90_tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instability {
    pub level: f64,
    pub drop: f64,
    pub unstable_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub preset: Option<String>,
    pub params: ModelParams,
    pub config: Dynamics,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub thresholds: Thresholds,
    pub outcomes: Vec<SeedOutcome>,
    pub frequencies: Frequencies,
    pub hitting_times: Vec<PairHitting>,
    pub instability: Instability,
    pub failures: Vec<SeedFailure>,
    /// Seconds spent running seeds. Not serialized, so summaries stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A finished experiment: the summary plus the trajectory of each completed seed.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub summary: ExperimentSummary,
    pub trajectories: Vec<(usize, Trajectory)>,
}

/// Absolute values of the first r rows of a uniform r-frame in dimension `n`.
pub fn population_init(r: usize, n: usize, streams: &Streams) -> Result<CorrelationMatrix> {
    let x = sample_uniform(n, r, &mut streams.stream(Role::Init, 0, 0))?;
    CorrelationMatrix::new(x.matrix().rows(0, r).map(f64::abs))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|row| row.iter().copied().collect()).collect()
}

fn simulate_seed(spec: &ExperimentSpec, seed: u64) -> Result<Trajectory> {
    let streams = Streams::new(seed);
    let params = &spec.params;
    match &spec.dynamics {
        Dynamics::Online(o) => {
            let gt = make_ground_truth(params, spec.basis, &mut streams.stream(Role::GroundTruth, 0, 0))?;
            let x0 = sample_uniform(params.n, params.r, &mut streams.stream(Role::Init, 0, 0))?;
            sgd::run(params, &gt, &x0, &o.sgd_config(seed))
        }
        Dynamics::Population(s) => {
            let m0 = population_init(params.r, s.init_n, &streams)?;
            let cfg = IntegrationConfig { dtau: s.dtau, n_steps: s.n_steps, method: s.method, record_stride: s.record_stride };
            let mut k = 0u64;
            let states = integrate_with(&m0, params, &cfg, |_, m| {
                let check = k % s.record_stride == 0;
                k += 1;
                check && s.stop_within.is_some_and(|tol| settled(m, tol))
            })?;
            let mut traj = Trajectory::from_population(&states, s.record_eigs);
            traj.steps = states.iter().map(|st| (st.tau / s.dtau).round() as u64).collect();
            Ok(traj)
        }
    }
}

/// Each column has one entry with `|m| ≥ 1 − tol`, and every other entry is below `tol`.
fn settled(m: &DMatrix<f64>, tol: f64) -> bool {
    m.column_iter().all(|c| {
        let big = c.iter().filter(|v| v.abs() >= 1.0 - tol).count();
        let small = c.iter().filter(|v| v.abs() < tol).count();
        big == 1 && small == c.len() - 1
    })
}

fn analyse(spec: &ExperimentSpec, index: usize, seed: u64, traj: &Trajectory) -> Result<SeedOutcome> {
    let t = &spec.thresholds;
    let first = traj.corr.first().ok_or_else(|| Error::InvalidParams("empty trajectory".into()))?.matrix();
    let last = traj.last().expect("non-empty").matrix();
    let recovery = analysis::classify_recovery(last, t.eps, t.small_bound)?;
    let elimination = analysis::detect_sequential_elimination(traj, t.eps, t.eps_prime)?;
    let predicted = analysis::greedy_max_selection(&analysis::init_matrix(first, &spec.params.lambdas, spec.params.p))?;
    let dtau = spec.dtau();
    let hitting_tau = analysis::hitting_times(traj, t.hit_level).into_iter().map(|h| h.map(|s| s as f64 * dtau)).collect();
    let m11_drawdown = analysis::drawdown_after_crossing(traj, 0, 0, t.instability_level);
    Ok(SeedOutcome {
        index,
        seed,
        recovery,
        elimination,
        predicted_ordering: predicted.pairs,
        initial_m: rows(first),
        final_m: rows(last),
        hitting_tau,
        m11_drawdown,
        unstable: m11_drawdown.is_some_and(|d| d > t.instability_drop),
        max_orthonormality_residual: traj.max_orthonormality_residual,
        max_tangency_residual: traj.max_tangency_residual,
    })
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

fn aggregate_hitting(outcomes: &[SeedOutcome], r: usize) -> Vec<PairHitting> {
    (0..r * r)
        .map(|idx| {
            let mut taus: Vec<f64> = outcomes.iter().filter_map(|o| o.hitting_tau[idx]).collect();
            taus.sort_by(f64::total_cmp);
            PairHitting {
                pair: (idx / r, idx % r),
                hits: taus.len(),
                mean_tau: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
                median_tau: quantile(&taus, 0.5),
                q90_tau: quantile(&taus, 0.9),
            }
        })
        .collect()
}

/// Runs every seed of `spec` on `jobs` worker threads (all cores when `None`).
pub fn run_experiment(spec: &ExperimentSpec, jobs: Option<usize>) -> Result<ExperimentRun> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let start = std::time::Instant::now();
    let results: Vec<Result<(SeedOutcome, Trajectory)>> = pool.install(|| {
        (0..spec.n_seeds)
            .into_par_iter()
            .map(|k| {
                let seed = spec.base_seed.wrapping_add(k as u64);
                let traj = simulate_seed(spec, seed)?;
                let outcome = analyse(spec, k, seed, &traj)?;
                Ok((outcome, traj))
            })
            .collect()
    });
    let wall_clock_secs = start.elapsed().as_secs_f64();

    let mut outcomes = Vec::new();
    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok((o, t)) => {
                outcomes.push(o);
                trajectories.push((k, t));
            }
            Err(e) => failures.push(SeedFailure {
                index: k,
                seed: spec.base_seed.wrapping_add(k as u64),
                numeric: e.is_numeric(),
                error: e.to_string(),
            }),
        }
    }
    let kinds: Vec<RecoveryKind> = outcomes.iter().map(|o| o.recovery.kind).collect();
    let summary = ExperimentSummary {
        preset: spec.preset.clone(),
        params: spec.params.clone(),
        config: spec.dynamics.clone(),
        n_seeds: spec.n_seeds,
        base_seed: spec.base_seed,
        thresholds: spec.thresholds.clone(),
        frequencies: Frequencies::of(&kinds),
        hitting_times: aggregate_hitting(&outcomes, spec.params.r),
        instability: Instability {
            level: spec.thresholds.instability_level,
            drop: spec.thresholds.instability_drop,
            unstable_seeds: outcomes.iter().filter(|o| o.unstable).map(|o| o.seed).collect(),
        },
        outcomes,
        failures,
        wall_clock_secs,
    };
    Ok(ExperimentRun { summary, trajectories })
}

/// CSV with header `step,tau,m_1_1,…,m_r_r` and, when eigenvalues were
/// recorded, `theta_1,…,theta_r`. Indices in the header are 1-based.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let r = traj.corr.first().map_or(0, |m| m.r());
    let mut out = String::from("step,tau");
    for i in 1..=r {
        for j in 1..=r {
            let _ = write!(out, ",m_{i}_{j}");
        }
    }
    if traj.eigs.is_some() {
        for i in 1..=r {
            let _ = write!(out, ",theta_{i}");
        }
    }
    out.push('\n');
    for (k, m) in traj.corr.iter().enumerate() {
        let _ = write!(out, "{},{}", traj.steps[k], traj.tau[k]);
        for i in 0..r {
            for j in 0..r {
                let _ = write!(out, ",{}", m.matrix()[(i, j)]);
            }
        }
        if let Some(eigs) = &traj.eigs {
            for th in &eigs[k] {
                let _ = write!(out, ",{th}");
            }
        }
        out.push('\n');
    }
    out
}

impl ExperimentRun {
    /// Writes `summary.json` and one `seed_<k>.csv` per completed seed into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&self.summary)?;
        json.push('\n');
        fs::write(dir.join("summary.json"), json)?;
        for (k, traj) in &self.trajectories {
            fs::write(dir.join(format!("seed_{k}.csv")), trajectory_csv(traj))?;
        }
        Ok(())
    }
}

/// Preset names accepted by [`figure_preset`].
pub const PRESETS: [&str; 10] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10"];

fn population_spec(name: &str, p: u32, lambdas: &[f64], tau_max: f64, record_eigs: bool, stop: bool) -> Result<ExperimentSpec> {
    let params = ModelParams::new(p, POPULATION_INIT_N, lambdas.to_vec(), 0.0, NoiseDist::Gaussian)?;
    let dtau = IntegrationConfig::default_dtau(&params);
    let n_steps = (tau_max / dtau).ceil() as u64;
    Ok(ExperimentSpec {
        preset: Some(name.to_string()),
        params,
        basis: SpikeBasis::Canonical,
        dynamics: Dynamics::Population(PopulationSettings {
            dtau,
            n_steps,
            method: Method::Rk4,
            record_stride: (n_steps / 2000).min((1.0 / dtau).ceil() as u64).max(1),
            record_eigs,
            init_n: POPULATION_INIT_N,
            stop_within: stop.then_some(1e-3),
        }),
        n_seeds: 1,
        base_seed: 0,
        thresholds: Thresholds::default(),
    })
}

fn online_spec(name: &str, p: u32, lambdas: &[f64], delta_over_n: f64, steps: u64, thresholds: Thresholds) -> Result<ExperimentSpec> {
    let n = 500;
    let params = ModelParams::new(p, n, lambdas.to_vec(), 1.0, NoiseDist::Gaussian)?;
    Ok(ExperimentSpec {
        preset: Some(name.to_string()),
        params,
        basis: SpikeBasis::Canonical,
        dynamics: Dynamics::Online(OnlineSettings {
            delta: delta_over_n * n as f64,
            steps,
            backend: NoiseBackend::GaussianImplicit,
            record_stride: 1,
            record_eigs: false,
        }),
        n_seeds: 10,
        base_seed: 0,
        thresholds,
    })
}

/// Parameters of the named figure. Population figures integrate the effective
/// dynamics from initial correlations of order `1/√(10⁶)`; online figures run
/// SGD at N = 500 with σ = 1 and Gaussian noise.
pub fn figure_preset(name: &str) -> Result<ExperimentSpec> {
    match name {
        "fig1" | "fig9" => population_spec(name, 3, &[3.0, 1.0], 100_000.0, false, true),
        "fig2" => population_spec(name, 3, &[1.0; 4], 100_000.0, false, true),
        "fig3" => population_spec(name, 2, &[3.0, 1.0], 100.0, false, true),
        "fig4" => population_spec(name, 2, &[10.0, 5.0, 2.0, 1.0], 100.0, false, true),
        "fig5" => population_spec(name, 2, &[1.0, 1.0], 20.0, true, false),
        "fig10" => population_spec(name, 2, &[2.0, 1.0], 100.0, false, true),
        "fig6" => online_spec(name, 3, &[3.0, 2.0, 1.0], 0.0003, 3200, Thresholds { eps: 0.1, ..Thresholds::default() }),
        "fig7" => online_spec(name, 2, &[3.0, 2.0, 1.0], 0.002, 230, Thresholds { eps: 0.2, ..Thresholds::default() }),
        "fig8" => online_spec(name, 2, &[2.0, 1.0], 0.006, 70, Thresholds::default()),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}
