//! Online SGD on the Stiefel manifold:
//! `X_ℓ = R_{X_{ℓ−1}}(−(δ/N) ∇_St L(X_{ℓ−1}; Y^ℓ))` with a fresh observation per step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{population_gradient, GroundTruth, ModelParams};
use crate::noise::{sample_euclidean_noise_grad, NoiseBackend};
use crate::population::{CorrelationMatrix, PopulationState};
use crate::rng::Streams;
use crate::stiefel::{polar_retract, project_tangent, StiefelPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub delta: f64,
    pub steps: u64,
    pub backend: NoiseBackend,
    pub record_stride: u64,
    pub seed: u64,
    /// Also record the eigenvalues of G = MMᵀ at every snapshot.
    pub record_eigs: bool,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParams(format!("step size δ must be ≥ 0, got {}", self.delta)));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidParams("record stride must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Population time advanced by one step, δ/√N.
    pub fn dtau(&self, n: usize) -> f64 {
        self.delta / (n as f64).sqrt()
    }
}

/// Snapshots of the correlations along a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<u64>,
    pub tau: Vec<f64>,
    pub corr: Vec<CorrelationMatrix>,
    pub eigs: Option<Vec<Vec<f64>>>,
    pub final_x: Option<StiefelPoint>,
    /// Largest ‖XᵀX − I‖_F seen over all steps, not only recorded ones.
    pub max_orthonormality_residual: f64,
    /// Largest ‖XᵀU + UᵀX‖_F over all Riemannian gradients U.
    pub max_tangency_residual: f64,
}

impl Trajectory {
    /// Wraps a population run; step k is the k-th recorded state.
    pub fn from_population(states: &[PopulationState], record_eigs: bool) -> Self {
        let corr: Vec<CorrelationMatrix> = states.iter().map(|s| s.m.clone()).collect();
        let eigs = record_eigs.then(|| corr.iter().map(|m| linalg::sym_eigenvalues_desc(&m.gram())).collect());
        Self {
            steps: (0..states.len() as u64).collect(),
            tau: states.iter().map(|s| s.tau).collect(),
            corr,
            eigs,
            final_x: None,
            max_orthonormality_residual: 0.0,
            max_tangency_residual: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.corr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corr.is_empty()
    }

    pub fn last(&self) -> Option<&CorrelationMatrix> {
        self.corr.last()
    }
}

struct StepResult {
    x: StiefelPoint,
    tangency: f64,
}

fn step_inner(x: &StiefelPoint, gt: &GroundTruth, params: &ModelParams, config: &SgdConfig, streams: &Streams, step: u64) -> Result<StepResult> {
    let noise = sample_euclidean_noise_grad(x, params, config.backend, streams, step)?;
    let grad = noise.into_matrix() + population_gradient(x, gt, params)?;
    if !linalg::all_finite(&grad) {
        return Err(Error::NonFinite { what: "gradient", step });
    }
    let u = project_tangent(x, &grad)?;
    let tangency = u.tangency_residual(x);
    let scale = -config.delta / params.n as f64;
    let next = polar_retract(x, &(u.into_matrix() * scale)).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    })?;
    if !linalg::all_finite(next.matrix()) {
        return Err(Error::NonFinite { what: "iterate", step });
    }
    Ok(StepResult { x: next, tangency })
}

/// One SGD step. `step` addresses the noise stream, so the result depends
/// only on `(config.seed, step)` and the inputs.
pub fn sgd_step(x: &StiefelPoint, gt: &GroundTruth, params: &ModelParams, config: &SgdConfig, step: u64) -> Result<StiefelPoint> {
    let streams = Streams::new(config.seed);
    Ok(step_inner(x, gt, params, config, &streams, step)?.x)
}

/// Runs `config.steps` steps from `x0`, recording step 0 and every
/// `record_stride`-th step after it.
pub fn run(params: &ModelParams, gt: &GroundTruth, x0: &StiefelPoint, config: &SgdConfig) -> Result<Trajectory> {
    params.validate()?;
    config.validate()?;
    config.backend.check(params)?;
    let streams = Streams::new(config.seed);
    let dtau = config.dtau(params.n);
    let mut traj = Trajectory {
        steps: Vec::new(),
        tau: Vec::new(),
        corr: Vec::new(),
        eigs: config.record_eigs.then(Vec::new),
        final_x: None,
        max_orthonormality_residual: x0.residual(),
        max_tangency_residual: 0.0,
    };
    let record = |traj: &mut Trajectory, k: u64, x: &StiefelPoint| {
        let m = gt.correlations(x);
        if let Some(e) = traj.eigs.as_mut() {
            e.push(linalg::sym_eigenvalues_desc(&m.gram()));
        }
        traj.steps.push(k);
        traj.tau.push(k as f64 * dtau);
        traj.corr.push(m);
    };
    record(&mut traj, 0, x0);
    let mut x = x0.clone();
    for k in 1..=config.steps {
        let out = step_inner(&x, gt, params, config, &streams, k).map_err(|e| e.at_step(k))?;
        x = out.x;
        traj.max_tangency_residual = traj.max_tangency_residual.max(out.tangency);
        traj.max_orthonormality_residual = traj.max_orthonormality_residual.max(x.residual());
        if k % config.record_stride == 0 {
            record(&mut traj, k, &x);
        }
    }
    traj.final_x = Some(x);
    Ok(traj)
}

/// Step-size rules of the recovery guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StepRule {
    /// p ≥ 3: `C_δ d₀ / (log N · N^{(p−3)/2})`.
    P3,
    /// p = 2, distinct SNRs:
    /// `C_δ d₀ N^{½·(1−c₀)/(1+c₀)·λ_r²/λ_1²} / log(2ε√N/γ₂)`.
    P2Separated { gamma2: f64, eps: f64, c0: f64 },
    /// p = 2, equal SNRs: `C_δ d₀ √N / log(N)²`.
    P2Equal,
}

pub fn prescribed_step_size(rule: StepRule, params: &ModelParams, d0: f64, c_delta: f64) -> Result<f64> {
    step_size(rule, params.p, params.n as f64, &params.lambdas, d0, c_delta)
}

/// [`prescribed_step_size`] with a real-valued dimension.
pub fn step_size(rule: StepRule, p: u32, n: f64, lambdas: &[f64], d0: f64, c_delta: f64) -> Result<f64> {
    let base = c_delta * d0;
    match rule {
        StepRule::P3 => {
            if p < 3 {
                return Err(Error::Config(format!("this rule needs p ≥ 3, got p = {p}")));
            }
            Ok(base / (n.ln() * n.powf((p as f64 - 3.0) / 2.0)))
        }
        StepRule::P2Separated { gamma2, eps, c0 } => {
            if p != 2 {
                return Err(Error::Config(format!("this rule needs p = 2, got p = {p}")));
            }
            if !(c0 > 0.0 && c0 < 1.0) || !(gamma2 > 0.0) || !(eps > 0.0) || lambdas.is_empty() {
                return Err(Error::Config("need c₀ ∈ (0, 1), γ₂ > 0, ε > 0 and at least one SNR".into()));
            }
            let (l1, lr) = (lambdas[0], lambdas[lambdas.len() - 1]);
            let expo = 0.5 * (1.0 - c0) / (1.0 + c0) * (lr * lr) / (l1 * l1);
            Ok(base * n.powf(expo) / (2.0 * eps * n.sqrt() / gamma2).ln())
        }
        StepRule::P2Equal => {
            if p != 2 || lambdas.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config("this rule needs p = 2 and equal SNRs".into()));
            }
            Ok(base * n.sqrt() / n.ln().powi(2))
        }
    }
}

/// Explicit starting correlations as a frame: the first r rows of X are `m0`
/// (canonical spikes), the remaining mass goes to the next r coordinates.
pub fn frame_with_correlations(n: usize, m0: &DMatrix<f64>) -> Result<StiefelPoint> {
    let r = m0.nrows();
    if 2 * r > n {
        return Err(Error::Dimension(format!("need N ≥ 2r to embed correlations, got N = {n}, r = {r}")));
    }
    // X = [M0; (I − M0ᵀM0)^{1/2}; 0] has XᵀX = I.
    let comp = linalg::sqrt_psd(&(DMatrix::<f64>::identity(r, r) - m0.tr_mul(m0)));
    let mut x = DMatrix::zeros(n, r);
    x.rows_mut(0, r).copy_from(m0);
    x.rows_mut(r, r).copy_from(&comp);
    StiefelPoint::new(x)
}
