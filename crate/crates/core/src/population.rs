//! Deterministic dynamics of the r×r correlation matrix M = VᵀX.
//!
//! Time τ is the population clock with the √N removed from the drift, so one
//! SGD step of size δ advances τ by δ/√N.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{weighted_power, ModelParams};

/// Slack on singular values of M above 1.
pub const CORR_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix(DMatrix<f64>);

impl CorrelationMatrix {
    /// Checks that M is square with singular values at most `1 + CORR_TOL`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Dimension(format!("correlation matrix must be square, got {:?}", m.shape())));
        }
        if !linalg::all_finite(&m) {
            return Err(Error::NonFinite { what: "correlation matrix", step: 0 });
        }
        let top = linalg::sym_eigenvalues_desc(&(&m * m.transpose()))[0];
        if top > (1.0 + CORR_TOL).powi(2) {
            return Err(Error::InvalidParams(format!("correlation matrix has singular value {}", top.sqrt())));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn r(&self) -> usize {
        self.0.nrows()
    }

    /// `G = MMᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationState {
    pub tau: f64,
    pub m: CorrelationMatrix,
}

/// `dM/dτ`. Entry (i, j) is
/// `pλ_iλ_j m_ij^{p−1} − (p/2) Σ_{k,ℓ} λ_k m_iℓ m_kj m_kℓ (λ_j m_kj^{p−2} + λ_ℓ m_kℓ^{p−2})`,
/// evaluated as `pB − (p/2)(GB + MBᵀM)` with `B_kj = λ_kλ_j m_kj^{p−1}`.
pub fn drift(m: &DMatrix<f64>, params: &ModelParams) -> DMatrix<f64> {
    let p = params.p as f64;
    let b = weighted_power(m, &params.lambdas, params.p as i32 - 1);
    let g = m * m.transpose();
    let correction = &g * &b + m * b.transpose() * m;
    b * p - correction * (0.5 * p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!("unknown integration method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub dtau: f64,
    pub n_steps: u64,
    pub method: Method,
    pub record_stride: u64,
}

impl IntegrationConfig {
    /// `min(1e-2, 0.1/(pλ_1²))`.
    pub fn default_dtau(params: &ModelParams) -> f64 {
        let l1 = params.lambdas[0];
        if l1 == 0.0 {
            1e-2
        } else {
            (0.1 / (params.p as f64 * l1 * l1)).min(1e-2)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dtau > 0.0 && self.dtau.is_finite()) {
            return Err(Error::InvalidParams(format!("dtau must be positive, got {}", self.dtau)));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidParams("record stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Magnitude below which an entry of M is set to zero after each step.
///
/// Eliminated correlations decay geometrically. Left alone, their powers and
/// products reach the subnormal range, where every step gets an order of
/// magnitude slower.
const FLUSH_BELOW: f64 = 1e-100;

fn flush_tiny(m: &mut [f64]) {
    for x in m.iter_mut().filter(|x| x.abs() < FLUSH_BELOW) {
        *x = 0.0;
    }
}

/// Allocation-free fixed-step integrator over column-major r×r buffers.
struct Stepper {
    r: usize,
    p: f64,
    pm1: i32,
    lambdas: Vec<f64>,
    b: Vec<f64>,
    g: Vec<f64>,
    t: Vec<f64>,
    y: Vec<f64>,
    k: [Vec<f64>; 4],
}

impl Stepper {
    fn new(params: &ModelParams) -> Self {
        let r = params.r;
        let z = vec![0.0; r * r];
        Self {
            r,
            p: params.p as f64,
            pm1: params.p as i32 - 1,
            lambdas: params.lambdas.clone(),
            b: z.clone(),
            g: z.clone(),
            t: z.clone(),
            y: z.clone(),
            k: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    /// Same formula as [`drift`], written into `out`. Small r are dispatched to
    /// constant sizes so the loops unroll.
    #[allow(clippy::too_many_arguments)]
    fn drift(r: usize, p: f64, pm1: i32, lambdas: &[f64], m: &[f64], b: &mut [f64], g: &mut [f64], t: &mut [f64], out: &mut [f64]) {
        match r {
            1 => Self::drift_sized(1, p, pm1, lambdas, m, b, g, t, out),
            2 => Self::drift_sized(2, p, pm1, lambdas, m, b, g, t, out),
            3 => Self::drift_sized(3, p, pm1, lambdas, m, b, g, t, out),
            4 => Self::drift_sized(4, p, pm1, lambdas, m, b, g, t, out),
            _ => Self::drift_sized(r, p, pm1, lambdas, m, b, g, t, out),
        }
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn drift_sized(r: usize, p: f64, pm1: i32, lambdas: &[f64], m: &[f64], b: &mut [f64], g: &mut [f64], t: &mut [f64], out: &mut [f64]) {
        let n = r * r;
        let (m, b, g, t, out) = (&m[..n], &mut b[..n], &mut g[..n], &mut t[..n], &mut out[..n]);
        let lambdas = &lambdas[..r];
        let pow = |x: f64| match pm1 {
            1 => x,
            2 => x * x,
            3 => x * x * x,
            _ => x.powi(pm1),
        };
        for j in 0..r {
            for i in 0..r {
                b[i + j * r] = lambdas[i] * lambdas[j] * pow(m[i + j * r]);
            }
        }
        g.fill(0.0);
        t.fill(0.0);
        // g = M Mᵀ, t = Bᵀ M
        for l in 0..r {
            for j in 0..r {
                let m_jl = m[j + l * r];
                let m_lj = m[l + j * r];
                for i in 0..r {
                    g[i + j * r] += m[i + l * r] * m_jl;
                    t[i + j * r] += b[l + i * r] * m_lj;
                }
            }
        }
        let half = 0.5 * p;
        for j in 0..r {
            for i in 0..r {
                out[i + j * r] = p * b[i + j * r];
            }
            for l in 0..r {
                let b_lj = b[l + j * r];
                let t_lj = t[l + j * r];
                for i in 0..r {
                    out[i + j * r] -= half * (g[i + l * r] * b_lj + m[i + l * r] * t_lj);
                }
            }
        }
    }

    fn step(&mut self, m: &mut [f64], h: f64, method: Method) {
        let Self { r, p, pm1, lambdas, b, g, t, y, k } = self;
        let (r, p, pm1) = (*r, *p, *pm1);
        let [k1, k2, k3, k4] = k;
        Self::drift(r, p, pm1, lambdas, m, b, g, t, k1);
        if method == Method::Euler {
            m.iter_mut().zip(k1.iter()).for_each(|(x, d)| *x += h * d);
            flush_tiny(m);
            return;
        }
        y.iter_mut().zip(m.iter().zip(k1.iter())).for_each(|(y, (x, d))| *y = x + 0.5 * h * d);
        Self::drift(r, p, pm1, lambdas, y, b, g, t, k2);
        y.iter_mut().zip(m.iter().zip(k2.iter())).for_each(|(y, (x, d))| *y = x + 0.5 * h * d);
        Self::drift(r, p, pm1, lambdas, y, b, g, t, k3);
        y.iter_mut().zip(m.iter().zip(k3.iter())).for_each(|(y, (x, d))| *y = x + h * d);
        Self::drift(r, p, pm1, lambdas, y, b, g, t, k4);
        for (idx, x) in m.iter_mut().enumerate() {
            *x += h / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
        flush_tiny(m);
    }
}

pub(crate) fn rk4(m: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let k1 = f(m);
    let k2 = f(&(m + &k1 * (0.5 * h)));
    let k3 = f(&(m + &k2 * (0.5 * h)));
    let k4 = f(&(m + &k3 * h));
    m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Fixed-step integration recording every state.
pub fn integrate(m0: &CorrelationMatrix, params: &ModelParams, dtau: f64, n_steps: u64, method: Method) -> Result<Vec<PopulationState>> {
    let cfg = IntegrationConfig { dtau, n_steps, method, record_stride: 1 };
    integrate_with(m0, params, &cfg, |_, _| false)
}

/// Fixed-step integration recording every `record_stride` steps plus the last
/// state. Stops early, after recording, once `stop(tau, M)` returns true.
pub fn integrate_with(
    m0: &CorrelationMatrix,
    params: &ModelParams,
    cfg: &IntegrationConfig,
    mut stop: impl FnMut(f64, &DMatrix<f64>) -> bool,
) -> Result<Vec<PopulationState>> {
    cfg.validate()?;
    if m0.r() != params.r {
        return Err(Error::Dimension(format!("M0 is {}×{}, params say r = {}", m0.r(), m0.r(), params.r)));
    }
    let mut out = vec![PopulationState { tau: 0.0, m: m0.clone() }];
    let mut m = m0.matrix().clone();
    if stop(0.0, &m) {
        return Ok(out);
    }
    let mut stepper = Stepper::new(params);
    for k in 1..=cfg.n_steps {
        stepper.step(m.as_mut_slice(), cfg.dtau, cfg.method);
        if !linalg::all_finite(&m) {
            return Err(Error::NonFinite { what: "population state", step: k });
        }
        let tau = k as f64 * cfg.dtau;
        let halt = stop(tau, &m);
        if halt || k % cfg.record_stride == 0 || k == cfg.n_steps {
            out.push(PopulationState { tau, m: CorrelationMatrix(m.clone()) });
        }
        if halt {
            break;
        }
    }
    Ok(out)
}

/// `λ² sym(G(I − G))`.
pub fn riccati_drift(g: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let residual = linalg::asymmetry(g);
    if residual > 1e-9 {
        return Err(Error::Asymmetric { residual });
    }
    let r = g.nrows();
    let prod = g * (DMatrix::<f64>::identity(r, r) - g);
    Ok((&prod + prod.transpose()) * (0.5 * lambda * lambda))
}

/// rk4 integration of the eigenvalue flow `Ġ = λ² G(I − G)`, recording every step.
pub fn integrate_riccati(g0: &DMatrix<f64>, lambda: f64, dtau: f64, n_steps: u64) -> Result<Vec<(f64, DMatrix<f64>)>> {
    riccati_drift(g0, lambda)?;
    let mut out = Vec::with_capacity(n_steps as usize + 1);
    out.push((0.0, g0.clone()));
    let mut g = g0.clone();
    let r = g.nrows();
    let f = |x: &DMatrix<f64>| {
        let prod = x * (DMatrix::<f64>::identity(r, r) - x);
        (&prod + prod.transpose()) * (0.5 * lambda * lambda)
    };
    for k in 1..=n_steps {
        g = rk4(&g, dtau, f);
        if !linalg::all_finite(&g) {
            return Err(Error::NonFinite { what: "Riccati state", step: k });
        }
        out.push((k as f64 * dtau, g.clone()));
    }
    Ok(out)
}

/// Solution of `θ̇ = rate·θ(1 − θ)` from `θ0`.
pub fn logistic(theta0: f64, rate: f64, tau: f64) -> f64 {
    let e = (rate * tau).exp();
    theta0 * e / (1.0 - theta0 + theta0 * e)
}

/// Predicted first time a correlation started at `γ/√N` reaches `ε`, ignoring
/// saturation. `tau` is population time, `steps` the equivalent SGD step count
/// `tau·√N/δ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HittingTimePrediction {
    pub tau: f64,
    pub steps: f64,
}

/// For p ≥ 3, `τ = (1 − (γ/(ε√N))^{p−2}) N^{(p−2)/2} / ((p−2) p λ_iλ_j γ^{p−2})`,
/// the exact passage time of `ṁ = pλ_iλ_j m^{p−1}`.
/// For p = 2, `τ = log(ε√N/γ) / (2λ_iλ_j)`.
pub fn predicted_hitting_time(gamma: f64, lambda_i: f64, lambda_j: f64, p: u32, delta: f64, n: f64, eps: f64) -> Result<HittingTimePrediction> {
    if p < 2 {
        return Err(Error::InvalidParams(format!("tensor order p must be ≥ 2, got {p}")));
    }
    if !(gamma > 0.0) || !(eps > 0.0 && eps <= 1.0) || !(delta > 0.0) || !(n >= 1.0) {
        return Err(Error::InvalidParams(format!("need γ > 0, ε ∈ (0, 1], δ > 0, N ≥ 1; got γ = {gamma}, ε = {eps}, δ = {delta}, N = {n}")));
    }
    let ll = lambda_i * lambda_j;
    let sqrt_n = n.sqrt();
    let tau = if p == 2 {
        (eps * sqrt_n / gamma).ln() / (2.0 * ll)
    } else {
        let q = (p - 2) as f64;
        (1.0 - (gamma / (eps * sqrt_n)).powf(q)) * n.powf(q / 2.0) / (q * p as f64 * ll * gamma.powf(q))
    };
    Ok(HittingTimePrediction { tau, steps: tau * sqrt_n / delta })
}

/// Level `N^{−(p−2)/(2p)}` above which a diagonal correlation starts suppressing
/// its row and column.
pub fn suppression_threshold(p: u32, n: f64) -> f64 {
    n.powf(-((p as f64 - 2.0) / (2.0 * p as f64)))
}

/// Level `N^{−(p−3)/(2(p−1))}` of the second microscopic scale. Diagnostic only.
pub fn secondary_threshold(p: u32, n: f64) -> f64 {
    n.powf(-((p as f64 - 3.0) / (2.0 * (p as f64 - 1.0))))
}
