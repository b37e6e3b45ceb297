//! Per-step noise gradient `∇H(X)` of the online loss.
//!
//! Column i of the Euclidean gradient is `λ_i p Σ W_{k,k_1,…,k_{p−1}} (x_i)_{k_1}⋯(x_i)_{k_{p−1}}`,
//! contracting the trailing p−1 indices of an unsymmetrized tensor. A fresh W is
//! drawn every step.
//!
//! Two samplers produce it. `Explicit` streams the entries of W row by row and
//! contracts on the fly. `GaussianImplicit` uses that the rows of the result are
//! independent with within-row covariance `p²σ²⟨x_i, x_j⟩^{p−1}` (before the λ
//! scaling), which for Gaussian W is the full law.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{draw_unit, tensor_entries, ModelParams, NoiseDist};
use crate::rng::{Role, Streams};
use crate::stiefel::{project_tangent, StiefelPoint, TangentVector};

/// Default cap on the number of tensor entries the explicit sampler will draw per step.
pub const DEFAULT_EXPLICIT_BUDGET: u64 = 50_000_000;

/// Row counts above which the explicit contraction fans out over threads.
const PAR_THRESHOLD: u128 = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum NoiseBackend {
    Explicit { budget: u64 },
    #[serde(rename = "implicit")]
    GaussianImplicit,
}

impl Default for NoiseBackend {
    fn default() -> Self {
        NoiseBackend::GaussianImplicit
    }
}

impl NoiseBackend {
    pub fn explicit() -> Self {
        NoiseBackend::Explicit { budget: DEFAULT_EXPLICIT_BUDGET }
    }

    /// Rejects combinations that cannot produce the requested law.
    pub fn check(&self, params: &ModelParams) -> Result<()> {
        match *self {
            NoiseBackend::GaussianImplicit if params.noise != NoiseDist::Gaussian => Err(Error::Config(
                "the implicit backend only samples Gaussian noise; use the explicit backend".into(),
            )),
            NoiseBackend::Explicit { budget } => {
                let needed = tensor_entries(params.n, params.p);
                if needed > budget as u128 {
                    Err(Error::BudgetExceeded { needed, budget })
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Euclidean noise gradient at a point, one column per estimator column.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGradient(DMatrix<f64>);

impl NoiseGradient {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Draws the noise gradient for step `step`. Randomness comes from the
/// `Noise` role of `streams` so that the result depends only on `(seed, step)`.
pub fn sample_euclidean_noise_grad(
    x: &StiefelPoint,
    params: &ModelParams,
    backend: NoiseBackend,
    streams: &Streams,
    step: u64,
) -> Result<NoiseGradient> {
    backend.check(params)?;
    if x.n() != params.n || x.r() != params.r {
        return Err(Error::Dimension(format!("X is {}×{}, params say N = {}, r = {}", x.n(), x.r(), params.n, params.r)));
    }
    let mut e = if params.sigma == 0.0 {
        DMatrix::zeros(params.n, params.r)
    } else {
        match backend {
            NoiseBackend::GaussianImplicit => implicit(x, params, streams, step)?,
            NoiseBackend::Explicit { .. } => explicit(x, params, streams, step),
        }
    };
    for (mut col, l) in e.column_iter_mut().zip(&params.lambdas) {
        col *= *l;
    }
    if !linalg::all_finite(&e) {
        return Err(Error::NonFinite { what: "noise gradient", step });
    }
    Ok(NoiseGradient(e))
}

/// Within-row covariance `p²σ²⟨x_i, x_j⟩^{p−1}` of the unscaled gradient.
pub fn row_covariance(x: &StiefelPoint, params: &ModelParams) -> DMatrix<f64> {
    let scale = (params.p as f64 * params.sigma).powi(2);
    x.matrix().tr_mul(x.matrix()).map(|g| scale * g.powi(params.p as i32 - 1))
}

fn implicit(x: &StiefelPoint, params: &ModelParams, streams: &Streams, step: u64) -> Result<DMatrix<f64>> {
    let root = linalg::sqrt_psd(&row_covariance(x, params));
    let mut rng = streams.stream(Role::Noise, 0, step);
    let (n, r) = (params.n, params.r);
    // z is drawn row by row so the draw order does not depend on storage layout
    let mut z = DMatrix::<f64>::zeros(n, r);
    for k in 0..n {
        for j in 0..r {
            z[(k, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(z * root)
}

fn explicit(x: &StiefelPoint, params: &ModelParams, streams: &Streams, step: u64) -> DMatrix<f64> {
    let (n, r, p) = (params.n, params.r, params.p);
    let cols: Vec<Vec<f64>> = x.matrix().column_iter().map(|c| c.iter().copied().collect()).collect();
    let row = |k: usize| -> Vec<f64> {
        let mut rng = streams.stream(Role::Noise, k as u64 + 1, step);
        let slice: Vec<f64> = (0..n.pow(p - 1)).map(|_| params.sigma * draw_unit(params.noise, &mut rng)).collect();
        cols.iter().map(|c| p as f64 * contract_trailing(&slice, n, c)).collect()
    };
    let rows: Vec<Vec<f64>> = if tensor_entries(n, p) > PAR_THRESHOLD {
        (0..n).into_par_iter().map(row).collect()
    } else {
        (0..n).map(row).collect()
    };
    DMatrix::from_fn(n, r, |k, i| rows[k][i])
}

/// Contracts a row-major block of N^q entries against `x^{⊗q}`, one index at a time
/// starting from the last.
fn contract_trailing(block: &[f64], n: usize, x: &[f64]) -> f64 {
    let mut cur: Vec<f64> = block.to_vec();
    while cur.len() > 1 {
        cur = cur.chunks_exact(n).map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    }
    cur[0]
}

/// `Π_X(E)`, the Riemannian noise gradient.
pub fn riemannian_noise_grad(x: &StiefelPoint, e: &NoiseGradient) -> Result<TangentVector> {
    project_tangent(x, e.matrix())
}

/// `½ p σ (Σ_j λ_j²)^{1/2}`: scale of the sub-Gaussian bound on `⟨v, (∇_St H)_i⟩`.
pub fn subgaussian_bound(params: &ModelParams) -> f64 {
    0.5 * params.p as f64 * params.sigma * params.lambdas.iter().map(|l| l * l).sum::<f64>().sqrt()
}

/// `p²σ² Σ_j λ_j²`, a bound on `Var⟨v, (∇_St H)_i⟩` that holds for every unit v.
///
/// [`subgaussian_bound`] squared is smaller by a factor 4 and is exceeded when v
/// is orthogonal to X, where the variance equals `p²σ²λ_i²`.
pub fn projection_variance_bound(params: &ModelParams) -> f64 {
    (params.p as f64 * params.sigma).powi(2) * params.lambdas.iter().map(|l| l * l).sum::<f64>()
}

/// Exact `Var⟨v, Π_X(E)_i⟩` for any noise law with i.i.d. entries of variance σ².
pub fn projection_variance(x: &StiefelPoint, v: &[f64], i: usize, params: &ModelParams) -> Result<f64> {
    let xm = x.matrix();
    let (n, r) = (xm.nrows(), xm.ncols());
    if v.len() != n || i >= r {
        return Err(Error::Dimension(format!("v has length {}, column {i} of an {n}×{r} frame", v.len())));
    }
    let v = nalgebra::DVector::from_column_slice(v);
    let c = xm.tr_mul(&v);
    // ⟨v, Π_X(E)_i⟩ = Σ_{k,l} A_{kl} E_{kl}; build A.
    let mut a = DMatrix::<f64>::zeros(n, r);
    a.column_mut(i).copy_from(&(&v - xm * &c * 0.5));
    for j in 0..r {
        let xi = xm.column(i).clone_owned();
        a.column_mut(j).axpy(-0.5 * c[j], &xi, 1.0);
    }
    let cov = row_covariance(x, params);
    let ata = a.tr_mul(&a);
    let mut var = 0.0;
    for l in 0..r {
        for m in 0..r {
            var += ata[(l, m)] * params.lambdas[l] * params.lambdas[m] * cov[(l, m)];
        }
    }
    Ok(var)
}

/// Explicit `α₂` in `E‖𝒢‖_F ≤ α₂ N` for the Gram matrix of the full Riemannian
/// gradient: `8p² Σ_i (2Kσ²λ_i² + Σ_j λ_i²λ_j²)`.
pub fn gram_bound_constant(params: &ModelParams, k_mgf: f64) -> f64 {
    let p2 = (params.p as f64).powi(2);
    let s2: f64 = params.lambdas.iter().map(|l| l * l).sum();
    8.0 * p2
        * params
            .lambdas
            .iter()
            .map(|l| l * l * 2.0 * k_mgf * params.sigma * params.sigma + l * l * s2)
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_ground_truth, population_gradient, SpikeBasis};
    use crate::stiefel::sample_uniform;

    fn params(p: u32, n: usize, lambdas: &[f64], sigma: f64) -> ModelParams {
        ModelParams::new(p, n, lambdas.to_vec(), sigma, NoiseDist::Gaussian).unwrap()
    }

    fn point(n: usize, r: usize, seed: u64) -> StiefelPoint {
        sample_uniform(n, r, &mut Streams::new(seed).stream(Role::Test, 0, 0)).unwrap()
    }

    /// Running first and second moments of a fixed-length vector.
    struct Moments {
        n: f64,
        sum: Vec<f64>,
        cross: Vec<f64>,
        fourth: Vec<f64>,
    }

    impl Moments {
        fn new(d: usize) -> Self {
            Self { n: 0.0, sum: vec![0.0; d], cross: vec![0.0; d * d], fourth: vec![0.0; d * d] }
        }

        fn push(&mut self, v: &[f64]) {
            let d = v.len();
            self.n += 1.0;
            for a in 0..d {
                self.sum[a] += v[a];
                for b in 0..d {
                    let s = v[a] * v[b];
                    self.cross[a * d + b] += s;
                    self.fourth[a * d + b] += s * s;
                }
            }
        }

        /// Second moment E[v_a v_b] and its standard error.
        fn second(&self, a: usize, b: usize) -> (f64, f64) {
            let d = self.sum.len();
            let m = self.cross[a * d + b] / self.n;
            let var = self.fourth[a * d + b] / self.n - m * m;
            (m, (var / self.n).sqrt())
        }
    }

    #[test]
    fn zero_sigma_gives_zero() {
        let prm = params(3, 5, &[2.0, 1.0], 0.0);
        let x = point(5, 2, 0);
        for backend in [NoiseBackend::GaussianImplicit, NoiseBackend::explicit()] {
            let e = sample_euclidean_noise_grad(&x, &prm, backend, &Streams::new(1), 0).unwrap();
            assert_eq!(e.matrix(), &DMatrix::zeros(5, 2));
        }
    }

    #[test]
    fn implicit_rejects_rademacher() {
        let prm = ModelParams::new(2, 4, vec![1.0], 1.0, NoiseDist::Rademacher).unwrap();
        let err = sample_euclidean_noise_grad(&point(4, 1, 0), &prm, NoiseBackend::GaussianImplicit, &Streams::new(0), 0);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(sample_euclidean_noise_grad(&point(4, 1, 0), &prm, NoiseBackend::explicit(), &Streams::new(0), 0).is_ok());
    }

    #[test]
    fn explicit_refuses_large_tensors() {
        let prm = params(4, 200, &[1.0], 1.0);
        let err = sample_euclidean_noise_grad(&point(200, 1, 0), &prm, NoiseBackend::explicit(), &Streams::new(0), 0);
        assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn explicit_matches_materialized_tensor() {
        // Rebuild the same W rows from the streams and differentiate through NoiseTensor.
        let prm = params(3, 4, &[1.5, 0.5], 1.0);
        let x = point(4, 2, 3);
        let streams = Streams::new(9);
        let e = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::explicit(), &streams, 5).unwrap();
        let mut data = Vec::new();
        for k in 0..4u64 {
            let mut rng = streams.stream(Role::Noise, k + 1, 5);
            data.extend((0..16).map(|_| draw_unit(NoiseDist::Gaussian, &mut rng)));
        }
        let w = crate::model::NoiseTensor::from_vec(4, 3, data).unwrap();
        for i in 0..2 {
            let g = w.gradient(x.matrix().column(i).as_slice());
            for k in 0..4 {
                assert!((e.matrix()[(k, i)] - prm.lambdas[i] * g[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_serial_explicit_agree() {
        // Above the threshold the rows fan out; the rows are the same either way.
        let prm = params(3, 50, &[1.0], 1.0);
        let x = point(50, 1, 1);
        let streams = Streams::new(2);
        let a = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::explicit(), &streams, 0).unwrap();
        let b = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::explicit(), &streams, 0).unwrap();
        assert_eq!(a, b);
        let serial = explicit(&x, &prm, &streams, 0);
        assert_eq!(a.matrix(), &serial);
    }

    #[test]
    fn per_entry_variance_p2_both_backends() {
        let prm = params(2, 3, &[1.0, 0.5], 1.0);
        let x = point(3, 2, 4);
        for backend in [NoiseBackend::GaussianImplicit, NoiseBackend::explicit()] {
            let mut mom = Moments::new(6);
            let streams = Streams::new(11);
            for s in 0..100_000 {
                let e = sample_euclidean_noise_grad(&x, &prm, backend, &streams, s).unwrap();
                mom.push(e.matrix().as_slice());
            }
            for i in 0..2 {
                for k in 0..3 {
                    let idx = i * 3 + k;
                    let (m, se) = mom.second(idx, idx);
                    let target = 4.0 * prm.lambdas[i].powi(2);
                    assert!((m - target).abs() < 3.0 * se, "{backend:?} ({k},{i}): {m} vs {target} ± {se}");
                }
            }
        }
    }

    #[test]
    fn per_entry_variance_p3_single_column() {
        let prm = params(3, 2, &[1.0], 1.0);
        let x = point(2, 1, 6);
        let mut mom = Moments::new(2);
        let streams = Streams::new(12);
        for s in 0..100_000 {
            let e = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::explicit(), &streams, s).unwrap();
            mom.push(e.matrix().as_slice());
        }
        for k in 0..2 {
            let (m, se) = mom.second(k, k);
            assert!((m - 9.0).abs() < 3.0 * se, "{m} ± {se}");
        }
    }

    #[test]
    fn riemannian_gradient_is_tangent() {
        let prm = params(3, 20, &[3.0, 2.0, 1.0], 1.0);
        let x = point(20, 3, 8);
        let e = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::GaussianImplicit, &Streams::new(0), 0).unwrap();
        let u = riemannian_noise_grad(&x, &e).unwrap();
        assert!(u.tangency_residual(&x) <= 1e-10);
        let zero = NoiseGradient(DMatrix::zeros(20, 3));
        assert_eq!(riemannian_noise_grad(&x, &zero).unwrap().matrix(), &DMatrix::zeros(20, 3));
    }

    #[test]
    fn subgaussian_bound_examples() {
        assert!((subgaussian_bound(&params(2, 5, &[1.0], 1.0)) - 1.0).abs() < 1e-15);
        assert!((subgaussian_bound(&params(3, 5, &[1.0, 1.0], 1.0)) - 1.5 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(subgaussian_bound(&params(3, 5, &[1.0, 1.0], 0.0)), 0.0);
    }

    #[test]
    fn projection_variance_orthogonal_direction() {
        let prm = params(3, 6, &[2.0, 1.0], 1.0);
        let x = StiefelPoint::new(DMatrix::from_fn(6, 2, |i, j| if i == j { 1.0 } else { 0.0 })).unwrap();
        let v = [0.0, 0.0, 0.6, 0.8, 0.0, 0.0];
        let var = projection_variance(&x, &v, 0, &prm).unwrap();
        assert!((var - 9.0 * 4.0).abs() < 1e-12);
        assert!(var > subgaussian_bound(&prm).powi(2));
        assert!(var <= projection_variance_bound(&prm));
    }

    #[test]
    fn projection_mean_and_variance_monte_carlo() {
        let prm = params(2, 5, &[1.5, 1.0], 1.0);
        let mut rng = Streams::new(21).stream(Role::Test, 0, 0);
        for case in 0..50u64 {
            let x = sample_uniform(5, 2, &mut rng).unwrap();
            let v = sample_uniform(5, 1, &mut rng).unwrap().into_matrix();
            let i = (case % 2) as usize;
            let exact = projection_variance(&x, v.as_slice(), i, &prm).unwrap();
            assert!(exact <= projection_variance_bound(&prm) + 1e-12);
            let streams = Streams::new(1000 + case);
            let draws = 4_000;
            let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
            for s in 0..draws {
                let e = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::GaussianImplicit, &streams, s).unwrap();
                let u = riemannian_noise_grad(&x, &e).unwrap();
                let y = u.matrix().column(i).dot(&v.column(0));
                s1 += y;
                s2 += y * y;
                s4 += y.powi(4);
            }
            let nf = draws as f64;
            let mean = s1 / nf;
            let m2 = s2 / nf;
            assert!(mean.abs() < 4.0 * (m2 / nf).sqrt(), "case {case}: mean {mean}");
            let se2 = ((s4 / nf - m2 * m2) / nf).sqrt();
            assert!((m2 - exact).abs() < 4.0 * se2, "case {case}: {m2} vs {exact} ± {se2}");
        }
    }

    #[test]
    fn gram_norm_within_constant() {
        let prm = params(3, 40, &[2.0, 1.0], 1.0);
        let mut rng = Streams::new(31).stream(Role::Test, 0, 0);
        let gt = make_ground_truth(&prm, SpikeBasis::Canonical, &mut rng).unwrap();
        let x = sample_uniform(40, 2, &mut rng).unwrap();
        let pop = population_gradient(&x, &gt, &prm).unwrap();
        let streams = Streams::new(32);
        let mut total = 0.0;
        for s in 0..1000 {
            let e = sample_euclidean_noise_grad(&x, &prm, NoiseBackend::GaussianImplicit, &streams, s).unwrap();
            let g = project_tangent(&x, &(e.into_matrix() + &pop)).unwrap().into_matrix();
            total += g.tr_mul(&g).norm();
        }
        let mean = total / 1000.0 / 40.0;
        assert!(mean <= gram_bound_constant(&prm, 1.0), "{mean}");
    }

    #[test]
    fn row_covariance_p2_is_scaled_identity() {
        let prm = params(2, 9, &[1.0, 1.0, 1.0], 0.5);
        let c = row_covariance(&point(9, 3, 2), &prm);
        assert!((c - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
    }
}
