//! The spiked tensor model `Y = W + √N Σ_i λ_i v_i^{⊗p}` and its loss
//! `L(X; Y) = H(X) + Φ(X)` split into a noise part and a population part.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::population::CorrelationMatrix;
use crate::stiefel::StiefelPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    Gaussian,
    Rademacher,
}

impl std::str::FromStr for NoiseDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseDist::Gaussian),
            "rademacher" => Ok(NoiseDist::Rademacher),
            other => Err(Error::Config(format!("unknown noise distribution `{other}`"))),
        }
    }
}

/// A problem instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p: u32,
    pub r: usize,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub sigma: f64,
    pub noise: NoiseDist,
}

impl ModelParams {
    pub fn new(p: u32, n: usize, lambdas: Vec<f64>, sigma: f64, noise: NoiseDist) -> Result<Self> {
        let params = Self { p, r: lambdas.len(), n, lambdas, sigma, noise };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidParams(format!("tensor order p must be ≥ 2, got {}", self.p)));
        }
        if self.r == 0 || self.r > self.n {
            return Err(Error::InvalidParams(format!("need 1 ≤ r ≤ N, got r = {}, N = {}", self.r, self.n)));
        }
        if self.lambdas.len() != self.r {
            return Err(Error::InvalidParams(format!("{} SNRs for r = {}", self.lambdas.len(), self.r)));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidParams("SNRs must be finite and non-negative".into()));
        }
        if self.lambdas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidParams("SNRs must be sorted non-increasing".into()));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidParams(format!("noise scale must be ≥ 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn sqrt_n(&self) -> f64 {
        (self.n as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpikeBasis {
    /// First r standard basis vectors.
    Canonical,
    /// First r columns of a Haar-random orthogonal matrix.
    Haar,
}

/// The spikes `V = [v_1, …, v_r]` as an orthonormal N×r matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    v: DMatrix<f64>,
}

impl GroundTruth {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        let res = linalg::orthonormality_residual(&v);
        if !(res <= 1e-10) {
            return Err(Error::InvalidParams(format!("spikes are not orthonormal: residual {res:e}")));
        }
        Ok(Self { v })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn r(&self) -> usize {
        self.v.ncols()
    }

    /// `M = VᵀX`, i.e. `m_ij = ⟨v_i, x_j⟩`.
    pub fn correlations(&self, x: &StiefelPoint) -> CorrelationMatrix {
        CorrelationMatrix::new_unchecked(self.v.tr_mul(x.matrix()))
    }
}

pub fn make_ground_truth<R: Rng + ?Sized>(params: &ModelParams, basis: SpikeBasis, rng: &mut R) -> Result<GroundTruth> {
    let (n, r) = (params.n, params.r);
    if r > n {
        return Err(Error::Dimension(format!("r = {r} spikes do not fit in N = {n}")));
    }
    let v = match basis {
        SpikeBasis::Canonical => DMatrix::from_fn(n, r, |i, j| if i == j { 1.0 } else { 0.0 }),
        SpikeBasis::Haar => {
            // Orthonormalize a Gaussian N×r matrix. QR with a sign fix on R's
            // diagonal yields Haar columns.
            let z = DMatrix::<f64>::from_fn(n, r, |_, _| rng.sample(StandardNormal));
            let qr = z.qr();
            let mut q = qr.q();
            let rdiag = qr.r().diagonal();
            for (j, d) in rdiag.iter().enumerate() {
                if *d < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            q
        }
    };
    Ok(GroundTruth { v })
}

fn check_shapes(x: &StiefelPoint, gt: &GroundTruth, params: &ModelParams) -> Result<()> {
    if x.n() != params.n || gt.matrix().nrows() != params.n || x.r() != params.r || gt.r() != params.r {
        return Err(Error::Dimension(format!(
            "X is {}×{}, V is {}×{}, params say N = {}, r = {}",
            x.n(),
            x.r(),
            gt.matrix().nrows(),
            gt.r(),
            params.n,
            params.r
        )));
    }
    Ok(())
}

/// `B_ij = λ_i λ_j m_ij^{p−1}`, the matrix that drives the population gradient.
pub(crate) fn weighted_power(m: &DMatrix<f64>, lambdas: &[f64], exponent: i32) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| lambdas[i] * lambdas[j] * m[(i, j)].powi(exponent))
}

/// `Φ(X) = −√N Σ_{i,j} λ_i λ_j m_ij^p`.
pub fn population_loss(x: &StiefelPoint, gt: &GroundTruth, params: &ModelParams) -> Result<f64> {
    check_shapes(x, gt, params)?;
    let m = gt.correlations(x);
    let s: f64 = weighted_power(m.matrix(), &params.lambdas, params.p as i32).sum();
    Ok(-params.sqrt_n() * s)
}

/// Euclidean gradient of Φ: column j is `−Σ_k p√N λ_k λ_j m_kj^{p−1} v_k`.
pub fn population_gradient(x: &StiefelPoint, gt: &GroundTruth, params: &ModelParams) -> Result<DMatrix<f64>> {
    check_shapes(x, gt, params)?;
    let m = gt.correlations(x);
    let b = weighted_power(m.matrix(), &params.lambdas, params.p as i32 - 1);
    Ok(gt.matrix() * b * (-(params.p as f64) * params.sqrt_n()))
}

/// A fully materialized noise tensor with N^p entries in row-major multi-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTensor {
    n: usize,
    p: u32,
    data: Vec<f64>,
}

/// Number of entries of an order-p tensor on ℝ^N, without overflow.
pub fn tensor_entries(n: usize, p: u32) -> u128 {
    (n as u128).saturating_pow(p)
}

impl NoiseTensor {
    pub fn from_vec(n: usize, p: u32, data: Vec<f64>) -> Result<Self> {
        if tensor_entries(n, p) != data.len() as u128 {
            return Err(Error::Dimension(format!("{} entries for an order-{p} tensor on ℝ^{n}", data.len())));
        }
        Ok(Self { n, p, data })
    }

    pub fn zeros(n: usize, p: u32, budget: u64) -> Result<Self> {
        let needed = tensor_entries(n, p);
        if needed > budget as u128 {
            return Err(Error::BudgetExceeded { needed, budget });
        }
        Ok(Self { n, p, data: vec![0.0; needed as usize] })
    }

    /// Draws i.i.d. entries of scale σ, refusing if N^p exceeds `budget`.
    pub fn sample<R: Rng + ?Sized>(n: usize, p: u32, sigma: f64, dist: NoiseDist, budget: u64, rng: &mut R) -> Result<Self> {
        let mut t = Self::zeros(n, p, budget)?;
        for w in t.data.iter_mut() {
            *w = sigma * draw_unit(dist, rng);
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `⟨W, x^{⊗p}⟩`.
    pub fn contract_full(&self, x: &[f64]) -> f64 {
        let rest = self.n.pow(self.p - 1);
        (0..self.n)
            .map(|k| x[k] * contract_slice(&self.data[k * rest..(k + 1) * rest], self.n, self.p - 1, x))
            .sum()
    }

    /// `(∇_x ⟨W, x^{⊗p}⟩)_k = p Σ W_{k,k_1,…,k_{p−1}} x_{k_1}⋯x_{k_{p−1}}`: the
    /// contraction runs over the trailing p−1 indices only.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let rest = self.n.pow(self.p - 1);
        let pf = self.p as f64;
        (0..self.n)
            .map(|k| pf * contract_slice(&self.data[k * rest..(k + 1) * rest], self.n, self.p - 1, x))
            .collect()
    }
}

/// One standardized noise entry.
#[inline]
pub(crate) fn draw_unit<R: Rng + ?Sized>(dist: NoiseDist, rng: &mut R) -> f64 {
    match dist {
        NoiseDist::Gaussian => rng.sample(StandardNormal),
        NoiseDist::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Contracts a row-major order-`order` block against `x^{⊗order}`.
fn contract_slice(block: &[f64], n: usize, order: u32, x: &[f64]) -> f64 {
    if order == 0 {
        return block[0];
    }
    let stride = n.pow(order - 1);
    (0..n)
        .map(|k| x[k] * contract_slice(&block[k * stride..(k + 1) * stride], n, order - 1, x))
        .sum()
}

/// `H(X) = Σ_i λ_i ⟨W, x_i^{⊗p}⟩` for a materialized W.
pub fn noise_loss(x: &StiefelPoint, w: &NoiseTensor, params: &ModelParams) -> Result<f64> {
    if w.n != x.n() || w.p != params.p || x.r() != params.r {
        return Err(Error::Dimension(format!(
            "noise tensor is order {} on ℝ^{}, X is {}×{}",
            w.p,
            w.n,
            x.n(),
            x.r()
        )));
    }
    Ok(x.matrix()
        .column_iter()
        .zip(&params.lambdas)
        .map(|(col, l)| l * w.contract_full(col.as_slice()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Role, Streams};
    use crate::stiefel::sample_uniform;

    fn params(p: u32, n: usize, lambdas: &[f64]) -> ModelParams {
        ModelParams::new(p, n, lambdas.to_vec(), 1.0, NoiseDist::Gaussian).unwrap()
    }

    fn frame(cols: &[&[f64]]) -> StiefelPoint {
        let n = cols[0].len();
        StiefelPoint::new(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(1, 5, vec![1.0], 1.0, NoiseDist::Gaussian).is_err());
        assert!(ModelParams::new(3, 1, vec![1.0, 0.5], 1.0, NoiseDist::Gaussian).is_err());
        assert!(ModelParams::new(3, 5, vec![1.0, 2.0], 1.0, NoiseDist::Gaussian).is_err());
        assert!(ModelParams::new(3, 5, vec![1.0, -0.5], 1.0, NoiseDist::Gaussian).is_err());
        assert!(ModelParams::new(3, 5, vec![2.0, 2.0, 0.0], 0.0, NoiseDist::Rademacher).is_ok());
    }

    #[test]
    fn canonical_spikes() {
        let p = params(3, 3, &[2.0, 1.0]);
        let gt = make_ground_truth(&p, SpikeBasis::Canonical, &mut Streams::new(0).stream(Role::GroundTruth, 0, 0)).unwrap();
        assert_eq!(gt.matrix().as_slice(), &[1., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn haar_spikes_are_orthonormal() {
        for seed in 0..5 {
            let p = params(2, 2, &[1.0, 1.0]);
            let gt = make_ground_truth(&p, SpikeBasis::Haar, &mut Streams::new(seed).stream(Role::GroundTruth, 0, 0)).unwrap();
            assert!(linalg::orthonormality_residual(gt.matrix()) < 1e-14);
        }
        let p = params(3, 50, &[3.0, 2.0, 1.0]);
        let gt = make_ground_truth(&p, SpikeBasis::Haar, &mut Streams::new(7).stream(Role::GroundTruth, 0, 0)).unwrap();
        assert!(linalg::orthonormality_residual(gt.matrix()) <= 1e-12);
    }

    #[test]
    fn population_loss_examples() {
        // r = 1, x = v
        let p = params(2, 100, &[2.0]);
        let mut e = vec![0.0; 100];
        e[0] = 1.0;
        let x = frame(&[&e]);
        let gt = GroundTruth::new(x.matrix().clone()).unwrap();
        assert!((population_loss(&x, &gt, &p).unwrap() + 40.0).abs() < 1e-12);

        // all correlations zero
        let p = params(3, 4, &[3.0, 1.0]);
        let gt = GroundTruth::new(DMatrix::from_column_slice(4, 2, &[1., 0., 0., 0., 0., 1., 0., 0.])).unwrap();
        let x = frame(&[&[0., 0., 1., 0.], &[0., 0., 0., 1.]]);
        assert_eq!(population_loss(&x, &gt, &p).unwrap(), 0.0);

        // M = diag(0.5, 0.2), N = 4: −2 (9·0.125 + 0.008)
        let (a, b) = (0.5f64, 0.2f64);
        let x = frame(&[&[a, 0., (1. - a * a).sqrt(), 0.], &[0., b, 0., (1. - b * b).sqrt()]]);
        assert!((population_loss(&x, &gt, &p).unwrap() + 2.266).abs() < 1e-12);
    }

    #[test]
    fn population_loss_sign_rule() {
        for (p, lam) in [(2u32, 1.5), (3, 1.5)] {
            let prm = params(p, 9, &[lam]);
            let mut e = vec![0.0; 9];
            e[3] = 1.0;
            let gt = GroundTruth::new(DMatrix::from_column_slice(9, 1, &e)).unwrap();
            let plus = frame(&[&e]);
            let minus = StiefelPoint::new(-plus.matrix()).unwrap();
            let base = -3.0 * lam * lam;
            assert!((population_loss(&plus, &gt, &prm).unwrap() - base).abs() < 1e-12);
            let expected_minus = if p % 2 == 0 { base } else { -base };
            assert!((population_loss(&minus, &gt, &prm).unwrap() - expected_minus).abs() < 1e-12);
        }
    }

    #[test]
    fn population_loss_lower_bound() {
        let prm = params(3, 12, &[3.0, 2.0, 1.0]);
        let mut rng = Streams::new(3).stream(Role::Test, 0, 0);
        let gt = make_ground_truth(&prm, SpikeBasis::Haar, &mut rng).unwrap();
        let floor = -prm.sqrt_n() * 36.0;
        for _ in 0..50 {
            let x = sample_uniform(12, 3, &mut rng).unwrap();
            assert!(population_loss(&x, &gt, &prm).unwrap() >= floor);
        }
    }

    #[test]
    fn noise_loss_examples() {
        let prm = params(2, 2, &[1.0]);
        let x = frame(&[&[1.0, 0.0]]);
        let zero = NoiseTensor::zeros(2, 2, 100).unwrap();
        assert_eq!(noise_loss(&x, &zero, &prm).unwrap(), 0.0);
        let w = NoiseTensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(noise_loss(&x, &w, &prm).unwrap(), 1.0);
    }

    #[test]
    fn noise_loss_matches_triple_loop() {
        let prm = params(3, 3, &[2.0, 0.5]);
        let mut rng = Streams::new(11).stream(Role::Test, 0, 0);
        let w = NoiseTensor::sample(3, 3, 1.0, NoiseDist::Gaussian, 1000, &mut rng).unwrap();
        let x = sample_uniform(3, 2, &mut rng).unwrap();
        let mut naive = 0.0;
        for c in 0..2 {
            let col = x.matrix().column(c);
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    for d in 0..3 {
                        s += w.data()[a * 9 + b * 3 + d] * col[a] * col[b] * col[d];
                    }
                }
            }
            naive += prm.lambdas[c] * s;
        }
        assert!((noise_loss(&x, &w, &prm).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn noise_tensor_respects_budget() {
        let mut rng = Streams::new(0).stream(Role::Test, 0, 0);
        let err = NoiseTensor::sample(100, 4, 1.0, NoiseDist::Gaussian, 1_000_000, &mut rng).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 100_000_000, .. }));
    }

    #[test]
    fn gradient_is_single_position_contraction() {
        // W_{k,a,b} nonzero only at (0,1,1): gradient_k = 3·δ_{k0}·x_1²
        let mut data = vec![0.0; 8];
        data[3] = 2.0;
        let w = NoiseTensor::from_vec(2, 3, data).unwrap();
        let g = w.gradient(&[0.6, 0.8]);
        assert!((g[0] - 3.0 * 2.0 * 0.64).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
    }
}
