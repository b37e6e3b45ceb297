//! Geometry of the Stiefel manifold St(N, r) = {X ∈ ℝ^{N×r} : XᵀX = I_r}.
//!
//! The tangent space at X is {U : XᵀU + UᵀX = 0}; the Riemannian gradient of a
//! function is the projection of its Euclidean gradient onto that space, and
//! points move back onto the manifold through the polar retraction
//! `R_X(U) = (X + U)(I + UᵀU)^{-1/2}`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Orthonormality tolerance on ‖XᵀX − I‖_F accepted at construction.
pub const ORTHO_TOL: f64 = 1e-10;

/// An N×r frame with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint(DMatrix<f64>);

impl StiefelPoint {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 || x.ncols() > x.nrows() {
            return Err(Error::Dimension(format!(
                "Stiefel frame must satisfy 1 ≤ r ≤ N, got {}×{}",
                x.nrows(),
                x.ncols()
            )));
        }
        let res = linalg::orthonormality_residual(&x);
        if !(res <= ORTHO_TOL) {
            return Err(Error::InvalidParams(format!(
                "columns are not orthonormal: ‖XᵀX − I‖_F = {res:e}"
            )));
        }
        Ok(Self(x))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn r(&self) -> usize {
        self.0.ncols()
    }

    pub fn residual(&self) -> f64 {
        linalg::orthonormality_residual(&self.0)
    }
}

/// A tangent vector at some base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(DMatrix<f64>);

impl TangentVector {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// ‖XᵀU + UᵀX‖_F at the given base.
    pub fn tangency_residual(&self, base: &StiefelPoint) -> f64 {
        let xu = base.matrix().tr_mul(&self.0);
        (&xu + xu.transpose()).norm()
    }
}

/// Uniform (Haar) sample: `Z (ZᵀZ)^{-1/2}` with Z standard Gaussian.
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Result<StiefelPoint> {
    if r == 0 || r > n {
        return Err(Error::Dimension(format!("need 1 ≤ r ≤ N, got r = {r}, N = {n}")));
    }
    let mut last = None;
    // A singular Gram has probability zero; one redraw before giving up.
    for _ in 0..2 {
        let z = DMatrix::<f64>::from_fn(n, r, |_, _| rng.sample(StandardNormal));
        match linalg::inv_sqrt_spd(&z.tr_mul(&z)) {
            Ok(s) => return Ok(StiefelPoint(z * s)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("loop ran"))
}

/// `A − ½ X (XᵀA + AᵀX)`.
pub fn project_tangent(x: &StiefelPoint, a: &DMatrix<f64>) -> Result<TangentVector> {
    let xm = x.matrix();
    if a.shape() != xm.shape() {
        return Err(Error::Dimension(format!(
            "projection of {:?} onto tangent space at {:?}",
            a.shape(),
            xm.shape()
        )));
    }
    let xa = xm.tr_mul(a);
    let sym = (&xa + xa.transpose()) * 0.5;
    Ok(TangentVector(a - xm * sym))
}

/// Polar retraction `(X + U)(I_r + UᵀU)^{-1/2}`.
///
/// `U` need not be tangent; the formula is applied as written.
pub fn polar_retract(x: &StiefelPoint, u: &DMatrix<f64>) -> Result<StiefelPoint> {
    let xm = x.matrix();
    if u.shape() != xm.shape() {
        return Err(Error::Dimension(format!(
            "retraction step {:?} at point {:?}",
            u.shape(),
            xm.shape()
        )));
    }
    if !linalg::all_finite(u) {
        return Err(Error::NonFinite { what: "retraction step", step: 0 });
    }
    let r = xm.ncols();
    let gram = DMatrix::<f64>::identity(r, r) + u.tr_mul(u);
    let s = linalg::inv_sqrt_spd(&gram)?;
    Ok(StiefelPoint((xm + u) * s))
}
