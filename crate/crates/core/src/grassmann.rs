//! Subspace geometry: orthonormal representations, principal angles and the
//! geodesic distance, exponential/logarithm maps, and random sampling on the
//! set of k-dimensional subspaces of R^n.
//!
//! A subspace is always handled through a [`StiefelBasis`], an n-by-k matrix
//! with orthonormal columns. Two bases represent the same subspace whenever
//! they differ by a right orthogonal factor, and every operation here is
//! invariant under that change of representative.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{clamp_unit, max_abs, orthonormality_defect};
use crate::scalar::{tol, Real};

/// Ratio `sigma_min/sigma_max` below which a matrix is treated as rank deficient.
const RANK_RATIO: f64 = 1e-12;

/// An n-by-k matrix with orthonormal columns, representing span of its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelBasis<T: Real> {
    matrix: DMatrix<T>,
}

impl<T: Real> StiefelBasis<T> {
    /// Wraps an orthonormal matrix, verifying `1 <= k <= n` and
    /// `max |X^T X - I| <= 1e-10` (precision-scaled).
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        let (n, k) = (matrix.nrows(), matrix.ncols());
        if k == 0 || k > n {
            return Err(Error::shape(format!(
                "orthonormal basis needs 1 <= k <= n, got n={n}, k={k}"
            )));
        }
        let defect = orthonormality_defect(&matrix);
        if defect > tol::<T>(1e-10) {
            return Err(Error::NotOrthonormal {
                defect: defect.as_f64(),
            });
        }
        Ok(Self { matrix })
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<T>) -> Self {
        Self { matrix }
    }

    /// Ambient dimension n.
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Subspace dimension k.
    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.matrix
    }
}

/// A horizontal tangent vector at a base point: `base^T delta = 0`.
#[derive(Debug, Clone)]
pub struct TangentVector<T: Real> {
    base: StiefelBasis<T>,
    delta: DMatrix<T>,
}

impl<T: Real> TangentVector<T> {
    /// Builds a tangent vector, verifying shape and horizontality
    /// (`max |base^T delta| <= 1e-8`, precision-scaled).
    pub fn new(base: StiefelBasis<T>, delta: DMatrix<T>) -> Result<Self> {
        if delta.nrows() != base.n() || delta.ncols() != base.k() {
            return Err(Error::shape(format!(
                "tangent delta must be {}x{}, got {}x{}",
                base.n(),
                base.k(),
                delta.nrows(),
                delta.ncols()
            )));
        }
        let defect = max_abs(&base.matrix().tr_mul(&delta));
        if defect > tol::<T>(1e-8) {
            return Err(Error::invalid(format!(
                "tangent vector is not horizontal (max |X^T D| = {:.3e})",
                defect.as_f64()
            )));
        }
        Ok(Self { base, delta })
    }

    pub fn base(&self) -> &StiefelBasis<T> {
        &self.base
    }

    pub fn delta(&self) -> &DMatrix<T> {
        &self.delta
    }

    /// Frobenius norm; equals the geodesic length of `exp` along this vector.
    pub fn norm(&self) -> T {
        self.delta.norm()
    }

    /// Scales the vector, staying in the same tangent space.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            base: self.base.clone(),
            delta: &self.delta * factor,
        }
    }
}

/// Orthonormal basis of `span(M)` via the thin SVD `M = V S U^T`, returning `V U^T`.
///
/// The result does not depend on the particular SVD chosen, and the span of
/// the input is preserved exactly.
pub fn orthonormalize<T: Real>(m: &DMatrix<T>) -> Result<StiefelBasis<T>> {
    let (n, k) = (m.nrows(), m.ncols());
    if k == 0 || k > n {
        return Err(Error::shape(format!(
            "projection needs a tall full-rank matrix, got {n}x{k}"
        )));
    }
    let svd = m.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let ratio = (sigma[k - 1] / sigma[0]).as_f64();
    if !(ratio > RANK_RATIO) {
        return Err(Error::RankDeficient { ratio });
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    StiefelBasis::new(u * v_t)
}

fn check_pair<T: Real>(x: &StiefelBasis<T>, y: &StiefelBasis<T>) -> Result<()> {
    if x.n() != y.n() || x.k() != y.k() {
        return Err(Error::dim(format!(
            "subspaces live in different spaces: {}x{} vs {}x{}",
            x.n(),
            x.k(),
            y.n(),
            y.k()
        )));
    }
    Ok(())
}

/// Principal angles between two subspaces, ascending, each in [0, pi/2].
///
/// The angles are `acos` of the singular values of `X^T Y` (clamped into
/// [0, 1] to absorb roundoff). Because `acos` loses half the working
/// precision near 1, angles below pi/4 are evaluated through the equivalent
/// sine form `asin sigma(Y - X (X^T Y))`, which is well conditioned there.
pub fn principal_angles<T: Real>(x: &StiefelBasis<T>, y: &StiefelBasis<T>) -> Result<DVector<T>> {
    check_pair(x, y)?;
    let k = x.k();
    let overlap = x.matrix().tr_mul(y.matrix());
    let residual = y.matrix() - x.matrix() * &overlap;
    let mut cosines: Vec<T> = overlap
        .svd(false, false)
        .singular_values
        .iter()
        .map(|&s| clamp_unit(s))
        .collect();
    let mut sines: Vec<T> = residual
        .svd(false, false)
        .singular_values
        .iter()
        .map(|&s| clamp_unit(s))
        .collect();
    // Descending cosines and ascending sines both order angles ascending.
    cosines.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sines.sort_by(|a, b| a.partial_cmp(b).expect("finite singular values"));
    let half = T::of(0.5);
    let mut angles: Vec<T> = (0..k)
        .map(|j| {
            if cosines[j] * cosines[j] >= half {
                sines[j].asin()
            } else {
                cosines[j].acos()
            }
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    Ok(DVector::from_vec(angles))
}

/// Geodesic distance: the Euclidean norm of the principal angles.
///
/// Symmetric, zero exactly on equal spans, and bounded by `(pi/2) sqrt(k)`.
pub fn riemannian_distance<T: Real>(x: &StiefelBasis<T>, y: &StiefelBasis<T>) -> Result<T> {
    Ok(principal_angles(x, y)?.norm())
}

/// Riemannian logarithm: the horizontal vector at `x` whose geodesic reaches
/// `span(y)`.
///
/// Uses `L = (I - X X^T) Y (X^T Y)^{-1}` with thin SVD `L = U S W^T` and
/// returns `U atan(S) W^T`. Fails with [`Error::CutLocus`] when the largest
/// principal angle reaches pi/2, where `X^T Y` loses invertibility.
pub fn grassmann_log<T: Real>(
    x: &StiefelBasis<T>,
    y: &StiefelBasis<T>,
) -> Result<TangentVector<T>> {
    check_pair(x, y)?;
    let angles = principal_angles(x, y)?;
    let largest = angles[angles.len() - 1];
    if largest >= T::frac_pi_2() - tol::<T>(1e-8) {
        return Err(Error::CutLocus {
            angle: largest.as_f64(),
        });
    }
    let overlap = x.matrix().tr_mul(y.matrix());
    let inv = overlap.clone().try_inverse().ok_or(Error::CutLocus {
        angle: largest.as_f64(),
    })?;
    // L = (Y - X (X^T Y)) (X^T Y)^{-1}, avoiding the n x n projector.
    let l = (y.matrix() - x.matrix() * overlap) * inv;
    let svd = l.svd(true, true);
    let u = svd.u.expect("requested U");
    let w_t = svd.v_t.expect("requested V^T");
    let atan = DMatrix::from_diagonal(&svd.singular_values.map(|s| s.atan()));
    TangentVector::new(x.clone(), u * atan * w_t)
}

/// Riemannian exponential: follows the geodesic from the base of `delta`.
///
/// With thin SVD `delta = U S W^T`, the endpoint is
/// `pi(X W cos(S) W^T + U sin(S) W^T)`.
pub fn grassmann_exp<T: Real>(
    x: &StiefelBasis<T>,
    delta: &TangentVector<T>,
) -> Result<StiefelBasis<T>> {
    if delta.base().n() != x.n() || delta.base().k() != x.k() {
        return Err(Error::BaseMismatch);
    }
    let base_defect = max_abs(&(delta.base().matrix() - x.matrix()));
    if base_defect > tol::<T>(1e-12) {
        return Err(Error::BaseMismatch);
    }
    let svd = delta.delta().clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let w_t = svd.v_t.expect("requested V^T");
    let cos = DMatrix::from_diagonal(&svd.singular_values.map(|s| s.cos()));
    let sin = DMatrix::from_diagonal(&svd.singular_values.map(|s| s.sin()));
    let endpoint = x.matrix() * w_t.transpose() * cos * &w_t + u * sin * &w_t;
    orthonormalize(&endpoint)
}

/// Uniform sample: orthonormalized standard Gaussian matrix.
pub fn sample_uniform<T, R>(n: usize, k: usize, rng: &mut R) -> Result<StiefelBasis<T>>
where
    T: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    if k == 0 || k > n {
        return Err(Error::shape(format!(
            "uniform sample needs 1 <= k <= n, got n={n}, k={k}"
        )));
    }
    let z = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    orthonormalize(&z)
}

/// Sample with scatter `Sigma = sqrt_sigma^2`: orthonormalized `sqrt_sigma Z`.
///
/// `sqrt_sigma` must be symmetric positive semidefinite; the distribution is
/// unchanged by positive rescaling of the factor.
pub fn sample_macg<T, R>(
    sqrt_sigma: &DMatrix<T>,
    k: usize,
    rng: &mut R,
) -> Result<StiefelBasis<T>>
where
    T: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    let n = sqrt_sigma.nrows();
    if sqrt_sigma.ncols() != n {
        return Err(Error::shape(format!(
            "scatter factor must be square, got {}x{}",
            n,
            sqrt_sigma.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::shape(format!(
            "sample needs 1 <= k <= n, got n={n}, k={k}"
        )));
    }
    let asym = max_abs(&(sqrt_sigma - sqrt_sigma.transpose()));
    if asym > tol::<T>(1e-10) {
        return Err(Error::invalid(format!(
            "scatter factor is not symmetric (max |A - A^T| = {:.3e})",
            asym.as_f64()
        )));
    }
    let eig = sqrt_sigma.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(T::zero(), |m, &e| m.min(e));
    if min_eig < -tol::<T>(1e-10) {
        return Err(Error::NotPsd {
            eigenvalue: min_eig.as_f64(),
        });
    }
    let z = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    orthonormalize(&(sqrt_sigma * z))
}
