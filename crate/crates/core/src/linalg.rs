//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest absolute entry of a matrix; zero for empty matrices.
pub(crate) fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
}

/// Max-norm defect of `X^T X` from the identity.
pub(crate) fn orthonormality_defect<T: Real>(m: &DMatrix<T>) -> T {
    let mut gram = m.tr_mul(m);
    for i in 0..gram.nrows() {
        gram[(i, i)] -= T::one();
    }
    max_abs(&gram)
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub(crate) fn symmetric_eigen_desc<T: Real>(m: DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("non-NaN eigenvalues")
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Cholesky factorization of a positive semidefinite matrix.
///
/// On failure the diagonal is bumped once by `1e-12 * trace / dim` and the
/// factorization retried; a second failure is an error.
pub(crate) fn cholesky_psd<T: Real>(m: &DMatrix<T>) -> Result<Cholesky<T, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let dim = m.nrows();
    let bump = T::of(1e-12) * m.trace() / T::from_usize(dim).unwrap();
    let mut bumped = m.clone();
    for i in 0..dim {
        bumped[(i, i)] += bump;
    }
    Cholesky::new(bumped).ok_or(Error::CholeskyFailed)
}

/// Clamp to [0, 1]; absorbs roundoff before `acos`.
pub(crate) fn clamp_unit<T: Real>(x: T) -> T {
    x.clamp(T::zero(), T::one())
}
