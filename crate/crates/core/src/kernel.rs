//! Correlation functions on the parameter space, their matrices, and
//! length-scale derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest admissible jitter on the correlation diagonal.
const MAX_JITTER: f64 = 1e-6;

/// Supported correlation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// Product of per-dimension squared-exponential factors.
    SquaredExponential,
}

/// A correlation function with its hyperparameters.
///
/// `k(a, a) = 1` for every point; `jitter` is added to the diagonal of
/// correlation matrices only, to keep Cholesky factorizations stable with
/// near-duplicate points.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<T: Real> {
    family: KernelFamily,
    lengthscales: Vec<T>,
    jitter: T,
}

impl<T: Real> KernelSpec<T> {
    /// Squared-exponential kernel with one positive length-scale per dimension.
    pub fn squared_exponential(lengthscales: Vec<T>, jitter: T) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one length-scale"));
        }
        for (i, &b) in lengthscales.iter().enumerate() {
            if !(b > T::zero()) || !b.is_finite() {
                return Err(Error::invalid(format!(
                    "length-scale {i} must be positive and finite, got {}",
                    b.as_f64()
                )));
            }
        }
        if jitter < T::zero() || jitter > T::of(MAX_JITTER) {
            return Err(Error::invalid(format!(
                "jitter must lie in [0, {MAX_JITTER}], got {}",
                jitter.as_f64()
            )));
        }
        Ok(Self {
            family: KernelFamily::SquaredExponential,
            lengthscales,
            jitter,
        })
    }

    /// One shared length-scale replicated across `d` dimensions; intended for
    /// parameters that have been scaled into comparable ranges.
    pub fn squared_exponential_shared(beta: T, d: usize, jitter: T) -> Result<Self> {
        Self::squared_exponential(vec![beta; d.max(1)], jitter)
    }

    /// Same family and jitter with replaced length-scales.
    pub fn with_lengthscales(&self, beta: &[T]) -> Result<Self> {
        Self::squared_exponential(beta.to_vec(), self.jitter)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscales(&self) -> &[T] {
        &self.lengthscales
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Parameter-space dimension the kernel expects.
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// A point in the parameter space, with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint<T: Real> {
    coords: Vec<T>,
}

impl<T: Real> ParameterPoint<T> {
    pub fn new(coords: Vec<T>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("parameter point needs at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("parameter coordinates must be finite"));
        }
        Ok(Self { coords })
    }

    /// Convenience constructor for a one-dimensional parameter.
    pub fn scalar(value: T) -> Self {
        Self {
            coords: vec![value],
        }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

fn check_dims<T: Real>(spec: &KernelSpec<T>, a: &ParameterPoint<T>, b: &ParameterPoint<T>) -> Result<()> {
    if a.dim() != b.dim() || a.dim() != spec.dim() {
        return Err(Error::dim(format!(
            "kernel over {} dims applied to points of dims {} and {}",
            spec.dim(),
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Correlation between two points; in (0, 1], equal to 1 iff the points coincide.
pub fn kernel_eval<T: Real>(
    spec: &KernelSpec<T>,
    a: &ParameterPoint<T>,
    b: &ParameterPoint<T>,
) -> Result<T> {
    check_dims(spec, a, b)?;
    let mut log_k = T::zero();
    for ((&x, &y), &beta) in a
        .coords()
        .iter()
        .zip(b.coords().iter())
        .zip(spec.lengthscales().iter())
    {
        let z = (x - y) / beta;
        log_k -= z * z / T::of(2.0);
    }
    Ok(log_k.exp())
}

/// Gradient of the correlation in each length-scale:
/// `dk/dbeta_i = (a_i - b_i)^2 beta_i^{-3} k`.
pub fn kernel_grad<T: Real>(
    spec: &KernelSpec<T>,
    a: &ParameterPoint<T>,
    b: &ParameterPoint<T>,
) -> Result<Vec<T>> {
    check_dims(spec, a, b)?;
    let k = kernel_eval(spec, a, b)?;
    Ok(spec
        .lengthscales()
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let diff = a.coords()[i] - b.coords()[i];
            diff * diff / (beta * beta * beta) * k
        })
        .collect())
}

/// Correlation matrix over a set of points: unit diagonal plus jitter,
/// exactly symmetric by construction from the upper triangle.
pub fn corr_matrix<T: Real>(spec: &KernelSpec<T>, points: &[ParameterPoint<T>]) -> Result<DMatrix<T>> {
    let l = points.len();
    if l == 0 {
        return Err(Error::EmptySample);
    }
    let mut k = DMatrix::zeros(l, l);
    for i in 0..l {
        k[(i, i)] = T::one() + spec.jitter();
        for j in (i + 1)..l {
            let v = kernel_eval(spec, &points[i], &points[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Correlation vector between a target and each point of a set.
pub fn corr_vector<T: Real>(
    spec: &KernelSpec<T>,
    points: &[ParameterPoint<T>],
    target: &ParameterPoint<T>,
) -> Result<DVector<T>> {
    let mut out = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        out[i] = kernel_eval(spec, target, p)?;
    }
    Ok(out)
}

/// Entry-wise partial derivative of the correlation matrix in length-scale `dim`.
pub fn corr_matrix_partial<T: Real>(
    spec: &KernelSpec<T>,
    points: &[ParameterPoint<T>],
    dim: usize,
) -> Result<DMatrix<T>> {
    let l = points.len();
    if dim >= spec.dim() {
        return Err(Error::dim(format!(
            "length-scale index {dim} out of range for {} dims",
            spec.dim()
        )));
    }
    let mut out = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in (i + 1)..l {
            let g = kernel_grad(spec, &points[i], &points[j])?[dim];
            out[(i, j)] = g;
            out[(j, i)] = g;
        }
    }
    Ok(out)
}

/// Affine rescaling of parameter coordinates to unit ranges, built from a
/// training set. Degenerate (constant) dimensions keep their raw scale.
#[derive(Debug, Clone)]
pub struct Normalizer<T: Real> {
    mins: Vec<T>,
    ranges: Vec<T>,
}

impl<T: Real> Normalizer<T> {
    pub fn from_points(points: &[ParameterPoint<T>]) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptySample)?;
        let d = first.dim();
        let mut mins = vec![T::zero(); d];
        let mut maxs = vec![T::zero(); d];
        for i in 0..d {
            mins[i] = points
                .iter()
                .map(|p| p.coords()[i])
                .fold(T::of(f64::INFINITY), T::min);
            maxs[i] = points
                .iter()
                .map(|p| p.coords()[i])
                .fold(T::of(f64::NEG_INFINITY), T::max);
        }
        let ranges = mins
            .iter()
            .zip(maxs.iter())
            .map(|(&lo, &hi)| if hi > lo { hi - lo } else { T::one() })
            .collect();
        Ok(Self { mins, ranges })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    /// Per-dimension parameter ranges of the training set (1 for constant dims).
    pub fn ranges(&self) -> &[T] {
        &self.ranges
    }

    pub fn normalize(&self, p: &ParameterPoint<T>) -> Result<Vec<T>> {
        if p.dim() != self.dim() {
            return Err(Error::dim(format!(
                "point of dim {} against normalizer of dim {}",
                p.dim(),
                self.dim()
            )));
        }
        Ok(p.coords()
            .iter()
            .zip(self.mins.iter().zip(self.ranges.iter()))
            .map(|(&c, (&lo, &range))| (c - lo) / range)
            .collect())
    }

    /// Euclidean distance in normalized coordinates.
    pub fn distance(&self, a: &ParameterPoint<T>, b: &ParameterPoint<T>) -> Result<T> {
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        let mut sum = T::zero();
        for (x, y) in na.iter().zip(nb.iter()) {
            let d = *x - *y;
            sum += d * d;
        }
        Ok(sum.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn se(beta: &[f64]) -> KernelSpec<f64> {
        KernelSpec::squared_exponential(beta.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let spec = se(&[0.7, 2.0]);
        let p = ParameterPoint::new(vec![0.3, -1.2]).unwrap();
        assert_eq!(kernel_eval(&spec, &p, &p).unwrap(), 1.0);
    }

    #[test]
    fn unit_distance_unit_lengthscale() {
        let spec = se(&[1.0]);
        let a = ParameterPoint::scalar(0.0);
        let b = ParameterPoint::scalar(1.0);
        assert_relative_eq!(
            kernel_eval(&spec, &a, &b).unwrap(),
            0.6065306597126334,
            epsilon = 1e-12
        );
    }

    #[test]
    fn separable_product_across_dimensions() {
        let spec = se(&[1.0, 2.0]);
        let a = ParameterPoint::new(vec![0.0, 0.0]).unwrap();
        let b = ParameterPoint::new(vec![1.0, 2.0]).unwrap();
        assert_relative_eq!(
            kernel_eval(&spec, &a, &b).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn stationarity_under_translation() {
        let spec = se(&[0.8, 1.3, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = ParameterPoint::new((0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
            let b = ParameterPoint::new((0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
            let shift: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let at = ParameterPoint::new(
                a.coords().iter().zip(&shift).map(|(c, s)| c + s).collect(),
            )
            .unwrap();
            let bt = ParameterPoint::new(
                b.coords().iter().zip(&shift).map(|(c, s)| c + s).collect(),
            )
            .unwrap();
            let k0 = kernel_eval(&spec, &a, &b).unwrap();
            let k1 = kernel_eval(&spec, &at, &bt).unwrap();
            assert_relative_eq!(k0, k1, epsilon = 1e-12);
            assert!(k0 > 0.0 && k0 <= 1.0);
        }
    }

    #[test]
    fn corr_matrix_is_bitwise_symmetric_with_jittered_diagonal() {
        let spec = KernelSpec::squared_exponential(vec![2.8], 1e-10).unwrap();
        let points: Vec<_> = (0..7)
            .map(|i| ParameterPoint::scalar(i as f64))
            .collect();
        let k = corr_matrix(&spec, &points).unwrap();
        for i in 0..7 {
            assert_eq!(k[(i, i)], 1.0 + 1e-10);
            for j in 0..7 {
                assert_eq!(k[(i, j)].to_bits(), k[(j, i)].to_bits());
            }
        }
    }

    #[test]
    fn corr_matrix_single_point() {
        let spec = KernelSpec::squared_exponential(vec![1.0], 1e-8).unwrap();
        let k = corr_matrix(&spec, &[ParameterPoint::scalar(0.4)]).unwrap();
        assert_eq!(k.nrows(), 1);
        assert_eq!(k[(0, 0)], 1.0 + 1e-8);
    }

    #[test]
    fn coincident_points_smallest_eigenvalue_is_jitter() {
        // 2x2 oracle: eigenvalues of [[1+j, 1], [1, 1+j]] are j and 2+j.
        let jitter = 1e-8;
        let spec = KernelSpec::squared_exponential(vec![1.0], jitter).unwrap();
        let p = ParameterPoint::scalar(0.25);
        let k = corr_matrix(&spec, &[p.clone(), p]).unwrap();
        let eig = k.symmetric_eigen();
        let min = eig.eigenvalues.min();
        assert_relative_eq!(min, jitter, max_relative = 1e-6);
    }

    #[test]
    fn corr_matrix_matches_elementwise_oracle() {
        let beta = 2.8;
        let spec = se(&[beta]);
        let points: Vec<_> = (0..7)
            .map(|i| ParameterPoint::scalar(0.5 * i as f64))
            .collect();
        let k = corr_matrix(&spec, &points).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let diff = 0.5 * (i as f64 - j as f64);
                let expect = (-0.5 * diff * diff / (beta * beta)).exp();
                assert!((k[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_zero_at_coincident_points() {
        let spec = se(&[1.0, 3.0]);
        let p = ParameterPoint::new(vec![0.1, 0.2]).unwrap();
        let g = kernel_grad(&spec, &p, &p).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_closed_form_value() {
        let spec = se(&[1.0]);
        let a = ParameterPoint::scalar(0.0);
        let b = ParameterPoint::scalar(1.0);
        let g = kernel_grad(&spec, &a, &b).unwrap();
        assert_relative_eq!(g[0], (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..3.0)).collect();
            let spec = se(&beta);
            let a = ParameterPoint::new((0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let b = ParameterPoint::new((0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let g = kernel_grad(&spec, &a, &b).unwrap();
            for dim in 0..2 {
                let h = 1e-5 * beta[dim];
                let mut up = beta.clone();
                up[dim] += h;
                let mut dn = beta.clone();
                dn[dim] -= h;
                let fd = (kernel_eval(&se(&up), &a, &b).unwrap()
                    - kernel_eval(&se(&dn), &a, &b).unwrap())
                    / (2.0 * h);
                if fd.abs() > 1e-12 {
                    assert_relative_eq!(g[dim], fd, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradient_finite_over_extreme_lengthscales() {
        for &beta in &[1e-6, 1e-3, 1.0, 1e3, 1e6] {
            let spec = se(&[beta]);
            let a = ParameterPoint::scalar(0.0);
            let b = ParameterPoint::scalar(0.5);
            let g = kernel_grad(&spec, &a, &b).unwrap();
            assert!(g[0].is_finite());
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(KernelSpec::squared_exponential(vec![0.0], 0.0).is_err());
        assert!(KernelSpec::squared_exponential(vec![-1.0], 0.0).is_err());
        assert!(KernelSpec::squared_exponential(vec![1.0], 1e-3).is_err());
        assert!(KernelSpec::squared_exponential(vec![1.0], -1e-12).is_err());
        assert!(KernelSpec::<f64>::squared_exponential(vec![], 0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = se(&[1.0]);
        let a = ParameterPoint::new(vec![0.0, 1.0]).unwrap();
        let b = ParameterPoint::scalar(0.0);
        assert!(matches!(
            kernel_eval(&spec, &a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalizer_scales_to_unit_ranges() {
        let points = vec![
            ParameterPoint::new(vec![0.0, 10.0]).unwrap(),
            ParameterPoint::new(vec![2.0, 30.0]).unwrap(),
        ];
        let norm = Normalizer::from_points(&points).unwrap();
        assert_eq!(norm.ranges(), &[2.0, 20.0]);
        let mid = ParameterPoint::new(vec![1.0, 20.0]).unwrap();
        assert_eq!(norm.normalize(&mid).unwrap(), vec![0.5, 0.5]);
        let d = norm.distance(&points[0], &points[1]).unwrap();
        assert_relative_eq!(d, 2.0f64.sqrt(), epsilon = 1e-12);
    }
}
