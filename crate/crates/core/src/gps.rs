//! Gaussian-process regression of subspace-valued maps.
//!
//! A model is trained on parameter points with one orthonormal basis per
//! point. Fitting computes the Gram matrix of the stacked bases and a
//! rank-revealing QR factorization; prediction at a new parameter point
//! produces a probability distribution over subspaces in factored form, whose
//! cost is independent of the ambient dimension n.
//!
//! The predictive distribution at a target is the angular central Gaussian
//! induced by the covariance
//!
//! ```text
//! Sigma = eps^2 I_n + X [ XX^T (Ktilde (x) I_n) XX ]^{-1} X^T
//! ```
//!
//! where `X` stacks the training bases by columns, `XX` is their
//! block-diagonal arrangement, `Ktilde = (D_v K D_v)^{-1}`, `v = K^{-1} kvec`
//! and `eps^2 = 1 - kvec^T K^{-1} kvec`. [`GpsModel::predict`] evaluates the
//! eigendecomposition of `Sigma` without ever forming an n-by-n matrix;
//! [`GpsModel::dense_covariance`] assembles it literally and serves as a
//! cross-check oracle in the test suite.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grassmann::{orthonormalize, sample_uniform, StiefelBasis};
use crate::io;
use crate::kernel::{corr_matrix, corr_vector, KernelSpec, Normalizer, ParameterPoint};
use crate::linalg::{cholesky_psd, symmetric_eigen_desc};
use crate::scalar::{tol, Real};

/// Relative diagonal threshold `|R_ii| >= eta |R_11|` deciding the numerical
/// rank in the pivoted QR of the stacked bases.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// Noise level above which a prediction is flagged as prior dominated.
const PRIOR_NOISE: f64 = 1.0 - 1e-6;

/// Relative weight threshold below which a training point is excluded.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Ambient-dimension cap for the dense covariance oracle.
const DENSE_LIMIT: usize = 2000;

/// Version tag written into model manifests.
const FORMAT_VERSION: u32 = 1;

/// A fitted subspace-regression model.
///
/// Immutable after [`GpsModel::fit`]; predictions are read-only and may run
/// concurrently.
#[derive(Debug, Clone)]
pub struct GpsModel<T: Real> {
    points: Vec<ParameterPoint<T>>,
    bases: Vec<StiefelBasis<T>>,
    kernel: KernelSpec<T>,
    n: usize,
    k: usize,
    l: usize,
    /// Gram matrix of the stacked bases, kl x kl, blocks `X_i^T X_j`.
    gram: DMatrix<T>,
    /// Shared orthonormal column basis of the stacked bases, n x r.
    global_basis: Arc<DMatrix<T>>,
    /// Upper-triangular factor of the pivoted QR, r x kl.
    rfactor: DMatrix<T>,
    /// Column pivot: column `j` of the permuted stack is column `pivot[j]` of the stack.
    pivot: Vec<usize>,
    rank: usize,
    /// `global_basis^T X`, r x kl; column block i holds the coordinates of basis i.
    ctilde: DMatrix<T>,
    corr_chol: Cholesky<T, Dyn>,
    corr_inv: DMatrix<T>,
    normalizer: Normalizer<T>,
    duplicate_points: bool,
}

/// Factored predictive distribution at one target point.
///
/// The distribution over subspaces is the angular central Gaussian with
/// covariance `eps^2 I_n + W diag(lambda) W^T` where
/// `W = global_basis * local_directions`. Directions are kept factored so
/// that consumers can stay in order-r coordinates; materializing an n-sized
/// quantity is an explicit opt-in ([`PredictiveSubspace::mean_subspace`],
/// [`PredictiveSubspace::principal_directions`]).
#[derive(Debug, Clone)]
pub struct PredictiveSubspace<T: Real> {
    global_basis: Arc<DMatrix<T>>,
    /// r x t, orthonormal columns.
    local_directions: DMatrix<T>,
    /// t principal variances, descending, nonnegative.
    principal_variances: DVector<T>,
    /// Isotropic remainder in [0, 1]; 0 at training points, 1 in the prior limit.
    noise_variance: T,
    subspace_dim: usize,
    prior_dominated: bool,
}

enum WeightOutcome<T: Real> {
    /// All correlations underflowed; the prediction is the prior.
    Prior,
    Ok {
        v: DVector<T>,
        eps2: T,
        kbar: DMatrix<T>,
    },
    /// Some weights fell below the relative floor; listed by global index.
    Degenerate(Vec<usize>),
}

impl<T: Real> GpsModel<T> {
    /// Fits a model: stacks the bases, computes their Gram matrix, and takes
    /// a column-pivoted QR whose diagonal decides the numerical rank.
    ///
    /// All bases must share (n, k) and the points must match the kernel
    /// dimension. Coincident points are allowed but flagged
    /// ([`GpsModel::has_duplicate_points`]).
    pub fn fit(
        points: Vec<ParameterPoint<T>>,
        bases: Vec<StiefelBasis<T>>,
        kernel: KernelSpec<T>,
    ) -> Result<Self> {
        if points.is_empty() || bases.is_empty() {
            return Err(Error::EmptySample);
        }
        if points.len() != bases.len() {
            return Err(Error::shape(format!(
                "{} points but {} bases",
                points.len(),
                bases.len()
            )));
        }
        let l = points.len();
        let (n, k) = (bases[0].n(), bases[0].k());
        for b in &bases {
            if b.n() != n || b.k() != k {
                return Err(Error::shape(format!(
                    "bases must share dimensions {}x{}, got {}x{}",
                    n,
                    k,
                    b.n(),
                    b.k()
                )));
            }
        }
        let d = points[0].dim();
        for p in &points {
            if p.dim() != d {
                return Err(Error::dim("parameter points of unequal dimension"));
            }
        }
        if kernel.dim() != d {
            return Err(Error::dim(format!(
                "kernel over {} dims, points of dim {d}",
                kernel.dim()
            )));
        }

        let kl = k * l;
        let mut x = DMatrix::zeros(n, kl);
        for (i, b) in bases.iter().enumerate() {
            x.view_mut((0, i * k), (n, k)).copy_from(b.matrix());
        }
        let gram = x.tr_mul(&x);

        let (q, rfull, perm) = x.col_piv_qr().unpack();
        let mut idx = DMatrix::<usize>::from_fn(1, kl, |_, j| j);
        perm.permute_columns(&mut idx);
        let pivot: Vec<usize> = idx.iter().copied().collect();

        let r11 = rfull[(0, 0)].abs();
        let max_rank = rfull.nrows().min(kl);
        let threshold = T::of(RANK_THRESHOLD) * r11;
        let mut rank = 0;
        while rank < max_rank && rfull[(rank, rank)].abs() >= threshold {
            rank += 1;
        }

        let global_basis = q.columns(0, rank).into_owned();
        let rfactor = rfull.rows(0, rank).into_owned();
        let mut ctilde = DMatrix::zeros(rank, kl);
        for j in 0..kl {
            ctilde.set_column(pivot[j], &rfactor.column(j));
        }

        let corr = corr_matrix(&kernel, &points)?;
        let corr_chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
        let corr_inv = corr_chol.inverse();
        let normalizer = Normalizer::from_points(&points)?;

        let mut duplicate_points = false;
        'outer: for i in 0..l {
            for j in (i + 1)..l {
                if normalizer.distance(&points[i], &points[j])? < tol::<T>(1e-12) {
                    duplicate_points = true;
                    break 'outer;
                }
            }
        }

        Ok(Self {
            points,
            bases,
            kernel,
            n,
            k,
            l,
            gram,
            global_basis: Arc::new(global_basis),
            rfactor,
            pivot,
            rank,
            ctilde,
            corr_chol,
            corr_inv,
            normalizer,
            duplicate_points,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    /// Numerical rank r of the stacked bases, `k <= r <= min(n, k l)`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn points(&self) -> &[ParameterPoint<T>] {
        &self.points
    }

    pub fn bases(&self) -> &[StiefelBasis<T>] {
        &self.bases
    }

    pub fn kernel(&self) -> &KernelSpec<T> {
        &self.kernel
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    /// Shared n x r orthonormal basis of the union of training subspaces.
    pub fn global_basis(&self) -> &Arc<DMatrix<T>> {
        &self.global_basis
    }

    /// Coordinates of the stacked training bases in the global basis, r x kl.
    pub fn coordinates(&self) -> &DMatrix<T> {
        &self.ctilde
    }

    pub fn normalizer(&self) -> &Normalizer<T> {
        &self.normalizer
    }

    pub fn has_duplicate_points(&self) -> bool {
        self.duplicate_points
    }

    /// Coordinates of training basis i in the global basis, r x k.
    pub(crate) fn coordinate_block(&self, i: usize) -> DMatrix<T> {
        self.ctilde.columns(i * self.k, self.k).into_owned()
    }

    /// Coordinate columns for a subset of training points, r x (k |kept|).
    pub(crate) fn coordinate_subset(&self, kept: &[usize]) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.rank, self.k * kept.len());
        for (a, &i) in kept.iter().enumerate() {
            out.view_mut((0, a * self.k), (self.rank, self.k))
                .copy_from(&self.ctilde.columns(i * self.k, self.k));
        }
        out
    }

    fn training_match(&self, target: &ParameterPoint<T>) -> Result<Option<usize>> {
        for (i, p) in self.points.iter().enumerate() {
            if self.normalizer.distance(target, p)? < tol::<T>(1e-12) {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    fn weights(&self, target: &ParameterPoint<T>, kept: &[usize]) -> Result<WeightOutcome<T>> {
        let (v, eps2, kbar) = if kept.len() == self.l {
            let kvec = corr_vector(&self.kernel, &self.points, target)?;
            let v = self.corr_chol.solve(&kvec);
            let eps2 = T::one() - kvec.dot(&v);
            (v, eps2, self.corr_inv.clone())
        } else {
            let pts: Vec<ParameterPoint<T>> =
                kept.iter().map(|&i| self.points[i].clone()).collect();
            let corr = corr_matrix(&self.kernel, &pts)?;
            let chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
            let kbar = chol.inverse();
            let kvec = corr_vector(&self.kernel, &pts, target)?;
            let v = chol.solve(&kvec);
            let eps2 = T::one() - kvec.dot(&v);
            (v, eps2, kbar)
        };
        let max_w = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        if max_w == T::zero() {
            return Ok(WeightOutcome::Prior);
        }
        let floor = T::of(WEIGHT_FLOOR) * max_w;
        let bad: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(a, _)| v[*a].abs() < floor)
            .map(|(_, &i)| i)
            .collect();
        if !bad.is_empty() {
            return Ok(WeightOutcome::Degenerate(bad));
        }
        Ok(WeightOutcome::Ok {
            v,
            eps2: eps2.clamp(T::zero(), T::one()),
            kbar,
        })
    }

    /// Cross-correlation matrix of the weighted subset:
    /// blocks `kbar_ij / (v_i v_j) * X_i^T X_j` drawn from the cached Gram matrix.
    fn weighted_gram(&self, kept: &[usize], v: &DVector<T>, kbar: &DMatrix<T>) -> DMatrix<T> {
        let k = self.k;
        let m = k * kept.len();
        let mut pi = DMatrix::zeros(m, m);
        for (a, &i) in kept.iter().enumerate() {
            for (b, &j) in kept.iter().enumerate() {
                let scale = kbar[(a, b)] / (v[a] * v[b]);
                for p in 0..k {
                    for q in 0..k {
                        pi[(a * k + p, b * k + q)] = scale * self.gram[(i * k + p, j * k + q)];
                    }
                }
            }
        }
        pi
    }

    /// Predicts the subspace distribution at `target`, keeping the top `t`
    /// principal directions, `k <= t <= r`.
    ///
    /// At a training point (distance below 1e-12 in normalized coordinates)
    /// the training subspace is returned exactly with zero noise, as the
    /// limit of the general formula; the returned truncation is then k.
    /// If some correlation weights degenerate, the affected points are
    /// excluded and the solve retried once before failing with
    /// [`Error::DegenerateWeights`].
    pub fn predict(&self, target: &ParameterPoint<T>, t: usize) -> Result<PredictiveSubspace<T>> {
        if target.dim() != self.normalizer.dim() {
            return Err(Error::dim(format!(
                "target of dim {}, model over dim {}",
                target.dim(),
                self.normalizer.dim()
            )));
        }
        if t < self.k || t > self.rank {
            return Err(Error::TruncationOutOfRange {
                t,
                k: self.k,
                r: self.rank,
            });
        }
        if let Some(i) = self.training_match(target)? {
            return self.training_prediction(i);
        }
        let all: Vec<usize> = (0..self.l).collect();
        match self.weights(target, &all)? {
            WeightOutcome::Prior => Ok(self.prior_prediction(t)),
            WeightOutcome::Ok { v, eps2, kbar } => self.factored(&all, &v, eps2, &kbar, t, true),
            WeightOutcome::Degenerate(bad) => {
                let kept: Vec<usize> = all.into_iter().filter(|i| !bad.contains(i)).collect();
                if kept.is_empty() {
                    return Err(Error::DegenerateWeights);
                }
                match self.weights(target, &kept)? {
                    WeightOutcome::Prior => Ok(self.prior_prediction(t)),
                    WeightOutcome::Ok { v, eps2, kbar } => {
                        self.factored(&kept, &v, eps2, &kbar, t, false)
                    }
                    WeightOutcome::Degenerate(_) => Err(Error::DegenerateWeights),
                }
            }
        }
    }

    fn factored(
        &self,
        kept: &[usize],
        v: &DVector<T>,
        eps2: T,
        kbar: &DMatrix<T>,
        t: usize,
        use_pivot: bool,
    ) -> Result<PredictiveSubspace<T>> {
        let pi = self.weighted_gram(kept, v, kbar);
        let s = if use_pivot {
            // Cholesky in pivot order, then a triangular solve against the
            // stored upper factor: S = R (P^T Pi P)^{-1} R^T = C Pi^{-1} C^T.
            let m = pi.nrows();
            let permuted =
                DMatrix::from_fn(m, m, |a, b| pi[(self.pivot[a], self.pivot[b])]);
            let chol = cholesky_psd(&permuted)?;
            let ltilde = chol
                .l()
                .solve_lower_triangular(&self.rfactor.transpose())
                .ok_or(Error::CholeskyFailed)?;
            ltilde.tr_mul(&ltilde)
        } else {
            let chol = cholesky_psd(&pi)?;
            let coords = self.coordinate_subset(kept);
            let ltilde = chol
                .l()
                .solve_lower_triangular(&coords.transpose())
                .ok_or(Error::CholeskyFailed)?;
            ltilde.tr_mul(&ltilde)
        };
        let (mut lambda, vectors) = symmetric_eigen_desc(s);
        for x in lambda.iter_mut() {
            *x = x.max(T::zero());
        }
        Ok(PredictiveSubspace {
            global_basis: Arc::clone(&self.global_basis),
            local_directions: vectors.columns(0, t).into_owned(),
            principal_variances: lambda.rows(0, t).into_owned(),
            noise_variance: eps2,
            subspace_dim: self.k,
            prior_dominated: eps2 > T::of(PRIOR_NOISE),
        })
    }

    fn training_prediction(&self, i: usize) -> Result<PredictiveSubspace<T>> {
        let coords = orthonormalize(&self.coordinate_block(i))?;
        Ok(PredictiveSubspace {
            global_basis: Arc::clone(&self.global_basis),
            local_directions: coords.into_matrix(),
            principal_variances: DVector::from_element(self.k, T::one()),
            noise_variance: T::zero(),
            subspace_dim: self.k,
            prior_dominated: false,
        })
    }

    fn prior_prediction(&self, t: usize) -> PredictiveSubspace<T> {
        PredictiveSubspace {
            global_basis: Arc::clone(&self.global_basis),
            local_directions: DMatrix::identity(self.rank, t),
            principal_variances: DVector::zeros(t),
            noise_variance: T::one(),
            subspace_dim: self.k,
            prior_dominated: true,
        }
    }

    /// Literal dense predictive covariance, `eps^2 I_n + X Pi^{-1} X^T`.
    ///
    /// Test oracle for the factored prediction; rebuilds every ingredient
    /// from the bases with plain dense inverses and is guarded to n <= 2000.
    pub fn dense_covariance(&self, target: &ParameterPoint<T>) -> Result<DMatrix<T>> {
        if self.n > DENSE_LIMIT {
            return Err(Error::BadDimension {
                context: format!("dense covariance guarded to n <= {DENSE_LIMIT}, n = {}", self.n),
            });
        }
        let corr = corr_matrix(&self.kernel, &self.points)?;
        let kvec = corr_vector(&self.kernel, &self.points, target)?;
        let kinv = corr.clone().try_inverse().ok_or(Error::SingularCorrelation)?;
        let v = &kinv * &kvec;
        let eps2 = (T::one() - kvec.dot(&v)).clamp(T::zero(), T::one());
        let max_w = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        if max_w == T::zero() {
            return Ok(DMatrix::identity(self.n, self.n) * eps2);
        }
        let floor = T::of(WEIGHT_FLOOR) * max_w;
        let kept: Vec<usize> = (0..self.l).filter(|&i| v[i].abs() >= floor).collect();
        if kept.is_empty() {
            return Err(Error::DegenerateWeights);
        }
        let (corr_k, v_k) = if kept.len() == self.l {
            (corr, v)
        } else {
            let pts: Vec<ParameterPoint<T>> =
                kept.iter().map(|&i| self.points[i].clone()).collect();
            let corr_k = corr_matrix(&self.kernel, &pts)?;
            let kvec_k = corr_vector(&self.kernel, &pts, target)?;
            let kinv_k = corr_k
                .clone()
                .try_inverse()
                .ok_or(Error::SingularCorrelation)?;
            let v_k = &kinv_k * &kvec_k;
            if v_k.iter().any(|&w| w.abs() < floor) {
                return Err(Error::DegenerateWeights);
            }
            (corr_k, v_k)
        };
        // Ktilde = (D_v K D_v)^{-1}, assembled literally.
        let dv = DMatrix::from_diagonal(&v_k);
        let ktilde = (&dv * corr_k * &dv)
            .try_inverse()
            .ok_or(Error::DegenerateWeights)?;
        // Middle matrix with blocks ktilde_ij X_i^T X_j, from fresh products.
        let k = self.k;
        let m = k * kept.len();
        let mut pi = DMatrix::zeros(m, m);
        for (a, &i) in kept.iter().enumerate() {
            for (b, &j) in kept.iter().enumerate() {
                let block = self.bases[i].matrix().tr_mul(self.bases[j].matrix());
                pi.view_mut((a * k, b * k), (k, k))
                    .copy_from(&(block * ktilde[(a, b)]));
            }
        }
        let pi_inv = pi.try_inverse().ok_or(Error::DegenerateWeights)?;
        let mut x = DMatrix::zeros(self.n, m);
        for (a, &i) in kept.iter().enumerate() {
            x.view_mut((0, a * k), (self.n, k))
                .copy_from(self.bases[i].matrix());
        }
        let mut sigma = &x * pi_inv * x.transpose();
        for i in 0..self.n {
            sigma[(i, i)] += eps2;
        }
        Ok(sigma)
    }

    /// Persists the model as a directory: manifest and kernel as JSON, the
    /// points, Gram matrix, global basis, triangular factor, and pivot as CSV.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        io::write_manifest(
            dir.join("manifest.json"),
            &io::ModelManifest {
                format_version: FORMAT_VERSION,
                n: self.n,
                k: self.k,
                l: self.l,
                r: self.rank,
                eta: RANK_THRESHOLD,
            },
        )?;
        io::write_kernel(dir.join("kernel.json"), &self.kernel)?;
        io::write_points(dir.join("points.csv"), &self.points)?;
        io::write_matrix(dir.join("gram.csv"), &self.gram)?;
        io::write_stiefel(
            dir.join("global_basis.csv"),
            &StiefelBasis::from_matrix_unchecked((*self.global_basis).clone()),
        )?;
        io::write_matrix(dir.join("rfactor.csv"), &self.rfactor)?;
        io::write_perm(dir.join("pivot.csv"), &self.pivot)?;
        Ok(())
    }

    /// Loads a model directory written by [`GpsModel::save`].
    ///
    /// Training bases are reconstructed from the global basis and triangular
    /// factor, then re-orthonormalized.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = io::read_manifest(dir.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                manifest.format_version
            )));
        }
        let kernel: KernelSpec<T> = io::read_kernel(dir.join("kernel.json"))?;
        let points: Vec<ParameterPoint<T>> = io::read_points(dir.join("points.csv"))?;
        let gram: DMatrix<T> = io::read_matrix(dir.join("gram.csv"))?;
        let global = io::read_stiefel::<T>(dir.join("global_basis.csv"))?;
        let rfactor: DMatrix<T> = io::read_matrix(dir.join("rfactor.csv"))?;
        let pivot = io::read_perm(dir.join("pivot.csv"))?;

        let (n, k, l, r) = (manifest.n, manifest.k, manifest.l, manifest.r);
        let kl = k * l;
        let consistent = points.len() == l
            && gram.nrows() == kl
            && gram.ncols() == kl
            && global.n() == n
            && global.k() == r
            && rfactor.nrows() == r
            && rfactor.ncols() == kl
            && pivot.len() == kl
            && points.iter().all(|p| p.dim() == kernel.dim());
        if !consistent {
            return Err(Error::shape(format!(
                "model files inconsistent with manifest in {}",
                dir.display()
            )));
        }
        for i in 0..l {
            for p in 0..k {
                for q in 0..k {
                    let expect = if p == q { T::one() } else { T::zero() };
                    if (gram[(i * k + p, i * k + q)] - expect).abs() > tol::<T>(1e-12) {
                        return Err(Error::Parse {
                            path: dir.join("gram.csv").display().to_string(),
                            line: i * k + p + 2,
                            msg: "diagonal block of the Gram matrix is not the identity".into(),
                        });
                    }
                }
            }
        }

        let mut ctilde = DMatrix::zeros(r, kl);
        for j in 0..kl {
            ctilde.set_column(pivot[j], &rfactor.column(j));
        }
        let mut bases = Vec::with_capacity(l);
        for i in 0..l {
            let coords = ctilde.columns(i * k, k);
            bases.push(orthonormalize(&(global.matrix() * coords))?);
        }
        let corr = corr_matrix(&kernel, &points)?;
        let corr_chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
        let corr_inv = corr_chol.inverse();
        let normalizer = Normalizer::from_points(&points)?;
        let mut duplicate_points = false;
        'outer: for i in 0..l {
            for j in (i + 1)..l {
                if normalizer.distance(&points[i], &points[j])? < tol::<T>(1e-12) {
                    duplicate_points = true;
                    break 'outer;
                }
            }
        }
        Ok(Self {
            points,
            bases,
            kernel,
            n,
            k,
            l,
            gram,
            global_basis: Arc::new(global.into_matrix()),
            rfactor,
            pivot,
            rank: r,
            ctilde,
            corr_chol,
            corr_inv,
            normalizer,
            duplicate_points,
        })
    }
}

impl<T: Real> PredictiveSubspace<T> {
    /// Subspace dimension k of the underlying map.
    pub fn k(&self) -> usize {
        self.subspace_dim
    }

    /// Number of retained principal directions.
    pub fn truncation(&self) -> usize {
        self.local_directions.ncols()
    }

    /// Rank r of the global basis the directions are expressed in.
    pub fn rank(&self) -> usize {
        self.global_basis.ncols()
    }

    /// Principal variances, descending and nonnegative.
    pub fn principal_variances(&self) -> &DVector<T> {
        &self.principal_variances
    }

    /// Isotropic noise variance in [0, 1].
    pub fn noise_variance(&self) -> T {
        self.noise_variance
    }

    /// True when the noise variance is within 1e-6 of 1 and the prediction
    /// has effectively degenerated to the uniform prior.
    pub fn prior_dominated(&self) -> bool {
        self.prior_dominated
    }

    /// Order-r coordinates of the retained directions (r x t, orthonormal).
    pub fn local_directions(&self) -> &DMatrix<T> {
        &self.local_directions
    }

    pub fn global_basis(&self) -> &Arc<DMatrix<T>> {
        &self.global_basis
    }

    /// Order-r coordinates of the mean subspace (first k directions).
    pub fn local_mean(&self) -> DMatrix<T> {
        self.local_directions.columns(0, self.subspace_dim).into_owned()
    }

    /// Mean subspace, materialized as an n x k orthonormal basis.
    pub fn mean_subspace(&self) -> Result<StiefelBasis<T>> {
        let m = &*self.global_basis * self.local_mean();
        StiefelBasis::new(m)
    }

    /// All retained principal directions, materialized as n x t.
    pub fn principal_directions(&self) -> DMatrix<T> {
        &*self.global_basis * &self.local_directions
    }

    /// Galerkin-reduces a precomputed order-r operator `A_r = V~^T A V~` to
    /// the order-k operator of the mean subspace, `V^T A V` for
    /// `V = V~ * local_mean`, without touching any n-sized quantity.
    pub fn reduce_operator(&self, a_r: &DMatrix<T>) -> Result<DMatrix<T>> {
        let r = self.rank();
        if a_r.nrows() != r || a_r.ncols() != r {
            return Err(Error::shape(format!(
                "reduced operator must be {r}x{r}, got {}x{}",
                a_r.nrows(),
                a_r.ncols()
            )));
        }
        let mean = self.local_mean();
        Ok(mean.tr_mul(a_r) * mean)
    }

    /// Draws a subspace from the predictive distribution.
    ///
    /// Exact when all r directions were retained (`t = r`); with a smaller
    /// truncation the dropped directions are treated as pure noise.
    pub fn sample<R>(&self, rng: &mut R) -> Result<StiefelBasis<T>>
    where
        R: Rng + ?Sized,
        StandardNormal: Distribution<T>,
    {
        let n = self.global_basis.nrows();
        let k = self.subspace_dim;
        let eps = self.noise_variance.sqrt();
        let dirs = self.principal_directions();
        let scale = DVector::from_fn(self.truncation(), |j, _| {
            (self.principal_variances[j] + self.noise_variance).sqrt() - eps
        });
        let z = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
        let m = &dirs * (DMatrix::from_diagonal(&scale) * dirs.tr_mul(&z)) + &z * eps;
        orthonormalize(&m)
    }
}

/// Draws a random subspace-valued path over a parameter grid by sequential
/// conditioning: the first point is uniform, each subsequent point is drawn
/// from the predictive distribution given all previous draws.
pub fn sample_path<T, R>(
    grid: &[ParameterPoint<T>],
    kernel: &KernelSpec<T>,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<StiefelBasis<T>>>
where
    T: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    if grid.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut draws = Vec::with_capacity(grid.len());
    draws.push(sample_uniform(n, k, rng)?);
    for i in 1..grid.len() {
        let model = GpsModel::fit(grid[..i].to_vec(), draws.clone(), kernel.clone())?;
        let pred = model.predict(&grid[i], model.rank())?;
        draws.push(pred.sample(rng)?);
    }
    Ok(draws)
}
