//! Hyperparameter selection: leave-one-out cross-validation error, its
//! analytic gradient, search routines, the rule-of-thumb default, and
//! likelihood-based diagnostics.
//!
//! The LOOCV error sums, over training points, the squared geodesic distance
//! between each held-out subspace and the mean prediction from the remaining
//! points. All per-fold quantities are expressed through the inverse of the
//! full correlation matrix, so one factorization serves every fold:
//! with `kbar = K^{-1}`, the fold-i weighted Gram matrix has blocks
//! `delta_pq * Gram_pq` where
//! `delta_pq = kbar_pq kbar_ii / (kbar_ip kbar_iq) - 1` (p, q != i), and the
//! held-out error comes from the singular values of `C_i^T Vring` with
//! `Vring` the top-k eigenvectors of `S = C_{-i} Pi^{-1} C_{-i}^T`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gps::GpsModel;
use crate::grassmann::riemannian_distance;
use crate::kernel::{corr_matrix, corr_matrix_partial, KernelSpec};
use crate::linalg::{cholesky_psd, clamp_unit, symmetric_eigen_desc};
use crate::scalar::Real;

/// Eigengap below which an eigenvector derivative is not trusted and the
/// gradient falls back to finite differences.
const GAP_FLOOR: f64 = 1e-12;

/// Singular values above `1 - ACOS_GUARD` use the series form of
/// `acos(s)/sqrt(1-s^2)`, whose direct evaluation loses all precision there.
const ACOS_GUARD: f64 = 1e-8;

/// Relative step for finite-difference fallbacks, `h = FD_STEP * beta`.
const FD_STEP: f64 = 1e-4;

/// Leave-one-out predictive error at one hyperparameter setting.
#[derive(Debug, Clone)]
pub struct LoocvReport<T: Real> {
    /// Evaluated length-scales.
    pub beta: Vec<T>,
    /// Sum of the per-point squared errors.
    pub total_error: T,
    /// Squared geodesic error of each held-out prediction; each in [0, k (pi/2)^2].
    pub per_point: Vec<T>,
    /// Analytic gradient in the length-scales, when requested.
    pub gradient: Option<Vec<T>>,
    /// Folds whose error could not be computed even by refitting.
    pub skipped_folds: Vec<usize>,
}

/// Leave-one-out predictive log-density at one hyperparameter setting.
#[derive(Debug, Clone)]
pub struct DensityReport<T: Real> {
    pub log_density: T,
    pub skipped_folds: Vec<usize>,
}

/// How eigenvector derivatives are evaluated inside the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    /// Pseudo-inverse through the top `tau` eigenpairs, with the dropped
    /// tail approximated isotropically. `tau = 2k` is accurate in practice.
    TruncatedPseudoInverse { tau: usize },
    /// Pseudo-inverse through the full spectrum.
    ExactPseudoInverse,
}

/// Result of a hyperparameter search.
#[derive(Debug, Clone)]
pub struct TuneResult<T: Real> {
    /// Best length-scales found; never worse than any evaluated point.
    pub beta_star: Vec<T>,
    /// Every evaluation made, in order: (length-scales, error).
    pub trace: Vec<(Vec<T>, T)>,
    pub converged: bool,
}

/// Factorizations shared by the error, gradient, and density routines for
/// one held-out fold.
struct Fold<T: Real> {
    kept: Vec<usize>,
    /// `(l-1)^2` scale factors of the weighted Gram matrix.
    delta: DMatrix<T>,
    /// Lower Cholesky factor of the fold's weighted Gram matrix.
    chol_l: DMatrix<T>,
    /// `L^{-1} C_{-i}^T`, k(l-1) x r.
    ltilde: DMatrix<T>,
    /// Full spectrum of `S = ltilde^T ltilde`, descending, clamped to >= 0.
    eigvals: DVector<T>,
    /// All r eigenvectors of S.
    eigvecs: DMatrix<T>,
    /// Coordinates of the held-out basis, r x k.
    coords_held: DMatrix<T>,
}

fn fold_factors<T: Real>(model: &GpsModel<T>, kbar: &DMatrix<T>, held: usize) -> Result<Fold<T>> {
    let l = model.len();
    let k = model.k();
    let kept: Vec<usize> = (0..l).filter(|&j| j != held).collect();
    let m = kept.len();
    let mut delta = DMatrix::zeros(m, m);
    for (a, &p) in kept.iter().enumerate() {
        for (b, &q) in kept.iter().enumerate() {
            let d = kbar[(p, q)] * kbar[(held, held)] / (kbar[(held, p)] * kbar[(held, q)])
                - T::one();
            if !d.is_finite() {
                return Err(Error::DegenerateWeights);
            }
            delta[(a, b)] = d;
        }
    }
    let gram = model.gram();
    let mut pi = DMatrix::zeros(k * m, k * m);
    for (a, &p) in kept.iter().enumerate() {
        for (b, &q) in kept.iter().enumerate() {
            for s in 0..k {
                for t in 0..k {
                    pi[(a * k + s, b * k + t)] = delta[(a, b)] * gram[(p * k + s, q * k + t)];
                }
            }
        }
    }
    let chol = cholesky_psd(&pi)?;
    let chol_l = chol.l();
    let coords = model.coordinate_subset(&kept);
    let ltilde = chol_l
        .solve_lower_triangular(&coords.transpose())
        .ok_or(Error::CholeskyFailed)?;
    let s = ltilde.tr_mul(&ltilde);
    let (mut eigvals, eigvecs) = symmetric_eigen_desc(s);
    for v in eigvals.iter_mut() {
        *v = v.max(T::zero());
    }
    Ok(Fold {
        kept,
        delta,
        chol_l,
        ltilde,
        eigvals,
        eigvecs,
        coords_held: model.coordinate_block(held),
    })
}

/// Squared held-out error of one fold from its factorizations.
fn fold_error<T: Real>(model: &GpsModel<T>, fold: &Fold<T>) -> T {
    let k = model.k();
    let top = fold.eigvecs.columns(0, k);
    let overlap = fold.coords_held.tr_mul(&top);
    let svd = overlap.svd(false, false);
    svd.singular_values
        .iter()
        .map(|&s| {
            let a = clamp_unit(s).acos();
            a * a
        })
        .fold(T::zero(), |acc, e| acc + e)
}

/// Held-out error by refitting a reduced model; the slow path behind
/// per-fold degeneracies.
fn fold_error_refit<T: Real>(model: &GpsModel<T>, kernel: &KernelSpec<T>, held: usize) -> Result<T> {
    let points: Vec<_> = (0..model.len())
        .filter(|&j| j != held)
        .map(|j| model.points()[j].clone())
        .collect();
    let bases: Vec<_> = (0..model.len())
        .filter(|&j| j != held)
        .map(|j| model.bases()[j].clone())
        .collect();
    let sub = GpsModel::fit(points, bases, kernel.clone())?;
    let pred = sub.predict(&model.points()[held], sub.k())?;
    let mean = pred.mean_subspace()?;
    let d = riemannian_distance(&mean, &model.bases()[held])?;
    Ok(d * d)
}

/// Leave-one-out predictive error at the given length-scales.
///
/// Folds whose fast path degenerates are recomputed by refitting; folds that
/// fail even then contribute zero and are listed in `skipped_folds`.
pub fn loocv_error<T: Real>(model: &GpsModel<T>, beta: &[T]) -> Result<LoocvReport<T>> {
    let l = model.len();
    if l < 3 {
        return Err(Error::invalid(format!(
            "leave-one-out needs at least 3 training points, have {l}"
        )));
    }
    let kernel = model.kernel().with_lengthscales(beta)?;
    let corr = corr_matrix(&kernel, model.points())?;
    let chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
    let kbar = chol.inverse();

    let mut per_point = Vec::with_capacity(l);
    let mut skipped = Vec::new();
    for i in 0..l {
        let fast = fold_factors(model, &kbar, i).map(|f| fold_error(model, &f));
        match fast {
            Ok(e) => per_point.push(e),
            Err(_) => match fold_error_refit(model, &kernel, i) {
                Ok(e) => per_point.push(e),
                Err(_) => {
                    skipped.push(i);
                    per_point.push(T::zero());
                }
            },
        }
    }
    let total_error = per_point.iter().fold(T::zero(), |acc, &e| acc + e);
    Ok(LoocvReport {
        beta: beta.to_vec(),
        total_error,
        per_point,
        gradient: None,
        skipped_folds: skipped,
    })
}

/// `acos(s) / sqrt(1 - s^2)` with the finite limit at s -> 1.
fn acos_over_sine<T: Real>(s: T) -> T {
    if s > T::one() - T::of(ACOS_GUARD) {
        // acos(1-u)/sqrt(1-(1-u)^2) = 1 + u/3 + O(u^2)
        T::one() + (T::one() - s) / T::of(3.0)
    } else {
        s.acos() / (T::one() - s * s).sqrt()
    }
}

/// Analytic gradient of [`loocv_error`] with the default truncation `tau`.
pub fn loocv_gradient<T: Real>(model: &GpsModel<T>, beta: &[T], tau: usize) -> Result<Vec<T>> {
    loocv_gradient_with(model, beta, GradientMethod::TruncatedPseudoInverse { tau })
}

/// Analytic gradient of the LOOCV error in each length-scale.
///
/// Chains the derivative of `acos^2` of the held-out singular values through
/// the eigenvector derivative of `S`; the pseudo-inverse in the latter is
/// evaluated per `method`. When an eigengap needed by the chain falls below
/// 1e-12 the whole gradient is recomputed by central finite differences.
pub fn loocv_gradient_with<T: Real>(
    model: &GpsModel<T>,
    beta: &[T],
    method: GradientMethod,
) -> Result<Vec<T>> {
    let l = model.len();
    if l < 3 {
        return Err(Error::invalid(format!(
            "leave-one-out needs at least 3 training points, have {l}"
        )));
    }
    let k = model.k();
    let d = beta.len();
    let kernel = model.kernel().with_lengthscales(beta)?;
    let corr = corr_matrix(&kernel, model.points())?;
    let chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
    let kbar = chol.inverse();

    // dK/dbeta_a and d(K^{-1})/dbeta_a = -K^{-1} dK K^{-1}, shared by folds.
    let mut dkbar = Vec::with_capacity(d);
    for a in 0..d {
        let dk = corr_matrix_partial(&kernel, model.points(), a)?;
        dkbar.push(-(&kbar * dk * &kbar));
    }

    let mut grad = vec![T::zero(); d];
    for i in 0..l {
        let fold = match fold_factors(model, &kbar, i) {
            Ok(f) => f,
            Err(_) => return finite_difference_gradient(model, beta),
        };
        let r = fold.eigvals.len();
        let tau = match method {
            GradientMethod::TruncatedPseudoInverse { tau } => tau.min(r),
            GradientMethod::ExactPseudoInverse => r,
        };
        // Eigengaps needed by the pseudo-inverse: top-k against the leading tau.
        for p in 0..k {
            if fold.eigvals[p] < T::of(GAP_FLOOR) {
                return finite_difference_gradient(model, beta);
            }
            for q in 0..tau {
                if q != p && (fold.eigvals[p] - fold.eigvals[q]).abs() < T::of(GAP_FLOOR) {
                    return finite_difference_gradient(model, beta);
                }
            }
        }

        let top = fold.eigvecs.columns(0, k);
        let overlap = fold.coords_held.tr_mul(&top);
        let svd = overlap.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let w_t = svd.v_t.as_ref().expect("requested V^T");

        let m = fold.kept.len();
        let gram = model.gram();
        for a in 0..d {
            // dDelta and the fold's dPi.
            let mut dpi = DMatrix::zeros(k * m, k * m);
            let mut finite = true;
            'build: for (ai, &p) in fold.kept.iter().enumerate() {
                for (bi, &q) in fold.kept.iter().enumerate() {
                    let term = dkbar[a][(p, q)] / kbar[(p, q)]
                        + dkbar[a][(i, i)] / kbar[(i, i)]
                        - dkbar[a][(i, p)] / kbar[(i, p)]
                        - dkbar[a][(i, q)] / kbar[(i, q)];
                    let dd = (fold.delta[(ai, bi)] + T::one()) * term;
                    if !dd.is_finite() {
                        finite = false;
                        break 'build;
                    }
                    for s in 0..k {
                        for t in 0..k {
                            dpi[(ai * k + s, bi * k + t)] = dd * gram[(p * k + s, q * k + t)];
                        }
                    }
                }
            }
            if !finite {
                return finite_difference_gradient(model, beta);
            }

            // d(Vring) column by column, then dsigma_j and the chain rule.
            let mut dtop = DMatrix::zeros(r, k);
            for p in 0..k {
                let vp = fold.eigvecs.column(p);
                // Pi^{-1} C^T v_p through the triangular factors.
                let w1 = &fold.ltilde * vp;
                let w1 = fold
                    .chol_l
                    .tr_solve_lower_triangular(&w1)
                    .ok_or(Error::CholeskyFailed)?;
                let w2 = &dpi * w1;
                let w2 = fold
                    .chol_l
                    .solve_lower_triangular(&w2)
                    .ok_or(Error::CholeskyFailed)?;
                // dS v_p = -C Pi^{-1} dPi Pi^{-1} C^T v_p
                let dsv = -(fold.ltilde.tr_mul(&w2));
                let lam_p = fold.eigvals[p];
                let dv = match method {
                    GradientMethod::ExactPseudoInverse => {
                        let proj = fold.eigvecs.tr_mul(&dsv);
                        let mut coef = DVector::zeros(r);
                        for q in 0..r {
                            if q != p {
                                coef[q] = proj[(q, 0)] / (lam_p - fold.eigvals[q]);
                            }
                        }
                        &fold.eigvecs * coef
                    }
                    GradientMethod::TruncatedPseudoInverse { .. } => {
                        let leading = fold.eigvecs.columns(0, tau);
                        let proj = leading.tr_mul(&dsv);
                        let mut coef = DVector::zeros(tau);
                        for q in 0..tau {
                            coef[q] = if q == p {
                                -T::one() / lam_p
                            } else {
                                T::one() / (lam_p - fold.eigvals[q]) - T::one() / lam_p
                            } * proj[(q, 0)];
                        }
                        leading * coef + &dsv / lam_p
                    }
                };
                dtop.set_column(p, &dv.column(0));
            }
            let doverlap = fold.coords_held.tr_mul(&dtop);
            for j in 0..k {
                let sigma = clamp_unit(svd.singular_values[j]);
                let dsigma = (u.column(j).transpose() * &doverlap * w_t.row(j).transpose())[(0, 0)];
                grad[a] -= T::of(2.0) * acos_over_sine(sigma) * dsigma;
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient of the LOOCV error, `h = 1e-4 beta_a`.
fn finite_difference_gradient<T: Real>(model: &GpsModel<T>, beta: &[T]) -> Result<Vec<T>> {
    let mut grad = Vec::with_capacity(beta.len());
    for a in 0..beta.len() {
        let h = T::of(FD_STEP) * beta[a];
        let mut up = beta.to_vec();
        up[a] += h;
        let mut dn = beta.to_vec();
        dn[a] -= h;
        let fu = loocv_error(model, &up)?.total_error;
        let fd = loocv_error(model, &dn)?.total_error;
        grad.push((fu - fd) / (T::of(2.0) * h));
    }
    Ok(grad)
}

/// Rule-of-thumb length-scales: `3 d^{3/2} / l` relative to each range.
pub fn rule_of_thumb<T: Real>(d: usize, l: usize, ranges: &[T]) -> Result<Vec<T>> {
    if d == 0 || l == 0 {
        return Err(Error::invalid("rule of thumb needs d >= 1 and l >= 1"));
    }
    if ranges.len() != d {
        return Err(Error::dim(format!(
            "{d} dimensions but {} ranges",
            ranges.len()
        )));
    }
    if ranges.iter().any(|&r| !(r > T::zero())) {
        return Err(Error::invalid("parameter ranges must be positive"));
    }
    let factor =
        T::of(3.0) * T::from_usize(d).unwrap().powf(T::of(1.5)) / T::from_usize(l).unwrap();
    Ok(ranges.iter().map(|&r| factor * r).collect())
}

/// Default search box for [`tune`]: rule-of-thumb +-30% with the rule itself
/// as the initial value.
pub fn default_search_box<T: Real>(model: &GpsModel<T>) -> Result<(Vec<(T, T)>, Vec<T>)> {
    let ranges = model.normalizer().ranges();
    let rule = rule_of_thumb(ranges.len(), model.len(), ranges)?;
    let bounds = rule
        .iter()
        .map(|&b| (b * T::of(0.7), b * T::of(1.3)))
        .collect();
    Ok((bounds, rule))
}

/// Minimizes the LOOCV error over the length-scales.
///
/// One dimension uses golden-section search on `log beta`; several use
/// gradient descent on `log beta` with backtracking. Both stop when the
/// bracket (or step) falls below 0.01 in log units. The best evaluated point
/// is returned; if nothing improves on `init`, the result is `init` with
/// `converged = false`.
pub fn tune<T: Real>(
    model: &GpsModel<T>,
    bounds: &[(T, T)],
    init: &[T],
    max_iters: usize,
) -> Result<TuneResult<T>> {
    let d = init.len();
    if bounds.len() != d || d != model.kernel().dim() {
        return Err(Error::dim(format!(
            "tune over {} dims got {} bounds and {d} initial values",
            model.kernel().dim(),
            bounds.len()
        )));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo > T::zero()) || !(hi > lo) {
            return Err(Error::invalid(format!(
                "bounds {i} must satisfy 0 < lo < hi"
            )));
        }
        if init[i] < lo || init[i] > hi {
            return Err(Error::invalid(format!("init {i} outside its bounds")));
        }
    }

    let threshold = T::of(0.01);
    let mut trace: Vec<(Vec<T>, T)> = Vec::new();
    let mut eval = |beta: &[T], trace: &mut Vec<(Vec<T>, T)>| -> Result<T> {
        let e = loocv_error(model, beta)?.total_error;
        trace.push((beta.to_vec(), e));
        Ok(e)
    };

    let f_init = eval(init, &mut trace)?;
    if f_init == T::zero() {
        // Every length-scale reproduces the data exactly; keep the initial one.
        return Ok(TuneResult {
            beta_star: init.to_vec(),
            trace,
            converged: true,
        });
    }

    let mut converged = false;
    if d == 1 {
        let phi = T::of(0.618_033_988_749_894_9);
        let mut a = bounds[0].0.ln();
        let mut b = bounds[0].1.ln();
        let mut u1 = b - phi * (b - a);
        let mut u2 = a + phi * (b - a);
        let mut f1 = eval(&[u1.exp()], &mut trace)?;
        let mut f2 = eval(&[u2.exp()], &mut trace)?;
        for _ in 0..max_iters {
            if b - a <= threshold {
                break;
            }
            if f1 < f2 {
                b = u2;
                u2 = u1;
                f2 = f1;
                u1 = b - phi * (b - a);
                f1 = eval(&[u1.exp()], &mut trace)?;
            } else {
                a = u1;
                u1 = u2;
                f1 = f2;
                u2 = a + phi * (b - a);
                f2 = eval(&[u2.exp()], &mut trace)?;
            }
        }
        converged = (b - a) <= threshold;
    } else {
        let lo: Vec<T> = bounds.iter().map(|&(lo, _)| lo.ln()).collect();
        let hi: Vec<T> = bounds.iter().map(|&(_, hi)| hi.ln()).collect();
        let mut u: Vec<T> = init.iter().map(|&b| b.ln()).collect();
        let mut f_u = f_init;
        let tau = 2 * model.k();
        for _ in 0..max_iters {
            let beta: Vec<T> = u.iter().map(|&x| x.exp()).collect();
            let g_beta = loocv_gradient(model, &beta, tau)?;
            // Chain rule to log coordinates.
            let g: Vec<T> = g_beta
                .iter()
                .zip(beta.iter())
                .map(|(&g, &b)| g * b)
                .collect();
            let gmax = g.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
            if gmax < T::of(1e-14) {
                converged = true;
                break;
            }
            let mut step = T::of(0.25) / gmax;
            let mut improved = false;
            while step * gmax > T::of(1e-6) {
                let u_new: Vec<T> = (0..d)
                    .map(|j| (u[j] - step * g[j]).clamp(lo[j], hi[j]))
                    .collect();
                let beta_new: Vec<T> = u_new.iter().map(|&x| x.exp()).collect();
                let f_new = eval(&beta_new, &mut trace)?;
                if f_new < f_u {
                    let delta = (0..d)
                        .map(|j| (u_new[j] - u[j]).abs())
                        .fold(T::zero(), T::max);
                    u = u_new;
                    f_u = f_new;
                    improved = true;
                    if delta < threshold {
                        converged = true;
                    }
                    break;
                }
                step /= T::of(2.0);
            }
            if !improved {
                // Backtracking exhausted: at a minimum within resolution.
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }
    }

    let best = trace
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.1.partial_cmp(&b.1).expect("finite errors"))
        .map(|(i, _)| i)
        .expect("nonempty trace");
    if trace[best].1 >= f_init {
        return Ok(TuneResult {
            beta_star: init.to_vec(),
            trace,
            converged: false,
        });
    }
    Ok(TuneResult {
        beta_star: trace[best].0.clone(),
        trace,
        converged,
    })
}

/// Log of the modified marginal likelihood,
/// `-(n-k)kl/2 log 2pi - k/2 (n log|K| + log|B|)` where `B` has blocks
/// `kbar_ij X_i^T X_j`.
///
/// A diagnostic only: it increases as the correlation matrix approaches
/// singularity, so maximizing it drives the length-scales to infinity.
pub fn log_modified_marginal_likelihood<T: Real>(model: &GpsModel<T>, beta: &[T]) -> Result<T> {
    let kernel = model.kernel().with_lengthscales(beta)?;
    let corr = corr_matrix(&kernel, model.points())?;
    let chol = Cholesky::new(corr).ok_or(Error::SingularCorrelation)?;
    let log_det_corr = log_det_of_cholesky(&chol.l());

    let (k, l) = (model.k(), model.len());
    let kbar = chol.inverse();
    let gram = model.gram();
    let mut breve = DMatrix::zeros(k * l, k * l);
    for i in 0..l {
        for j in 0..l {
            for p in 0..k {
                for q in 0..k {
                    breve[(i * k + p, j * k + q)] = kbar[(i, j)] * gram[(i * k + p, j * k + q)];
                }
            }
        }
    }
    let breve_chol = Cholesky::new(breve).ok_or(Error::SingularCorrelation)?;
    let log_det_breve = log_det_of_cholesky(&breve_chol.l());

    let n = T::from_usize(model.n()).unwrap();
    let kl = T::from_usize(k * l).unwrap();
    let kf = T::from_usize(k).unwrap();
    let half = T::of(0.5);
    Ok(-half * (n - kf) * kl * T::two_pi().ln() - half * kf * (n * log_det_corr + log_det_breve))
}

fn log_det_of_cholesky<T: Real>(l: &DMatrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    acc * T::of(2.0)
}

/// Leave-one-out predictive log-density,
/// `sum_i -1/2 (k log|Sigma_{-i}| + n log|X_i^T Sigma_{-i}^{-1} X_i|)`,
/// evaluated through the factored fold quantities.
///
/// Folds with vanishing held-out noise (duplicate points) are skipped and
/// flagged. Like the modified marginal likelihood, a diagnostic: for n >> k
/// it also favors arbitrarily long length-scales.
pub fn loocv_log_density<T: Real>(model: &GpsModel<T>, beta: &[T]) -> Result<DensityReport<T>> {
    let l = model.len();
    if l < 2 {
        return Err(Error::invalid("log-density needs at least 2 training points"));
    }
    let k = model.k();
    let r = model.rank();
    let n = model.n();
    let kernel = model.kernel().with_lengthscales(beta)?;
    let corr = corr_matrix(&kernel, model.points())?;
    let chol = Cholesky::new(corr.clone()).ok_or(Error::SingularCorrelation)?;
    let kbar = chol.inverse();

    let mut acc = T::zero();
    let mut skipped = Vec::new();
    for i in 0..l {
        // Held-out weights and noise from the inverse-correlation identities:
        // v_{-i} = -kbar_{-i,i} / kbar_ii, eps^2 = 1 - k_{-i}^T v_{-i}.
        let kept: Vec<usize> = (0..l).filter(|&j| j != i).collect();
        let mut eps2 = T::one();
        for &p in &kept {
            let v_p = -kbar[(p, i)] / kbar[(i, i)];
            eps2 -= corr[(p, i)] * v_p;
        }
        if !(eps2 > T::zero()) {
            skipped.push(i);
            continue;
        }
        let fold = match fold_factors(model, &kbar, i) {
            Ok(f) => f,
            Err(_) => {
                skipped.push(i);
                continue;
            }
        };
        // The fold factors drop the kbar_ii scale of the true weighted Gram
        // matrix (eigenvectors do not need it); the spectrum restores it.
        let lambda: Vec<T> = fold
            .eigvals
            .iter()
            .map(|&v| (v / kbar[(i, i)]).max(T::zero()))
            .collect();
        let mut log_det_sigma = T::from_usize(n - r).unwrap() * eps2.ln();
        for &lam in &lambda {
            log_det_sigma += (lam + eps2).ln();
        }
        // X_i^T Sigma^{-1} X_i in order-r coordinates.
        let proj = fold.coords_held.tr_mul(&fold.eigvecs);
        let mut w = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let mut sum = T::zero();
                for q in 0..r {
                    sum += proj[(a, q)] * proj[(b, q)] / (lambda[q] + eps2);
                }
                w[(a, b)] = sum;
            }
        }
        let w_chol = match Cholesky::new(w) {
            Some(c) => c,
            None => {
                skipped.push(i);
                continue;
            }
        };
        let log_det_w = log_det_of_cholesky(&w_chol.l());
        let half = T::of(0.5);
        acc -= half
            * (T::from_usize(k).unwrap() * log_det_sigma + T::from_usize(n).unwrap() * log_det_w);
    }
    Ok(DensityReport {
        log_density: acc,
        skipped_folds: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::{sample_uniform, StiefelBasis};
    use crate::kernel::ParameterPoint;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn se(beta: f64) -> KernelSpec<f64> {
        KernelSpec::squared_exponential(vec![beta], 1e-10).unwrap()
    }

    fn random_model(n: usize, k: usize, l: usize, rng: &mut ChaCha8Rng) -> GpsModel<f64> {
        let points: Vec<_> = (0..l).map(|i| ParameterPoint::scalar(i as f64)).collect();
        let bases: Vec<_> = (0..l)
            .map(|_| sample_uniform::<f64, _>(n, k, rng).unwrap())
            .collect();
        GpsModel::fit(points, bases, se(1.0)).unwrap()
    }

    /// Seven line angles equally spaced over [0.2 pi, 1.8 pi] with lines
    /// spanned by (cos t, sin t); the standard smoke-test data set here.
    fn cylinder_model() -> GpsModel<f64> {
        let points: Vec<_> = (0..7)
            .map(|i| ParameterPoint::scalar((0.2 + 1.6 * i as f64 / 6.0) * std::f64::consts::PI))
            .collect();
        let bases: Vec<_> = points
            .iter()
            .map(|p| {
                let t = p.coords()[0];
                StiefelBasis::new(DMatrix::from_column_slice(2, 1, &[t.cos(), t.sin()])).unwrap()
            })
            .collect();
        GpsModel::fit(points, bases, se(2.8)).unwrap()
    }

    /// Brute-force LOOCV: refit a reduced model per fold and sum squared
    /// geodesic errors of the held-out predictions.
    fn loocv_refit_oracle(model: &GpsModel<f64>, beta: &[f64]) -> f64 {
        let kernel = model.kernel().with_lengthscales(beta).unwrap();
        let mut total = 0.0;
        for i in 0..model.len() {
            let points: Vec<_> = (0..model.len())
                .filter(|&j| j != i)
                .map(|j| model.points()[j].clone())
                .collect();
            let bases: Vec<_> = (0..model.len())
                .filter(|&j| j != i)
                .map(|j| model.bases()[j].clone())
                .collect();
            let sub = GpsModel::fit(points, bases, kernel.clone()).unwrap();
            let pred = sub.predict(&model.points()[i], sub.k()).unwrap();
            let d =
                riemannian_distance(&pred.mean_subspace().unwrap(), &model.bases()[i]).unwrap();
            total += d * d;
        }
        total
    }

    #[test]
    fn identical_bases_give_zero_error_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_uniform::<f64, _>(8, 2, &mut rng).unwrap();
        let points: Vec<_> = (0..4).map(|i| ParameterPoint::scalar(i as f64)).collect();
        let model = GpsModel::fit(points, vec![x; 4], se(1.0)).unwrap();
        let report = loocv_error(&model, &[1.0]).unwrap();
        assert!(report.total_error < 1e-12, "{}", report.total_error);
        assert!(report.skipped_folds.is_empty());
        let grad = loocv_gradient(&model, &[1.0], 4).unwrap();
        assert!(grad[0].abs() < 1e-10, "{}", grad[0]);
    }

    #[test]
    fn report_total_is_sum_of_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(12, 2, 5, &mut rng);
        let report = loocv_error(&model, &[1.3]).unwrap();
        let sum: f64 = report.per_point.iter().sum();
        assert!((report.total_error - sum).abs() <= 1e-12);
        let cap = 2.0 * (std::f64::consts::FRAC_PI_2).powi(2);
        for &e in &report.per_point {
            assert!((0.0..=cap + 1e-12).contains(&e));
        }
    }

    #[test]
    fn fast_path_matches_refit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(20, 2, 6, &mut rng);
        for beta in [0.7, 1.9] {
            let fast = loocv_error(&model, &[beta]).unwrap().total_error;
            let brute = loocv_refit_oracle(&model, &[beta]);
            assert_relative_eq!(fast, brute, max_relative = 1e-8);
        }
    }

    #[test]
    fn loo_correlation_identities_hold() {
        // (D_v K_{-i} D_v)^{-1} = kbar_ii^{-1} Delta_{-i} entrywise.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(10, 2, 5, &mut rng);
        let kernel = model.kernel().clone();
        let corr = corr_matrix(&kernel, model.points()).unwrap();
        let kbar = corr.clone().try_inverse().unwrap();
        let i = 2usize;
        let kept: Vec<usize> = (0..5).filter(|&j| j != i).collect();
        let sub_corr = DMatrix::from_fn(4, 4, |a, b| corr[(kept[a], kept[b])]);
        let kvec = DVector::from_fn(4, |a, _| corr[(kept[a], i)]);
        let v = sub_corr.clone().try_inverse().unwrap() * kvec;
        let dv = DMatrix::from_diagonal(&v);
        let direct = (&dv * sub_corr * &dv).try_inverse().unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let delta = kbar[(kept[a], kept[b])] * kbar[(i, i)]
                    / (kbar[(i, kept[a])] * kbar[(i, kept[b])])
                    - 1.0;
                assert_relative_eq!(direct[(a, b)], delta / kbar[(i, i)], max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn loocv_invariant_under_rotation_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(14, 2, 5, &mut rng);
        let base = loocv_error(&model, &[1.1]).unwrap().total_error;

        let rotated: Vec<_> = model
            .bases()
            .iter()
            .map(|b| {
                let q = sample_uniform::<f64, _>(2, 2, &mut rng).unwrap();
                StiefelBasis::new(b.matrix() * q.matrix()).unwrap()
            })
            .collect();
        let m2 = GpsModel::fit(model.points().to_vec(), rotated, model.kernel().clone()).unwrap();
        let rotated_err = loocv_error(&m2, &[1.1]).unwrap().total_error;
        assert_relative_eq!(base, rotated_err, max_relative = 1e-8);

        let perm = [3usize, 0, 4, 1, 2];
        let pts: Vec<_> = perm.iter().map(|&j| model.points()[j].clone()).collect();
        let bs: Vec<_> = perm.iter().map(|&j| model.bases()[j].clone()).collect();
        let m3 = GpsModel::fit(pts, bs, model.kernel().clone()).unwrap();
        let permuted_err = loocv_error(&m3, &[1.1]).unwrap().total_error;
        assert_relative_eq!(base, permuted_err, max_relative = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(20, 2, 6, &mut rng);
        for beta in [0.8, 1.6] {
            let g = loocv_gradient(&model, &[beta], 4).unwrap();
            let h = 1e-4 * beta;
            let fu = loocv_error(&model, &[beta + h]).unwrap().total_error;
            let fd = loocv_error(&model, &[beta - h]).unwrap().total_error;
            let fdg = (fu - fd) / (2.0 * h);
            assert_relative_eq!(g[0], fdg, max_relative = 1e-4);
        }
    }

    #[test]
    fn truncated_gradient_matches_exact_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(20, 2, 6, &mut rng);
        let approx = loocv_gradient_with(
            &model,
            &[1.2],
            GradientMethod::TruncatedPseudoInverse { tau: 4 },
        )
        .unwrap();
        let exact =
            loocv_gradient_with(&model, &[1.2], GradientMethod::ExactPseudoInverse).unwrap();
        assert_relative_eq!(approx[0], exact[0], max_relative = 1e-6);
    }

    #[test]
    fn acos_over_sine_guard_is_continuous() {
        let direct = acos_over_sine(1.0 - 1e-7);
        let series = acos_over_sine(1.0 - 1e-9);
        assert_relative_eq!(direct, 1.0, epsilon = 1e-6);
        assert_relative_eq!(series, 1.0, epsilon = 1e-6);
        assert_eq!(acos_over_sine(1.0), 1.0);
        assert_relative_eq!(
            acos_over_sine(0.5),
            0.5f64.acos() / 0.75f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rule_of_thumb_values() {
        let b = rule_of_thumb(1, 7, &[1.6 * std::f64::consts::PI]).unwrap();
        assert_relative_eq!(b[0], 3.0 / 7.0 * 1.6 * std::f64::consts::PI, epsilon = 1e-12);
        assert!((b[0] - 2.155).abs() < 1e-3);
        assert_eq!(rule_of_thumb(1, 3, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(
            rule_of_thumb(4, 24, &[1.0, 1.0, 1.0, 1.0]).unwrap(),
            vec![1.0; 4]
        );
        assert!(rule_of_thumb(2, 5, &[1.0]).is_err());
        assert!(rule_of_thumb(1, 5, &[0.0]).is_err());
    }

    #[test]
    fn tune_recovers_cylinder_lengthscale() {
        let model = cylinder_model();
        let result = tune(&model, &[(0.5, 10.0)], &[1.0], 60).unwrap();
        assert!(result.converged);
        assert!(
            (result.beta_star[0] - 2.8).abs() <= 0.5,
            "beta_star = {}",
            result.beta_star[0]
        );
        // Best of trace by construction.
        let best = result
            .trace
            .iter()
            .map(|(_, e)| *e)
            .fold(f64::INFINITY, f64::min);
        let at_star = loocv_error(&model, &result.beta_star).unwrap().total_error;
        assert!(at_star <= best + 1e-15);
    }

    #[test]
    fn tune_identical_bases_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = sample_uniform::<f64, _>(6, 2, &mut rng).unwrap();
        let points: Vec<_> = (0..4).map(|i| ParameterPoint::scalar(i as f64)).collect();
        let model = GpsModel::fit(points, vec![x; 4], se(1.0)).unwrap();
        let result = tune(&model, &[(0.5, 2.0)], &[1.0], 40).unwrap();
        assert!(result.converged);
        assert_eq!(result.beta_star, vec![1.0]);
        assert_eq!(result.trace.len(), 1);
        assert_eq!(result.trace[0].1, 0.0);
    }

    #[test]
    fn tune_multidimensional_beats_rule_of_thumb() {
        // Smooth synthetic 3-parameter family over the unit cube.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, k, l) = (10usize, 2usize, 14usize);
        let anchor = sample_uniform::<f64, _>(n, k, &mut rng).unwrap();
        let dir1 = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        let dir2 = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        let family = |t: &[f64]| {
            let m = anchor.matrix()
                + &dir1 * (0.4 * (t[0] + 0.3 * t[1]).sin())
                + &dir2 * (0.4 * (t[2] - 0.5 * t[1]).cos());
            crate::grassmann::orthonormalize(&m).unwrap()
        };
        let points: Vec<_> = (0..l)
            .map(|_| {
                ParameterPoint::new((0..3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
            })
            .collect();
        let bases: Vec<_> = points.iter().map(|p| family(p.coords())).collect();
        let kernel = KernelSpec::squared_exponential(vec![1.0, 1.0, 1.0], 1e-10).unwrap();
        let model = GpsModel::fit(points, bases, kernel).unwrap();

        let (bounds, init) = default_search_box(&model).unwrap();
        let result = tune(&model, &bounds, &init, 25).unwrap();
        let rule_err = loocv_error(&model, &init).unwrap().total_error;
        let tuned_err = loocv_error(&model, &result.beta_star).unwrap().total_error;
        assert!(tuned_err <= rule_err + 1e-15);
        for (j, &b) in result.beta_star.iter().enumerate() {
            assert!(b >= bounds[j].0 - 1e-12 && b <= bounds[j].1 + 1e-12);
        }
    }

    #[test]
    fn marginal_likelihood_single_point_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = sample_uniform::<f64, _>(3, 1, &mut rng).unwrap();
        let model = GpsModel::fit(vec![ParameterPoint::scalar(0.0)], vec![x], se(1.0)).unwrap();
        let value = log_modified_marginal_likelihood(&model, &[1.0]).unwrap();
        // l=1: |K| = 1 + jitter, B = I_k, leaving -(n-k)k/2 log 2pi.
        assert_relative_eq!(value, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-8);
    }

    #[test]
    fn marginal_likelihood_matches_dense_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, k, l) = (8usize, 2usize, 3usize);
        let model = random_model(n, k, l, &mut rng);
        let beta = [1.4];
        let fast = log_modified_marginal_likelihood(&model, &beta).unwrap();

        // Oracle: build the block-diagonal stack and K^{-1} (x) I_n literally.
        let kernel = model.kernel().with_lengthscales(&beta).unwrap();
        let corr = corr_matrix(&kernel, model.points()).unwrap();
        let kinv = corr.clone().try_inverse().unwrap();
        let mut xx = DMatrix::<f64>::zeros(n * l, k * l);
        for (i, b) in model.bases().iter().enumerate() {
            xx.view_mut((i * n, i * k), (n, k)).copy_from(b.matrix());
        }
        let breve = xx.transpose() * kinv.kronecker(&DMatrix::identity(n, n)) * &xx;
        let log_det_corr = corr.determinant().ln();
        let log_det_breve = breve.determinant().ln();
        let expect = -0.5 * ((n - k) * k * l) as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * k as f64 * (n as f64 * log_det_corr + log_det_breve);
        assert_relative_eq!(fast, expect, max_relative = 1e-8);
    }

    #[test]
    fn marginal_likelihood_increases_with_lengthscale_on_cylinder() {
        let model = cylinder_model();
        let mut last = f64::NEG_INFINITY;
        for i in 0..6 {
            let beta = 0.5 + 9.5 * i as f64 / 5.0;
            let v = log_modified_marginal_likelihood(&model, &[beta]).unwrap();
            assert!(v > last, "not increasing at beta={beta}: {v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn log_density_is_zero_for_effectively_uniform_predictions() {
        // Points so far apart (relative to the length-scale) that every
        // held-out prediction is the uniform prior: density == 1, log == 0.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bases: Vec<_> = (0..3)
            .map(|_| sample_uniform::<f64, _>(6, 2, &mut rng).unwrap())
            .collect();
        let points: Vec<_> = (0..3)
            .map(|i| ParameterPoint::scalar(1e6 * i as f64))
            .collect();
        let model = GpsModel::fit(points, bases, se(1.0)).unwrap();
        let report = loocv_log_density(&model, &[1.0]).unwrap();
        assert!(report.skipped_folds.is_empty());
        assert!(report.log_density.abs() < 1e-6, "{}", report.log_density);
    }

    #[test]
    fn log_density_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, k, l) = (10usize, 2usize, 4usize);
        let model = random_model(n, k, l, &mut rng);
        let beta = [1.5];
        let fast = loocv_log_density(&model, &beta).unwrap();
        assert!(fast.skipped_folds.is_empty());

        let kernel = model.kernel().with_lengthscales(&beta).unwrap();
        let mut expect = 0.0;
        for i in 0..l {
            let pts: Vec<_> = (0..l)
                .filter(|&j| j != i)
                .map(|j| model.points()[j].clone())
                .collect();
            let bs: Vec<_> = (0..l)
                .filter(|&j| j != i)
                .map(|j| model.bases()[j].clone())
                .collect();
            let sub = GpsModel::fit(pts, bs, kernel.clone()).unwrap();
            let sigma = sub.dense_covariance(&model.points()[i]).unwrap();
            let xi = model.bases()[i].matrix();
            let w = xi.transpose() * sigma.clone().try_inverse().unwrap() * xi;
            expect +=
                -0.5 * (k as f64 * sigma.determinant().ln() + n as f64 * w.determinant().ln());
        }
        assert_relative_eq!(fast.log_density, expect, max_relative = 1e-8);
    }

    #[test]
    fn log_density_finite_on_cylinder() {
        let model = cylinder_model();
        let report = loocv_log_density(&model, &[2.8]).unwrap();
        assert!(report.log_density.is_finite());
        assert!(report.skipped_folds.is_empty());
    }
}
