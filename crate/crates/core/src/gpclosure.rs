//! Time-correlated residual model: a Gaussian-process noise term turns the
//! row regression into generalized least squares and yields a closure
//! surrogate for the reduced dynamics.
//!
//! Everything is computed by whitening with the Cholesky factor `L_K` of the
//! kernel matrix, which reduces each quantity to the independent-noise case.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};
use crate::linalg;
use crate::regression::{log_marginal_likelihood, solve_posterior, RegressionData, RowPosterior};

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `κ(t,t') = exp(−(t−t')²/(2ℓ²))`.
    SquaredExponential { length_scale: f64 },
    /// `κ(t,t') = 1` if `t = t'`, else 0; gives `K = I`.
    White,
    /// Explicit `k × k` kernel matrix; prediction is limited to training times.
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kernel: Kernel,
    /// Added to the diagonal of the training kernel matrix.
    pub nugget: f64,
}

impl KernelSpec {
    pub fn squared_exponential(length_scale: f64, nugget: f64) -> Self {
        KernelSpec {
            kernel: Kernel::SquaredExponential { length_scale },
            nugget,
        }
    }

    pub fn white() -> Self {
        KernelSpec {
            kernel: Kernel::White,
            nugget: 0.0,
        }
    }

    pub fn dense(k: DMatrix<f64>) -> Self {
        KernelSpec {
            kernel: Kernel::Dense(k),
            nugget: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0) {
            return Err(RomError::InvalidArgument("nugget must be non-negative".into()));
        }
        if let Kernel::SquaredExponential { length_scale } = self.kernel {
            if !(length_scale > 0.0) || !length_scale.is_finite() {
                return Err(RomError::InvalidArgument("length scale must be positive".into()));
            }
        }
        Ok(())
    }

    fn eval(&self, t: f64, s: f64) -> f64 {
        match &self.kernel {
            Kernel::SquaredExponential { length_scale } => {
                let d = (t - s) / length_scale;
                (-0.5 * d * d).exp()
            }
            Kernel::White => {
                if t == s {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Dense(_) => unreachable!("dense kernels have no closed form"),
        }
    }

    /// Training matrix `K = κ(T,T) + nugget·I`.
    pub fn matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        let k = times.len();
        let mut m = match &self.kernel {
            Kernel::Dense(m) => {
                if m.shape() != (k, k) {
                    return Err(RomError::DimensionMismatch(format!(
                        "kernel matrix is {}x{}, expected {k}x{k}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                let mut s = m.clone();
                linalg::symmetrize(&mut s);
                s
            }
            Kernel::White => DMatrix::identity(k, k),
            _ => DMatrix::from_fn(k, k, |a, b| self.eval(times[a], times[b])),
        };
        for j in 0..k {
            m[(j, j)] += self.nugget;
        }
        Ok(m)
    }

    /// Cross covariance `κ(t_q, T)` (rows are queries), without the nugget.
    fn cross(&self, queries: &[f64], times: &[f64]) -> Result<DMatrix<f64>> {
        match &self.kernel {
            Kernel::Dense(m) => {
                let mut out = DMatrix::zeros(queries.len(), times.len());
                for (a, tq) in queries.iter().enumerate() {
                    let j = times.iter().position(|t| t == tq).ok_or_else(|| {
                        RomError::InvalidArgument(
                            "a dense kernel can only be queried at training times".into(),
                        )
                    })?;
                    out.row_mut(a).copy_from(&m.row(j));
                }
                Ok(out)
            }
            _ => Ok(DMatrix::from_fn(queries.len(), times.len(), |a, b| {
                self.eval(queries[a], times[b])
            })),
        }
    }

    fn query(&self, queries: &[f64], times: &[f64]) -> Result<DMatrix<f64>> {
        match &self.kernel {
            Kernel::Dense(m) => {
                let idx = queries
                    .iter()
                    .map(|tq| {
                        times.iter().position(|t| t == tq).ok_or_else(|| {
                            RomError::InvalidArgument(
                                "a dense kernel can only be queried at training times".into(),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]))
            }
            _ => Ok(DMatrix::from_fn(queries.len(), queries.len(), |a, b| {
                self.eval(queries[a], queries[b])
            })),
        }
    }
}

/// Row posterior under the kernel-correlated residual model.
#[derive(Debug, Clone)]
pub struct GpRowPosterior {
    /// `μ`, `Σ = σ²[diag(λ) + DᵀK⁻¹D]⁻¹` and `σ*²` in the same form as the
    /// independent-noise posterior.
    pub posterior: RowPosterior,
    pub kernel: KernelSpec,
    pub times: Vec<f64>,
    /// Lower Cholesky factor of `K`.
    pub kernel_factor: DMatrix<f64>,
    /// `K⁻¹(r − Dμ)`.
    pub weights: DVector<f64>,
    /// `K⁻¹D`.
    pub kinv_d: DMatrix<f64>,
}

struct Whitened {
    factor: DMatrix<f64>,
    data: RegressionData,
}

fn whiten(data: &RegressionData, i: usize, kernel: &KernelSpec, times: &[f64]) -> Result<Whitened> {
    if i >= data.rows() {
        return Err(RomError::InvalidArgument(format!("row {i} out of range")));
    }
    if times.len() != data.k() {
        return Err(RomError::DimensionMismatch(format!(
            "{} times for {} snapshots",
            times.len(),
            data.k()
        )));
    }
    if !matches!(kernel.kernel, Kernel::Dense(_)) && times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RomError::InvalidArgument(
            "kernel times must be strictly increasing".into(),
        ));
    }
    let k = kernel.matrix(times)?;
    let factor = linalg::cholesky_jittered(&k)?;
    if factor.diagonal().iter().any(|&v| !(v > 0.0)) {
        return Err(RomError::NotPositiveDefinite("kernel matrix is singular".into()));
    }
    let d = factor
        .solve_lower_triangular(data.data_matrix())
        .ok_or_else(|| RomError::NotPositiveDefinite("kernel factor is singular".into()))?;
    let r = factor
        .solve_lower_triangular(&data.target(i))
        .ok_or_else(|| RomError::NotPositiveDefinite("kernel factor is singular".into()))?;
    let data = RegressionData::from_parts(d, DMatrix::from_row_slice(1, r.len(), r.as_slice()), data.flags())?;
    Ok(Whitened { factor, data })
}

/// Posterior of row `i` with residual covariance `σ²K`.
pub fn gp_posterior(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
    kernel: &KernelSpec,
    times: &[f64],
) -> Result<GpRowPosterior> {
    let w = whiten(data, i, kernel, times)?;
    let posterior = solve_posterior(&w.data, 0, lambda, prior_mean)?;
    let resid = data.target(i) - data.data_matrix() * &posterior.mean;
    let weights = linalg::cholesky_solve(&w.factor, &resid);
    let kinv_d = w
        .factor
        .transpose()
        .solve_upper_triangular(w.data.data_matrix())
        .expect("factor checked nonsingular");
    Ok(GpRowPosterior {
        posterior,
        kernel: kernel.clone(),
        times: times.to_vec(),
        kernel_factor: w.factor,
        weights,
        kinv_d,
    })
}

/// `log N(r_i | Dβ, σ²(D diag(λ)⁻¹ Dᵀ + K))`.
pub fn gp_marginal_likelihood(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
    noise_var: f64,
    kernel: &KernelSpec,
    times: &[f64],
) -> Result<f64> {
    let w = whiten(data, i, kernel, times)?;
    let white = log_marginal_likelihood(&w.data, 0, lambda, prior_mean, noise_var)?;
    Ok(white - w.factor.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Posterior of `dq̂_i/dt` at query points.
#[derive(Debug, Clone)]
pub struct GpPrediction {
    /// `d(t)ᵀμ + κ(t,T)K⁻¹(r − Dμ)`.
    pub mean: DVector<f64>,
    /// The closure part of the mean, `κ(t,T)K⁻¹(r − Dμ)`.
    pub closure_mean: DVector<f64>,
    /// `[dᵀ − κ(t,T)K⁻¹D] Σ [d − DᵀK⁻¹κ(T,t')]`.
    pub structural_covariance: DMatrix<f64>,
    /// `σ²[κ(t,t') − κ(t,T)K⁻¹κ(T,t')]`.
    pub closure_covariance: DMatrix<f64>,
}

impl GpPrediction {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.structural_covariance + &self.closure_covariance
    }
}

/// Predict the reduced time derivative at query feature rows `features`
/// (`q × d`, rows `d(q̂(t), u(t))ᵀ`) and their times.
pub fn gp_predict_derivative(gp: &GpRowPosterior, features: &DMatrix<f64>, query_times: &[f64]) -> Result<GpPrediction> {
    let d = gp.posterior.mean.len();
    if features.ncols() != d || features.nrows() != query_times.len() {
        return Err(RomError::DimensionMismatch(format!(
            "features are {}x{} for {} query times, expected {d} columns",
            features.nrows(),
            features.ncols(),
            query_times.len()
        )));
    }
    let kx = gp.kernel.cross(query_times, &gp.times)?;
    let kqq = gp.kernel.query(query_times, &gp.times)?;
    let closure_mean = &kx * &gp.weights;
    let mean = features * &gp.posterior.mean + &closure_mean;
    let adjusted = features - &kx * &gp.kinv_d;
    let mut structural = &adjusted * &gp.posterior.covariance * adjusted.transpose();
    let mut closure = if gp.kernel.nugget > 0.0 {
        conditional_covariance_with_nugget(gp, &kx, &kqq)?
    } else {
        // κ(t,T)K⁻¹κ(T,t') through the whitened cross covariance
        let v = gp
            .kernel_factor
            .solve_lower_triangular(&kx.transpose())
            .expect("factor checked nonsingular");
        kqq - v.tr_mul(&v)
    };
    closure *= gp.posterior.noise_var;
    linalg::symmetrize(&mut structural);
    linalg::symmetrize(&mut closure);
    Ok(GpPrediction {
        mean,
        closure_mean,
        structural_covariance: structural,
        closure_covariance: closure,
    })
}

/// `κ(t,t') − κ(t,T)[κ(T,T) + νI]⁻¹κ(T,t')` for nugget `ν > 0`.
///
/// Subtracting the two terms directly loses about `ε/ν` to cancellation
/// when `κ(T,T)` is smooth. Instead factor the noise-free joint kernel over
/// training and query times as `L Lᵀ` and take the covariance of `L_q z`
/// given `L_T z + e`: `ν L_q (νI + L_TᵀL_T)⁻¹ L_qᵀ`, a Gram matrix.
fn conditional_covariance_with_nugget(gp: &GpRowPosterior, kx: &DMatrix<f64>, kqq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let nu = gp.kernel.nugget;
    let (q, k) = kx.shape();
    let mut joint = DMatrix::zeros(k + q, k + q);
    let mut ktt = gp.kernel.matrix(&gp.times)?;
    for j in 0..k {
        ktt[(j, j)] -= nu;
    }
    joint.view_mut((0, 0), (k, k)).copy_from(&ktt);
    joint.view_mut((k, 0), (q, k)).copy_from(kx);
    joint.view_mut((0, k), (k, q)).copy_from(&kx.transpose());
    joint.view_mut((k, k), (q, q)).copy_from(kqq);
    linalg::symmetrize(&mut joint);
    // square root through the eigendecomposition; the noise-free joint kernel
    // is often singular to working precision, so roundoff negatives become 0
    let eig = joint.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut l = eig.eigenvectors;
    for (mut c, s) in l.column_iter_mut().zip(roots.iter()) {
        c *= *s;
    }
    let lt = l.rows(0, k);
    let mut a = lt.tr_mul(&lt);
    for j in 0..k + q {
        a[(j, j)] += nu;
    }
    let w = a
        .cholesky()
        .ok_or_else(|| RomError::NotPositiveDefinite("whitened posterior precision".into()))?;
    let g = w
        .l()
        .solve_lower_triangular(&l.rows(k, q).transpose())
        .expect("Cholesky factor is nonsingular");
    Ok(g.tr_mul(&g) * nu)
}

/// Length scale on `grid` maximizing the evidence, with `σ²` at its closed-form
/// optimum for each candidate. Returns the winner and every `(ℓ, log evidence)`.
pub fn select_length_scale(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
    times: &[f64],
    grid: &[f64],
    nugget: f64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(RomError::InvalidArgument("empty length-scale grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &ell in grid {
        let spec = KernelSpec::squared_exponential(ell, nugget);
        let score = gp_posterior(data, i, lambda, prior_mean, &spec, times).and_then(|gp| {
            gp_marginal_likelihood(data, i, lambda, prior_mean, gp.posterior.noise_var, &spec, times)
        });
        scores.push((ell, score.unwrap_or(f64::NEG_INFINITY)));
    }
    let best = scores
        .iter()
        .filter(|s| s.1.is_finite())
        .fold(None::<(f64, f64)>, |acc, s| match acc {
            Some(a) if a.1 >= s.1 => Some(a),
            _ => Some(*s),
        })
        .ok_or_else(|| RomError::NotPositiveDefinite("no length scale gave a valid kernel".into()))?;
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::StructureFlags;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_data(k: usize, d: usize, seed: u64) -> (RegressionData, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let t = DMatrix::from_fn(1, k, |_, _| rng.random_range(-1.0..1.0));
        let times = (0..k).map(|j| j as f64 * 0.1).collect();
        (RegressionData::from_parts(dm, t, StructureFlags::full(0)).unwrap(), times)
    }

    fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(k, k) * 0.5
    }

    #[test]
    fn white_kernel_reduces_to_base_posterior() {
        for seed in 0..20 {
            let (data, times) = random_data(30, 4, seed);
            let lam = DVector::from_element(4, 0.7);
            let beta = DVector::from_element(4, 0.1);
            let gp = gp_posterior(&data, 0, &lam, &beta, &KernelSpec::white(), &times).unwrap();
            let base = solve_posterior(&data, 0, &lam, &beta).unwrap();
            assert!((&gp.posterior.mean - &base.mean).abs().max() <= 1e-10);
            assert!((&gp.posterior.covariance - &base.covariance).abs().max() <= 1e-10);
            assert!((gp.posterior.noise_var - base.noise_var).abs() <= 1e-10);
            let a = gp_marginal_likelihood(&data, 0, &lam, &beta, 0.3, &KernelSpec::white(), &times).unwrap();
            let b = log_marginal_likelihood(&data, 0, &lam, &beta, 0.3).unwrap();
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn scaled_identity_matches_whitened_data() {
        let (data, times) = random_data(20, 3, 1);
        let c = 4.0;
        let lam = DVector::from_element(3, 0.5);
        let zero = DVector::zeros(3);
        let gp = gp_posterior(&data, 0, &lam, &zero, &KernelSpec::dense(DMatrix::identity(20, 20) * c), &times).unwrap();
        let scaled = RegressionData::from_parts(
            data.data_matrix() / c.sqrt(),
            data.targets() / c.sqrt(),
            data.flags(),
        )
        .unwrap();
        let base = solve_posterior(&scaled, 0, &lam, &zero).unwrap();
        assert!((&gp.posterior.mean - &base.mean).abs().max() <= 1e-12);
        assert!((&gp.posterior.covariance - &base.covariance).abs().max() <= 1e-12);
    }

    #[test]
    fn dense_kernel_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, times) = random_data(4, 2, 3);
        let k = random_spd(4, &mut rng);
        let lam = DVector::from_vec(vec![0.4, 1.3]);
        let beta = DVector::from_vec(vec![0.2, -0.1]);
        let gp = gp_posterior(&data, 0, &lam, &beta, &KernelSpec::dense(k.clone()), &times).unwrap();
        let d = data.data_matrix();
        let r = data.target(0);
        let kinv = k.clone().try_inverse().unwrap();
        let a = DMatrix::from_diagonal(&lam) + d.transpose() * &kinv * d;
        let ainv = a.try_inverse().unwrap();
        let mu = &beta + &ainv * d.transpose() * &kinv * (&r - d * &beta);
        let dm = &mu - &beta;
        let res = &r - d * &mu;
        let s2 = ((res.transpose() * &kinv * &res)[(0, 0)]
            + dm.iter().zip(lam.iter()).map(|(e, l)| l * e * e).sum::<f64>())
            / 4.0;
        assert!((&gp.posterior.mean - &mu).abs().max() <= 1e-10);
        assert!((gp.posterior.noise_var - s2).abs() <= 1e-10);
        assert!((&gp.posterior.covariance - ainv * s2).abs().max() <= 1e-10);

        // evidence against the dense Gaussian density
        let s2e = 0.6;
        let c = (d * DMatrix::from_diagonal(&lam.map(|l| 1.0 / l)) * d.transpose() + &k) * s2e;
        let e = &r - d * &beta;
        let cinv = c.clone().try_inverse().unwrap();
        let dense = -0.5 * (e.transpose() * cinv * &e)[(0, 0)] - 0.5 * c.determinant().ln() - 2.0 * (2.0 * PI).ln();
        let ours = gp_marginal_likelihood(&data, 0, &lam, &beta, s2e, &KernelSpec::dense(k), &times).unwrap();
        assert!((ours - dense).abs() <= 1e-10);
    }

    #[test]
    fn scalar_evidence_matches_hand_density() {
        let data = RegressionData::from_parts(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            StructureFlags::full(0),
        )
        .unwrap();
        let kv = 0.5;
        let (lam, beta, s2) = (4.0, 0.25, 0.3);
        let var = s2 * (2.0 * 2.0 / lam + kv);
        let e: f64 = 1.0 - 2.0 * beta;
        let hand = -0.5 * e * e / var - 0.5 * (2.0 * PI * var).ln();
        let ours = gp_marginal_likelihood(
            &data,
            0,
            &DVector::from_element(1, lam),
            &DVector::from_element(1, beta),
            s2,
            &KernelSpec::dense(DMatrix::from_element(1, 1, kv)),
            &[0.0],
        )
        .unwrap();
        assert!((ours - hand).abs() < 1e-12);
    }

    #[test]
    fn evidence_is_continuous_in_jitter() {
        let (data, times) = random_data(15, 3, 4);
        let lam = DVector::from_element(3, 1.0);
        let zero = DVector::zeros(3);
        let f = |nug: f64| {
            gp_marginal_likelihood(&data, 0, &lam, &zero, 0.5, &KernelSpec::squared_exponential(0.2, nug), &times).unwrap()
        };
        let base = f(1e-2);
        let slope = (f(1e-2 + 1e-6) - base) / 1e-6;
        assert!(slope.is_finite());
        for delta in [1e-5, 1e-7] {
            let s = (f(1e-2 + delta) - base) / delta;
            assert!((s - slope).abs() <= 1e-2 * slope.abs().max(1.0), "{s} vs {slope}");
        }
    }

    #[test]
    fn interpolates_at_training_times() {
        let (data, times) = random_data(12, 2, 5);
        let spec = KernelSpec::squared_exponential(0.15, 1e-10);
        let lam = DVector::from_element(2, 1e-10);
        let gp = gp_posterior(&data, 0, &lam, &DVector::zeros(2), &spec, &times).unwrap();
        let idx = [0usize, 5, 11];
        let feats = DMatrix::from_fn(3, 2, |a, b| data.data_matrix()[(idx[a], b)]);
        let tq: Vec<f64> = idx.iter().map(|&j| times[j]).collect();
        let p = gp_predict_derivative(&gp, &feats, &tq).unwrap();
        for (a, &j) in idx.iter().enumerate() {
            assert!((p.mean[a] - data.targets()[(0, j)]).abs() < 1e-6);
        }
    }

    #[test]
    fn white_kernel_off_grid_gives_finite_rank_covariance() {
        let (data, times) = random_data(25, 3, 6);
        let lam = DVector::from_element(3, 0.3);
        let gp = gp_posterior(&data, 0, &lam, &DVector::zeros(3), &KernelSpec::white(), &times).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let tq = [0.05, 0.15, 0.77, 1.33];
        let p = gp_predict_derivative(&gp, &feats, &tq).unwrap();
        let remark = &feats * &gp.posterior.covariance * feats.transpose();
        assert!((&p.structural_covariance - remark).abs().max() <= 1e-12);
        assert!(p.closure_mean.iter().all(|&v| v == 0.0));
        assert!((&p.mean - &feats * &gp.posterior.mean).abs().max() == 0.0);
    }

    #[test]
    fn exact_model_has_no_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 30;
        let dm = DMatrix::from_fn(k, 3, |_, _| rng.random_range(-1.0..1.0));
        let o = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let t = DMatrix::from_row_slice(1, k, (&dm * &o).as_slice());
        let data = RegressionData::from_parts(dm, t, StructureFlags::full(0)).unwrap();
        let times: Vec<f64> = (0..k).map(|j| j as f64 * 0.05).collect();
        let spec = KernelSpec::squared_exponential(0.1, 1e-8);
        let gp = gp_posterior(&data, 0, &DVector::from_element(3, 1e-12), &DVector::zeros(3), &spec, &times).unwrap();
        let feats = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let tq = [0.01, 0.3, 0.61, 1.0, 1.4];
        let p = gp_predict_derivative(&gp, &feats, &tq).unwrap();
        assert!(p.closure_mean.norm() <= 1e-8);
    }

    #[test]
    fn predictive_covariance_is_psd() {
        for seed in 0..10 {
            let (data, times) = random_data(20, 3, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = KernelSpec::squared_exponential(rng.random_range(0.05..1.0), 1e-8);
            let gp = gp_posterior(&data, 0, &DVector::from_element(3, 0.5), &DVector::zeros(3), &spec, &times).unwrap();
            let nq = 8;
            let feats = DMatrix::from_fn(nq, 3, |_, _| rng.random_range(-1.0..1.0));
            let mut tq: Vec<f64> = (0..nq).map(|_| rng.random_range(0.0..2.0)).collect();
            tq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let c = gp_predict_derivative(&gp, &feats, &tq).unwrap().covariance();
            let scale = c.abs().max().max(1.0);
            let min = linalg::symmetric_eigenvalues(&c).last().copied().unwrap();
            assert!(min >= -1e-8 * scale, "{min}");
        }
    }

    #[test]
    fn closure_covariance_matches_direct_schur_complement() {
        let (data, times) = random_data(25, 3, 31);
        let spec = KernelSpec::squared_exponential(0.2, 1e-2);
        let gp = gp_posterior(&data, 0, &DVector::from_element(3, 0.5), &DVector::zeros(3), &spec, &times).unwrap();
        let tq = [0.013, 0.4, 0.77, 1.1];
        let feats = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        let p = gp_predict_derivative(&gp, &feats, &tq).unwrap();
        let kq = DMatrix::from_fn(4, 4, |a, b| (-0.5 * ((tq[a] - tq[b]) / 0.2f64).powi(2)).exp());
        let kx = DMatrix::from_fn(4, times.len(), |a, b| (-0.5 * ((tq[a] - times[b]) / 0.2f64).powi(2)).exp());
        let kinv = spec.matrix(&times).unwrap().try_inverse().unwrap();
        let direct = (kq - &kx * kinv * kx.transpose()) * gp.posterior.noise_var;
        let err = (&p.closure_covariance - &direct).norm() / direct.norm();
        assert!(err <= 1e-10, "{err:e}");
    }

    #[test]
    fn smooth_kernel_closure_covariance_stays_psd() {
        // tiny nugget: the direct difference goes indefinite at ~ε/ν
        let (data, times) = random_data(60, 3, 32);
        let spec = KernelSpec::squared_exponential(0.5, 1e-8);
        let gp = gp_posterior(&data, 0, &DVector::from_element(3, 1.0), &DVector::zeros(3), &spec, &times).unwrap();
        let tq: Vec<f64> = (0..20).map(|j| 0.013 + j as f64 * 0.13).collect();
        let feats = DMatrix::zeros(20, 3);
        let c = gp_predict_derivative(&gp, &feats, &tq).unwrap().closure_covariance;
        let scale = c.diagonal().amax();
        let min = linalg::symmetric_eigenvalues(&c).last().copied().unwrap();
        assert!(min >= -1e-12 * scale, "{min:e} vs {scale:e}");
    }

    #[test]
    fn gls_mean_is_locally_optimal() {
        let (data, times) = random_data(15, 3, 9);
        let spec = KernelSpec::squared_exponential(0.3, 1e-3);
        let lam = DVector::from_vec(vec![0.2, 0.5, 1.0]);
        let beta = DVector::from_vec(vec![0.1, 0.0, -0.1]);
        let gp = gp_posterior(&data, 0, &lam, &beta, &spec, &times).unwrap();
        let kinv = spec.matrix(&times).unwrap().try_inverse().unwrap();
        let obj = |eta: &DVector<f64>| {
            let e = data.target(0) - data.data_matrix() * (&beta + eta);
            (e.transpose() * &kinv * &e)[(0, 0)] + eta.iter().zip(lam.iter()).map(|(x, l)| l * x * x).sum::<f64>()
        };
        let best = obj(&gp.posterior.correction());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let p = DVector::from_fn(3, |_, _| rng.random_range(-1e-3..1e-3));
            assert!(obj(&(gp.posterior.correction() + p)) >= best);
        }
    }

    #[test]
    fn length_scale_grid_prefers_the_generating_scale() {
        // residuals drawn from a smooth GP favour a long length scale over a tiny one
        let k = 40;
        let times: Vec<f64> = (0..k).map(|j| j as f64 * 0.05).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kt = KernelSpec::squared_exponential(0.5, 1e-6).matrix(&times).unwrap();
        let l = kt.cholesky().unwrap().unpack();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let noise = l * z * 0.1;
        let dm = DMatrix::from_fn(k, 2, |j, c| if c == 0 { 1.0 } else { times[j] });
        let y = &dm * DVector::from_vec(vec![1.0, -0.5]) + noise;
        let data = RegressionData::from_parts(dm, DMatrix::from_row_slice(1, k, y.as_slice()), StructureFlags::full(0)).unwrap();
        let grid = [0.01, 0.5];
        let (best, scores) = select_length_scale(&data, 0, &DVector::from_element(2, 1e-3), &DVector::zeros(2), &times, &grid, 1e-6).unwrap();
        assert_eq!(best, 0.5);
        assert_eq!(scores.len(), 2);
    }

    #[test]
    fn dimension_errors() {
        let (data, times) = random_data(10, 2, 12);
        let lam = DVector::from_element(2, 1.0);
        let zero = DVector::zeros(2);
        assert!(gp_posterior(&data, 0, &lam, &zero, &KernelSpec::white(), &times[..9]).is_err());
        let gp = gp_posterior(&data, 0, &lam, &zero, &KernelSpec::white(), &times).unwrap();
        assert!(gp_predict_derivative(&gp, &DMatrix::zeros(2, 3), &[0.0, 1.0]).is_err());
        assert!(gp_posterior(&data, 0, &lam, &zero, &KernelSpec::dense(DMatrix::identity(3, 3)), &times).is_err());
    }
}
