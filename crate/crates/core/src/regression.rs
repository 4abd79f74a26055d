//! Operator-inference regression: data matrix assembly and closed-form
//! least-squares, ridge, and Gaussian posterior estimates for each operator row.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::linalg;
use crate::tensorops::{d_dim, khatri_rao_compressed, StructureFlags};

/// `D = [Q̂ᵀ (Q̂⊙Q̂)ᵀ Uᵀ 1]` restricted to the enabled blocks.
pub fn build_data_matrix(
    qhat: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    flags: &StructureFlags,
) -> Result<DMatrix<f64>> {
    flags.validate()?;
    let (r, k) = qhat.shape();
    let layout = flags.layout(r);
    let mut d = DMatrix::zeros(k, layout.width);
    if let Some(cols) = layout.linear {
        d.columns_mut(cols.start, cols.len()).copy_from(&qhat.transpose());
    }
    if let Some(cols) = layout.quadratic {
        d.columns_mut(cols.start, cols.len())
            .copy_from(&khatri_rao_compressed(qhat).transpose());
    }
    if let Some(cols) = layout.input {
        let u = inputs.ok_or_else(|| {
            RomError::InvalidArgument(format!(
                "structure requires {} inputs but none were given",
                flags.inputs
            ))
        })?;
        if u.shape() != (flags.inputs, k) {
            return Err(RomError::DimensionMismatch(format!(
                "inputs are {}x{}, expected {}x{k}",
                u.nrows(),
                u.ncols(),
                flags.inputs
            )));
        }
        d.columns_mut(cols.start, cols.len()).copy_from(&u.transpose());
    }
    if let Some(cols) = layout.constant {
        d.column_mut(cols.start).fill(1.0);
    }
    Ok(d)
}

/// Feature vector `d(q̂, u)` for a single state, matching one row of `D`.
pub fn feature_vector(
    qhat: &DVector<f64>,
    input: Option<&DVector<f64>>,
    flags: &StructureFlags,
) -> Result<DVector<f64>> {
    let q = DMatrix::from_column_slice(qhat.len(), 1, qhat.as_slice());
    let u = input.map(|u| DMatrix::from_column_slice(u.len(), 1, u.as_slice()));
    let d = build_data_matrix(&q, u.as_ref(), flags)?;
    Ok(d.row(0).transpose())
}

/// The regression `D ô_i ≈ r_i`, `i = 1..r`, with the Gram matrix cached.
#[derive(Debug)]
pub struct RegressionData {
    d: DMatrix<f64>,
    targets: DMatrix<f64>,
    flags: StructureFlags,
    gram: DMatrix<f64>,
    gram_eigenvalues: OnceLock<Vec<f64>>,
}

impl Clone for RegressionData {
    fn clone(&self) -> Self {
        let ev = OnceLock::new();
        if let Some(v) = self.gram_eigenvalues.get() {
            let _ = ev.set(v.clone());
        }
        RegressionData {
            d: self.d.clone(),
            targets: self.targets.clone(),
            flags: self.flags,
            gram: self.gram.clone(),
            gram_eigenvalues: ev,
        }
    }
}

impl RegressionData {
    /// `d` is `k × d(r,m)`, `targets` (the derivative matrix `R`) is `r × k`.
    pub fn new(d: DMatrix<f64>, targets: DMatrix<f64>, flags: StructureFlags) -> Result<Self> {
        flags.validate()?;
        let r = targets.nrows();
        if d.ncols() != d_dim(r, &flags) {
            return Err(RomError::DimensionMismatch(format!(
                "data matrix has {} columns, d(r={r}) = {}",
                d.ncols(),
                d_dim(r, &flags)
            )));
        }
        Self::from_parts(d, targets, flags)
    }

    /// Assemble from projected states, optional inputs, and derivative targets.
    pub fn from_states(
        qhat: &DMatrix<f64>,
        inputs: Option<&DMatrix<f64>>,
        targets: DMatrix<f64>,
        flags: StructureFlags,
    ) -> Result<Self> {
        if qhat.shape() != targets.shape() {
            return Err(RomError::DimensionMismatch(format!(
                "states are {:?}, derivatives {:?}",
                qhat.shape(),
                targets.shape()
            )));
        }
        let d = build_data_matrix(qhat, inputs, &flags)?;
        Self::new(d, targets, flags)
    }

    /// No check that the column count matches the target count; used for
    /// single-row (whitened) problems.
    pub(crate) fn from_parts(
        d: DMatrix<f64>,
        targets: DMatrix<f64>,
        flags: StructureFlags,
    ) -> Result<Self> {
        if d.nrows() != targets.ncols() {
            return Err(RomError::DimensionMismatch(format!(
                "data matrix has {} rows, targets {} columns",
                d.nrows(),
                targets.ncols()
            )));
        }
        if d.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(RomError::Format("non-finite regression data".into()));
        }
        let gram = d.tr_mul(&d);
        Ok(RegressionData {
            d,
            targets,
            flags,
            gram,
            gram_eigenvalues: OnceLock::new(),
        })
    }

    pub fn data_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn target(&self, i: usize) -> DVector<f64> {
        self.targets.row(i).transpose()
    }

    pub fn flags(&self) -> StructureFlags {
        self.flags
    }

    /// Number of regression rows (reduced states).
    pub fn rows(&self) -> usize {
        self.targets.nrows()
    }

    /// Snapshot count `k`.
    pub fn k(&self) -> usize {
        self.d.nrows()
    }

    /// Unknowns per row, `d(r, m)`.
    pub fn dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Non-negative eigenvalues of `DᵀD`, decreasing; computed once.
    pub fn gram_eigenvalues(&self) -> &[f64] {
        self.gram_eigenvalues.get_or_init(|| {
            linalg::symmetric_eigenvalues(&self.gram)
                .into_iter()
                .map(|g| g.max(0.0))
                .collect()
        })
    }

    /// Condition number estimate of `DᵀD`.
    pub fn gram_condition(&self) -> f64 {
        let g = self.gram_eigenvalues();
        match (g.first(), g.last()) {
            (Some(&max), Some(&min)) if min > 0.0 => max / min,
            _ => f64::INFINITY,
        }
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.rows() {
            return Err(RomError::InvalidArgument(format!(
                "row {i} out of range for {} rows",
                self.rows()
            )));
        }
        Ok(())
    }

    fn check_vec(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(RomError::DimensionMismatch(format!(
                "{what} has {} entries, expected {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn dtr(&self, i: usize) -> DVector<f64> {
        self.d.tr_mul(&self.target(i))
    }
}

/// Gaussian posterior `N(μ_i, Σ_i)` over one operator row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance` used for sampling.
    pub covariance_factor: DMatrix<f64>,
    /// `σ*²`
    pub noise_var: f64,
    pub lambda: DVector<f64>,
    pub prior_mean: DVector<f64>,
}

impl RowPosterior {
    /// `δμ = μ − β`.
    pub fn correction(&self) -> DVector<f64> {
        &self.mean - &self.prior_mean
    }

    pub(crate) fn from_parts(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        noise_var: f64,
        lambda: DVector<f64>,
        prior_mean: DVector<f64>,
    ) -> Result<Self> {
        let covariance_factor = linalg::cholesky_jittered(&covariance)?;
        Ok(RowPosterior {
            mean,
            covariance,
            covariance_factor,
            noise_var,
            lambda,
            prior_mean,
        })
    }
}

/// Least-squares solution `D⁺ r_i` by QR.
pub fn solve_ols(data: &RegressionData, i: usize) -> Result<DVector<f64>> {
    data.check_row(i)?;
    let qr = checked_qr(data.data_matrix())?;
    Ok(qr_solve(&qr, &data.target(i)))
}

struct QrParts {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

fn checked_qr(a: &DMatrix<f64>) -> Result<QrParts> {
    let (k, d) = a.shape();
    if k < d {
        return Err(RomError::IllConditioned {
            condition: f64::INFINITY,
        });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > smax * (k.max(d) as f64) * f64::EPSILON) {
        let condition = if smin > 0.0 {
            (smax / smin).powi(2)
        } else {
            f64::INFINITY
        };
        return Err(RomError::IllConditioned { condition });
    }
    Ok(QrParts { q: qr.q(), r })
}

fn qr_solve(qr: &QrParts, b: &DVector<f64>) -> DVector<f64> {
    let qtb = qr.q.tr_mul(b);
    qr.r
        .solve_upper_triangular(&qtb)
        .expect("checked nonsingular R")
}

/// Posterior of row `i` for prior `N(β, σ² diag(λ)⁻¹)`, with `σ² = σ*²`.
///
/// All-zero `λ` is the uninformative limit and requires full column rank.
pub fn solve_posterior(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
) -> Result<RowPosterior> {
    data.check_row(i)?;
    data.check_vec(lambda, "λ")?;
    data.check_vec(prior_mean, "prior mean")?;
    if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(RomError::InvalidArgument(
            "λ entries must be finite and non-negative".into(),
        ));
    }
    let k = data.k() as f64;
    let target = data.target(i);
    if lambda.iter().all(|&l| l == 0.0) {
        let qr = checked_qr(data.data_matrix())?;
        let mean = qr_solve(&qr, &target);
        let resid = &target - data.data_matrix() * &mean;
        let noise_var = resid.norm_squared() / k;
        let rinv = qr
            .r
            .clone()
            .try_inverse()
            .ok_or(RomError::IllConditioned {
                condition: f64::INFINITY,
            })?;
        let mut cov = &rinv * rinv.transpose() * noise_var;
        linalg::symmetrize(&mut cov);
        return RowPosterior::from_parts(mean, cov, noise_var, lambda.clone(), prior_mean.clone());
    }
    let fit = ridge_normal(data, i, lambda, prior_mean)?;
    let mut cov = linalg::cholesky_inverse(&fit.factor) * fit.noise_var;
    linalg::symmetrize(&mut cov);
    RowPosterior::from_parts(
        fit.mean,
        cov,
        fit.noise_var,
        lambda.clone(),
        prior_mean.clone(),
    )
}

/// Normal-equation pieces shared by the posterior, evidence, and fixed-point code.
pub(crate) struct RidgeFit {
    pub mean: DVector<f64>,
    #[allow(dead_code)]
    pub correction: DVector<f64>,
    /// Lower Cholesky factor of `diag(λ) + DᵀD`.
    pub factor: DMatrix<f64>,
    pub residual_sq: f64,
    pub penalty: f64,
    pub noise_var: f64,
}

pub(crate) fn ridge_normal(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
) -> Result<RidgeFit> {
    let mut m = data.gram().clone();
    for j in 0..m.nrows() {
        m[(j, j)] += lambda[j];
    }
    let factor = m
        .cholesky()
        .ok_or_else(|| RomError::IllConditioned {
            condition: data.gram_condition(),
        })?
        .unpack();
    let rhs = data.dtr(i) - data.gram() * prior_mean;
    let correction = linalg::cholesky_solve(&factor, &rhs);
    let mean = prior_mean + &correction;
    let residual_sq = (data.target(i) - data.data_matrix() * &mean).norm_squared();
    let penalty: f64 = correction
        .iter()
        .zip(lambda.iter())
        .map(|(e, l)| l * e * e)
        .sum();
    let noise_var = (residual_sq + penalty) / data.k() as f64;
    Ok(RidgeFit {
        mean,
        correction,
        factor,
        residual_sq,
        penalty,
        noise_var,
    })
}

/// Tikhonov least squares `β + argmin_η ‖r − D(β+η)‖² + ‖diag(λ)^½ η‖²`,
/// solved by QR on the augmented system.
pub fn solve_ridge(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    data.check_row(i)?;
    data.check_vec(lambda, "λ")?;
    data.check_vec(prior_mean, "prior mean")?;
    if lambda.iter().any(|&l| !(l >= 0.0)) {
        return Err(RomError::InvalidArgument("λ entries must be non-negative".into()));
    }
    let (k, d) = data.data_matrix().shape();
    if lambda.iter().any(|l| l.is_infinite()) {
        // infinitely stiff prior entries stay at the prior mean
        let keep: Vec<usize> = (0..d).filter(|&j| lambda[j].is_finite()).collect();
        let sub = DMatrix::from_fn(k, keep.len(), |a, b| data.data_matrix()[(a, keep[b])]);
        let sub_l = DVector::from_fn(keep.len(), |j, _| lambda[keep[j]]);
        let resid = data.target(i) - data.data_matrix() * prior_mean;
        let eta = augmented_solve(&sub, &resid, &sub_l)?;
        let mut out = prior_mean.clone();
        for (e, &j) in eta.iter().zip(&keep) {
            out[j] += e;
        }
        return Ok(out);
    }
    let resid = data.target(i) - data.data_matrix() * prior_mean;
    Ok(prior_mean + augmented_solve(data.data_matrix(), &resid, lambda)?)
}

fn augmented_solve(
    d: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (k, p) = d.shape();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut a = DMatrix::zeros(k + p, p);
    a.rows_mut(0, k).copy_from(d);
    for j in 0..p {
        a[(k + j, j)] = lambda[j].sqrt();
    }
    let mut rhs = DVector::zeros(k + p);
    rhs.rows_mut(0, k).copy_from(b);
    let qr = checked_qr(&a)?;
    Ok(qr_solve(&qr, &rhs))
}

/// Log evidence `log N(r_i | Dβ, σ²(D diag(λ)⁻¹ Dᵀ + I))` in its expanded form.
pub fn log_marginal_likelihood(
    data: &RegressionData,
    i: usize,
    lambda: &DVector<f64>,
    prior_mean: &DVector<f64>,
    noise_var: f64,
) -> Result<f64> {
    data.check_row(i)?;
    data.check_vec(lambda, "λ")?;
    data.check_vec(prior_mean, "prior mean")?;
    if !(noise_var > 0.0) || lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(RomError::InvalidArgument(
            "log marginal likelihood needs σ² > 0 and λ > 0".into(),
        ));
    }
    let fit = ridge_normal(data, i, lambda, prior_mean)?;
    Ok(evidence_from_fit(&fit, lambda, noise_var, data.k()))
}

pub(crate) fn evidence_from_fit(fit: &RidgeFit, lambda: &DVector<f64>, noise_var: f64, k: usize) -> f64 {
    let k = k as f64;
    -(fit.residual_sq + fit.penalty) / (2.0 * noise_var) - 0.5 * linalg::cholesky_logdet(&fit.factor)
        + 0.5 * lambda.iter().map(|l| l.ln()).sum::<f64>()
        - 0.5 * k * noise_var.ln()
        - 0.5 * k * (2.0 * PI).ln()
}

/// Prior mean choice for every row.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorMean {
    Zero,
    /// `β_i = D⁺ r_i`.
    LeastSquares,
    Explicit(Vec<DVector<f64>>),
}

impl PriorMean {
    pub fn row(&self, data: &RegressionData, i: usize) -> Result<DVector<f64>> {
        match self {
            PriorMean::Zero => Ok(DVector::zeros(data.dim())),
            PriorMean::LeastSquares => solve_ols(data, i),
            PriorMean::Explicit(v) => v
                .get(i)
                .cloned()
                .ok_or_else(|| RomError::InvalidArgument(format!("no prior mean for row {i}"))),
        }
    }
}

/// Independent row posteriors, `p(Ô | D, R) = Π_i p(ô_i | D, r_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPosterior {
    pub rows: Vec<RowPosterior>,
    pub flags: StructureFlags,
    pub r: usize,
}

impl OperatorPosterior {
    /// Fit every row with its own regularization vector.
    pub fn fit(data: &RegressionData, lambdas: &[DVector<f64>], prior: &PriorMean) -> Result<Self> {
        if lambdas.len() != data.rows() {
            return Err(RomError::DimensionMismatch(format!(
                "{} λ vectors for {} rows",
                lambdas.len(),
                data.rows()
            )));
        }
        let rows = (0..data.rows())
            .into_par_iter()
            .map(|i| solve_posterior(data, i, &lambdas[i], &prior.row(data, i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(OperatorPosterior {
            rows,
            flags: data.flags(),
            r: data.rows(),
        })
    }

    /// Scalar `λ_i` per row, applied uniformly across the row.
    pub fn fit_uniform(data: &RegressionData, lambdas: &[f64], prior: &PriorMean) -> Result<Self> {
        let v: Vec<DVector<f64>> = lambdas
            .iter()
            .map(|&l| DVector::from_element(data.dim(), l))
            .collect();
        Self::fit(data, &v, prior)
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.mean.len())
    }

    pub fn inputs(&self) -> usize {
        self.flags.inputs
    }

    /// Posterior-mean operator matrix `[μ_1 … μ_r]ᵀ`.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r, self.dim(), |i, j| self.rows[i].mean[j])
    }

    pub fn noise_vars(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.noise_var).collect()
    }

    pub fn to_record(&self) -> PosteriorRecord {
        PosteriorRecord {
            format: POSTERIOR_FORMAT.to_string(),
            version: 1,
            r: self.r,
            m: self.flags.inputs,
            flags: self.flags,
            rows: self
                .rows
                .iter()
                .map(|row| RowRecord {
                    mean: row.mean.as_slice().to_vec(),
                    covariance_cholesky: pack_lower(&row.covariance_factor),
                    noise_var: row.noise_var,
                    lambda: row.lambda.as_slice().to_vec(),
                    prior_mean: row.prior_mean.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &PosteriorRecord) -> Result<Self> {
        if rec.format != POSTERIOR_FORMAT || rec.version != 1 {
            return Err(RomError::Format(format!(
                "unsupported posterior container {} v{}",
                rec.format, rec.version
            )));
        }
        rec.flags.validate()?;
        let d = d_dim(rec.r, &rec.flags);
        if rec.rows.len() != rec.r || rec.m != rec.flags.inputs {
            return Err(RomError::Format("posterior row count or input size mismatch".into()));
        }
        let rows = rec
            .rows
            .iter()
            .map(|row| {
                if row.mean.len() != d
                    || row.lambda.len() != d
                    || row.prior_mean.len() != d
                    || row.covariance_cholesky.len() != d * (d + 1) / 2
                {
                    return Err(RomError::Format("posterior row has wrong dimension".into()));
                }
                if !(row.noise_var > 0.0) && row.noise_var != 0.0 {
                    return Err(RomError::Format("negative noise variance".into()));
                }
                let l = unpack_lower(&row.covariance_cholesky, d);
                let mut cov = &l * l.transpose();
                linalg::symmetrize(&mut cov);
                Ok(RowPosterior {
                    mean: DVector::from_vec(row.mean.clone()),
                    covariance: cov,
                    covariance_factor: l,
                    noise_var: row.noise_var,
                    lambda: DVector::from_vec(row.lambda.clone()),
                    prior_mean: DVector::from_vec(row.prior_mean.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OperatorPosterior {
            rows,
            flags: rec.flags,
            r: rec.r,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: PosteriorRecord = serde_json::from_str(s)?;
        Self::from_record(&rec)
    }
}

const POSTERIOR_FORMAT: &str = "bayesrom-posterior";

/// On-disk form of an [`OperatorPosterior`]. Covariances are stored as their
/// lower Cholesky factors, packed row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub format: String,
    pub version: u32,
    pub r: usize,
    pub m: usize,
    pub flags: StructureFlags,
    pub rows: Vec<RowRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub mean: Vec<f64>,
    pub covariance_cholesky: Vec<f64>,
    pub noise_var: f64,
    pub lambda: Vec<f64>,
    pub prior_mean: Vec<f64>,
}

fn pack_lower(l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    out
}

fn unpack_lower(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    let mut at = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = v[at];
            at += 1;
        }
    }
    l
}
