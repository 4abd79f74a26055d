//! Small dense linear-algebra helpers shared by the regression and sampling code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RomError};

/// Number of ×10 jitter escalations attempted after the initial jitter.
const JITTER_ESCALATIONS: usize = 3;
const JITTER_SCALE: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Tries the plain factorization first, then adds `1e-12·tr(S)/d` to the
/// diagonal and escalates that jitter by ×10 up to three times. The zero
/// matrix factors to the zero matrix.
pub fn cholesky_jittered(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if d != s.ncols() {
        return Err(RomError::DimensionMismatch(format!(
            "Cholesky of a {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(RomError::NotPositiveDefinite("non-finite entries".into()));
    }
    if s.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    if let Some(c) = s.clone().cholesky() {
        return Ok(c.unpack());
    }
    let trace = s.trace();
    if trace <= 0.0 {
        return Err(RomError::NotPositiveDefinite(format!(
            "non-positive trace {trace:e}"
        )));
    }
    let mut jitter = JITTER_SCALE * trace / d as f64;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut m = s.clone();
        for j in 0..d {
            m[(j, j)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            log::debug!("Cholesky succeeded with jitter {jitter:e}");
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(RomError::NotPositiveDefinite(format!(
        "Cholesky failed after jitter up to {:e}",
        jitter / 10.0
    )))
}

/// Eigenvalues of a symmetric matrix, sorted in decreasing order.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = s.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Ratio of largest to smallest eigenvalue magnitude of a symmetric matrix.
pub fn spd_condition(s: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(s);
    let max = ev.first().copied().unwrap_or(0.0).abs();
    let min = ev.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `Lᵀ`-free solve of `L Lᵀ x = b` for a lower factor `L`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("lower factor has a nonzero diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("lower factor has a nonzero diagonal")
}

/// `(L Lᵀ)⁻¹` from a lower factor.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .expect("lower factor has a nonzero diagonal");
    let mut inv = linv.transpose() * linv;
    symmetrize(&mut inv);
    inv
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `log |L Lᵀ|` from a lower factor.
pub fn cholesky_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}
