//! Regularization selection: the empirical-Bayes fixed-point update of the
//! per-row ridge penalties, and the error/stability-driven search.

use std::io::Write;

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::regression::{evidence_from_fit, ridge_normal, OperatorPosterior, PriorMean, RegressionData};
use crate::rom::{integrate, stability_bound, InputFn, IntegrateOptions, Integrator, RomOperators};
use crate::tensorops::StructureFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub initial_lambdas: Vec<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl FixedPointConfig {
    pub fn uniform(r: usize, lambda0: f64, tolerance: f64) -> Self {
        FixedPointConfig {
            initial_lambdas: vec![lambda0; r],
            tolerance,
            max_iterations: 100,
        }
    }
}

/// Quantities evaluated at one iterate `λ^(ℓ)`, per row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointIterate {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub log_evidence: Vec<f64>,
    /// Effective parameter count `γ = Σ g/(λ+g)`.
    pub gamma: Vec<f64>,
    pub mean_norm_sq: Vec<f64>,
    pub residual_sq: Vec<f64>,
    /// `tr Σ` from the Gram eigenvalues, `σ² Σ 1/(λ+g)`.
    pub trace_from_eigenvalues: Vec<f64>,
    /// `tr Σ` from the Cholesky factor of `λI + DᵀD`.
    pub trace_direct: Vec<f64>,
    /// `λ γ σ² / ‖μ‖²` applied to this iterate, i.e. the next `λ`.
    pub update: Vec<f64>,
}

impl FixedPointIterate {
    /// The three expressions `λ‖μ‖²/γ`, `‖r − Dμ‖²/(k − γ)` and `σ²` for row `i`;
    /// they coincide at a fixed point.
    pub fn noise_balance(&self, i: usize, k: usize) -> [f64; 3] {
        [
            self.lambda[i] * self.mean_norm_sq[i] / self.gamma[i],
            self.residual_sq[i] / (k as f64 - self.gamma[i]),
            self.noise_var[i],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub lambdas: Vec<f64>,
    pub posterior: OperatorPosterior,
    /// One entry per evaluated `λ`, including the returned one.
    pub trace: Vec<FixedPointIterate>,
    pub converged: bool,
    /// Number of updates performed.
    pub iterations: usize,
    /// `|λ* − F(λ*)| / λ*` per row at the returned values.
    pub fixed_point_residual: Vec<f64>,
    /// `max_j |λ*(δμ_j² + Σ_jj) − σ*²| / σ*²` per row; zero only when the uniform
    /// penalty is also optimal entry by entry.
    pub stationarity_residual: Vec<f64>,
}

fn evaluate_iterate(data: &RegressionData, iteration: usize, lambdas: &[f64]) -> Result<FixedPointIterate> {
    let d = data.dim();
    let k = data.k();
    let g = data.gram_eigenvalues();
    let zero = DVector::zeros(d);
    let rows = lambdas
        .par_iter()
        .enumerate()
        .map(|(i, &lam)| {
            let lv = DVector::from_element(d, lam);
            let fit = ridge_normal(data, i, &lv, &zero)?;
            let mean_norm_sq = fit.mean.norm_squared();
            if mean_norm_sq == 0.0 {
                return Err(RomError::ZeroMean { row: i });
            }
            let gamma: f64 = g.iter().map(|g| g / (lam + g)).sum();
            let inv_sum: f64 = g.iter().map(|g| 1.0 / (lam + g)).sum();
            let linv = fit
                .factor
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or(RomError::IllConditioned {
                    condition: f64::INFINITY,
                })?;
            Ok((
                fit.noise_var,
                evidence_from_fit(&fit, &lv, fit.noise_var, k),
                gamma,
                mean_norm_sq,
                fit.residual_sq,
                fit.noise_var * inv_sum,
                fit.noise_var * linv.norm_squared(),
                gamma * fit.noise_var / mean_norm_sq,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointIterate {
        iteration,
        lambda: lambdas.to_vec(),
        noise_var: rows.iter().map(|r| r.0).collect(),
        log_evidence: rows.iter().map(|r| r.1).collect(),
        gamma: rows.iter().map(|r| r.2).collect(),
        mean_norm_sq: rows.iter().map(|r| r.3).collect(),
        residual_sq: rows.iter().map(|r| r.4).collect(),
        trace_from_eigenvalues: rows.iter().map(|r| r.5).collect(),
        trace_direct: rows.iter().map(|r| r.6).collect(),
        update: rows.iter().map(|r| r.7).collect(),
    })
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = old.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// Iterate `λ_i ← γ_i σ*_i² / ‖μ_i‖²` (zero prior mean, uniform penalty per row)
/// until `‖Δλ‖/‖λ‖ < ε`. Running out of iterations is reported through
/// `converged = false`, not as an error.
pub fn fixed_point_select(data: &RegressionData, config: &FixedPointConfig) -> Result<FixedPointResult> {
    if config.initial_lambdas.len() != data.rows() {
        return Err(RomError::DimensionMismatch(format!(
            "{} initial λ for {} rows",
            config.initial_lambdas.len(),
            data.rows()
        )));
    }
    if !(config.tolerance > 0.0) || config.max_iterations == 0 {
        return Err(RomError::InvalidArgument(
            "tolerance and max_iterations must be positive".into(),
        ));
    }
    if config.initial_lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(RomError::InvalidArgument("initial λ must be positive".into()));
    }
    let mut lambdas = config.initial_lambdas.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let it = evaluate_iterate(data, iterations, &lambdas)?;
        let next = it.update.clone();
        let change = relative_change(&next, &lambdas);
        log::debug!("fixed point iteration {iterations}: relative change {change:e}");
        trace.push(it);
        iterations += 1;
        lambdas = next;
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "fixed-point λ selection did not converge in {} iterations",
            config.max_iterations
        );
    }
    let last = evaluate_iterate(data, iterations, &lambdas)?;
    let fixed_point_residual = last
        .update
        .iter()
        .zip(&lambdas)
        .map(|(f, l)| (f - l).abs() / l)
        .collect();
    trace.push(last);
    let posterior = OperatorPosterior::fit_uniform(data, &lambdas, &PriorMean::Zero)?;
    let stationarity_residual = posterior
        .rows
        .iter()
        .map(|row| {
            let s2 = row.noise_var;
            row.correction()
                .iter()
                .enumerate()
                .map(|(j, dm)| (row.lambda[j] * (dm * dm + row.covariance[(j, j)]) - s2).abs() / s2)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(FixedPointResult {
        lambdas,
        posterior,
        trace,
        converged,
        iterations,
        fixed_point_residual,
        stationarity_residual,
    })
}

/// Write the iteration trace as CSV: iteration, λ, σ*², and log evidence per row.
pub fn write_trace_csv<W: Write>(trace: &[FixedPointIterate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let r = trace.first().map_or(0, |t| t.lambda.len());
    let mut header = vec!["iteration".to_string()];
    for prefix in ["lambda", "sigma2", "log_evidence"] {
        header.extend((1..=r).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    for it in trace {
        let mut rec = vec![it.iteration.to_string()];
        for v in it.lambda.iter().chain(&it.noise_var).chain(&it.log_evidence) {
            rec.push(format_float(*v));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal form.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// How the regularizer vector is built from the search scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// One `λ` on every operator entry.
    OneScalar,
    /// `λ₁` on the linear, input and constant entries, `λ₂` on the quadratic ones.
    TwoScalar,
}

impl Parameterization {
    pub fn scalars(self) -> usize {
        match self {
            Parameterization::OneScalar => 1,
            Parameterization::TwoScalar => 2,
        }
    }
}

/// Regularizer vector `[λ₁×r, λ₂×r(r+1)/2, λ₁×m, λ₁]` restricted to the enabled blocks.
pub fn regularizer(params: &[f64], parameterization: Parameterization, r: usize, flags: &StructureFlags) -> Result<DVector<f64>> {
    if params.len() != parameterization.scalars() {
        return Err(RomError::InvalidArgument(format!(
            "{:?} takes {} scalars, got {}",
            parameterization,
            parameterization.scalars(),
            params.len()
        )));
    }
    let layout = flags.layout(r);
    let (l1, l2) = match parameterization {
        Parameterization::OneScalar => (params[0], params[0]),
        Parameterization::TwoScalar => (params[0], params[1]),
    };
    let mut v = DVector::from_element(layout.width, l1);
    if let Some(q) = layout.quadratic {
        v.rows_mut(q.start, q.len()).fill(l2);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSearchConfig {
    /// `τ ≥ 1` in `B = τ max|Q̂|`.
    pub bound_margin: f64,
    /// Candidate values for each scalar, searched on the Cartesian grid.
    pub grid: Vec<f64>,
    pub parameterization: Parameterization,
    /// End of the stability window `[t₀, t_f]`.
    pub horizon: f64,
    pub integrator: Integrator,
    /// Refine the best grid point with Brent (one scalar) or Nelder–Mead (two).
    pub refine: bool,
    pub max_refine_iterations: u64,
}

impl ErrorSearchConfig {
    pub fn new(grid: Vec<f64>, parameterization: Parameterization, horizon: f64) -> Self {
        ErrorSearchConfig {
            bound_margin: 1.25,
            grid,
            parameterization,
            horizon,
            integrator: Integrator::default(),
            refine: true,
            max_refine_iterations: 40,
        }
    }
}

/// `n` values spaced evenly in `log10` between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Projected training snapshots of one initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ErrorSearchResult {
    pub params: Vec<f64>,
    pub lambda: DVector<f64>,
    pub operators: RomOperators,
    /// Mean training reconstruction error of the selected operators.
    pub error: f64,
    pub bound: f64,
    /// Every `(params, error)` evaluated, in evaluation order; unstable is `∞`.
    pub evaluations: Vec<(Vec<f64>, f64)>,
}

struct Evaluator<'a> {
    trajectories: &'a [TrainingTrajectory],
    data: &'a RegressionData,
    config: &'a ErrorSearchConfig,
    input: Option<&'a InputFn>,
    bound: f64,
    grids: Vec<Vec<f64>>,
}

impl Evaluator<'_> {
    fn operators(&self, params: &[f64]) -> Result<(DVector<f64>, RomOperators)> {
        let r = self.data.rows();
        let lambda = regularizer(params, self.config.parameterization, r, &self.data.flags())?;
        let zero = DVector::zeros(self.data.dim());
        let mut o = DMatrix::zeros(r, self.data.dim());
        for i in 0..r {
            let fit = ridge_normal(self.data, i, &lambda, &zero)?;
            o.row_mut(i).copy_from(&fit.mean.transpose());
        }
        Ok((lambda, RomOperators::new(o, self.data.flags())?))
    }

    /// Mean Frobenius reconstruction error over trajectories, `∞` if any run
    /// leaves the bound on `[t₀, t_f]`.
    fn error(&self, params: &[f64]) -> f64 {
        if params.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return f64::INFINITY;
        }
        let ops = match self.operators(params) {
            Ok((_, ops)) => ops,
            Err(_) => return f64::INFINITY,
        };
        let opts = IntegrateOptions {
            integrator: self.config.integrator,
            bound: Some(self.bound),
        };
        let mut total = 0.0;
        for (traj, grid) in self.trajectories.iter().zip(&self.grids) {
            let q0 = traj.states.column(0).into_owned();
            let tr = match integrate(&ops, &q0, grid, self.input, &opts) {
                Ok(tr) if tr.is_stable() => tr,
                _ => return f64::INFINITY,
            };
            let k = traj.states.ncols();
            total += (&traj.states - tr.states.columns(0, k)).norm();
        }
        total / self.trajectories.len() as f64
    }
}

struct LogCost<'a, 'b> {
    eval: &'a Evaluator<'b>,
    penalty: f64,
}

impl CostFunction for LogCost<'_, '_> {
    type Param = f64;
    type Output = f64;
    fn cost(&self, p: &f64) -> std::result::Result<f64, argmin::core::Error> {
        let e = self.eval.error(&[10f64.powf(*p)]);
        Ok(if e.is_finite() { e } else { self.penalty })
    }
}

struct LogCost2<'a, 'b> {
    eval: &'a Evaluator<'b>,
    penalty: f64,
}

impl CostFunction for LogCost2<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let params: Vec<f64> = p.iter().map(|v| 10f64.powf(*v)).collect();
        let e = self.eval.error(&params);
        Ok(if e.is_finite() { e } else { self.penalty })
    }
}

fn better(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> bool {
    // lower error wins; equal errors prefer the smaller parameter norm
    let na: f64 = a.0.iter().map(|v| v * v).sum();
    let nb: f64 = b.0.iter().map(|v| v * v).sum();
    a.1 < b.1 || (a.1 == b.1 && na < nb)
}

/// Choose ridge penalties minimizing the mean training reconstruction error
/// subject to every trajectory staying within `B = τ max|Q̂|` up to the horizon.
///
/// A Cartesian grid search comes first; the best grid point is then refined by
/// Brent's method (bracketed by its grid neighbours) or Nelder–Mead, both in
/// `log10 λ`. Ties are broken toward the smaller parameter norm.
pub fn error_based_select(
    trajectories: &[TrainingTrajectory],
    data: &RegressionData,
    config: &ErrorSearchConfig,
    input: Option<&InputFn>,
) -> Result<ErrorSearchResult> {
    if trajectories.is_empty() {
        return Err(RomError::InvalidArgument("no training trajectories".into()));
    }
    if !(config.bound_margin >= 1.0) {
        return Err(RomError::InvalidArgument("bound margin τ must be ≥ 1".into()));
    }
    if config.grid.is_empty() || config.grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(RomError::InvalidArgument(
            "λ grid must be non-empty and positive".into(),
        ));
    }
    let r = data.rows();
    let mut grids = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        if t.states.nrows() != r || t.states.ncols() != t.times.len() || t.times.is_empty() {
            return Err(RomError::DimensionMismatch(
                "training trajectory does not match the regression data".into(),
            ));
        }
        let mut g = t.times.clone();
        let last = *g.last().expect("non-empty");
        if config.horizon > last {
            g.push(config.horizon);
        }
        grids.push(g);
    }
    let bound = stability_bound(trajectories.iter().map(|t| &t.states), config.bound_margin);
    let eval = Evaluator {
        trajectories,
        data,
        config,
        input,
        bound,
        grids,
    };

    let mut grid = config.grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    grid.dedup();
    let candidates: Vec<Vec<f64>> = match config.parameterization {
        Parameterization::OneScalar => grid.iter().map(|&g| vec![g]).collect(),
        Parameterization::TwoScalar => grid
            .iter()
            .flat_map(|&a| grid.iter().map(move |&b| vec![a, b]))
            .collect(),
    };
    let scores: Vec<f64> = candidates.par_iter().map(|c| eval.error(c)).collect();
    let mut evaluations: Vec<(Vec<f64>, f64)> = candidates.into_iter().zip(scores).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut best_idx = 0;
    for (idx, e) in evaluations.iter().enumerate() {
        if e.1.is_finite() && best.as_ref().is_none_or(|b| better(e, b)) {
            best = Some(e.clone());
            best_idx = idx;
        }
    }
    let Some(mut best) = best else {
        return Err(RomError::AllUnstable {
            tried: evaluations.into_iter().map(|e| e.0).collect(),
        });
    };
    log::info!("grid search best {:?} with error {:e}", best.0, best.1);

    let finite_max = evaluations
        .iter()
        .filter(|e| e.1.is_finite())
        .map(|e| e.1)
        .fold(0.0, f64::max);
    let penalty = 10.0 * finite_max + 1.0;
    if config.refine && grid.len() > 1 {
        let refined = match config.parameterization {
            Parameterization::OneScalar => {
                let lo = grid[best_idx.saturating_sub(1)].log10();
                let hi = grid[(best_idx + 1).min(grid.len() - 1)].log10();
                let cost = LogCost {
                    eval: &eval,
                    penalty,
                };
                Executor::new(cost, BrentOpt::new(lo, hi))
                    .configure(|s| s.max_iters(config.max_refine_iterations))
                    .run()
                    .ok()
                    .and_then(|res| res.state().best_param.map(|p| vec![10f64.powf(p)]))
            }
            Parameterization::TwoScalar => {
                let step = (grid[grid.len() - 1].log10() - grid[0].log10()) / (grid.len() - 1) as f64;
                let p0: Vec<f64> = best.0.iter().map(|v| v.log10()).collect();
                let simplex = vec![
                    p0.clone(),
                    vec![p0[0] + step, p0[1]],
                    vec![p0[0], p0[1] + step],
                ];
                let cost = LogCost2 { eval: &eval, penalty };
                NelderMead::new(simplex)
                    .with_sd_tolerance(1e-6)
                    .ok()
                    .and_then(|nm| {
                        Executor::new(cost, nm)
                            .configure(|s| s.max_iters(config.max_refine_iterations))
                            .run()
                            .ok()
                    })
                    .and_then(|res| {
                        res.state()
                            .best_param
                            .clone()
                            .map(|p| p.iter().map(|v| 10f64.powf(*v)).collect())
                    })
            }
        };
        if let Some(p) = refined {
            let e = eval.error(&p);
            let cand = (p, e);
            evaluations.push(cand.clone());
            if e.is_finite() && better(&cand, &best) {
                best = cand;
            }
        }
    }
    // post hoc: the returned operators must satisfy the bound for every trajectory
    let check = eval.error(&best.0);
    if !check.is_finite() {
        return Err(RomError::AllUnstable {
            tried: evaluations.into_iter().map(|e| e.0).collect(),
        });
    }
    let (lambda, operators) = eval.operators(&best.0)?;
    Ok(ErrorSearchResult {
        params: best.0,
        lambda,
        operators,
        error: check,
        bound,
        evaluations,
    })
}
