//! One-dimensional compressible Euler training data: a first-order upwind
//! full-order solver on a periodic domain, spline initial conditions, noise,
//! the specific-volume lifting, and time-derivative estimators.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::pod::{SnapshotSet, VariableBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EulerConfig {
    /// Domain `[0, length)`.
    pub length: f64,
    pub cells: usize,
    pub dt: f64,
    pub gamma: f64,
    pub t_final: f64,
    /// Snapshots with `t < training_end` form the training set.
    pub training_end: f64,
    /// Uniform initial pressure.
    pub pressure: f64,
    pub velocity_levels: [f64; 2],
    pub density_levels: [f64; 2],
    /// Spline interpolation nodes.
    pub nodes: [f64; 3],
}

impl Default for EulerConfig {
    fn default() -> Self {
        EulerConfig {
            length: 2.0,
            cells: 200,
            dt: 1e-5,
            gamma: 1.4,
            t_final: 0.03,
            training_end: 0.01,
            pressure: 1e5,
            velocity_levels: [95.0, 105.0],
            density_levels: [20.0, 24.0],
            nodes: [0.0, 2.0 / 3.0, 4.0 / 3.0],
        }
    }
}

impl EulerConfig {
    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    /// Cell coordinates `x_i = i·δx`.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.cells).map(|i| i as f64 * self.dx()).collect()
    }

    /// State size `3 · cells`.
    pub fn n(&self) -> usize {
        3 * self.cells
    }

    pub fn training_steps(&self) -> usize {
        (self.training_end / self.dt).round() as usize
    }

    pub fn total_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.cells >= 3
            && self.dt > 0.0
            && self.gamma > 1.0
            && self.t_final > 0.0
            && self.training_end > 0.0
            && self.training_end <= self.t_final
            && self.pressure > 0.0
            && self.density_levels.iter().all(|&r| r > 0.0);
        if !ok {
            return Err(RomError::InvalidArgument(format!("invalid Euler configuration {self:?}")));
        }
        Ok(())
    }

    /// Conservative layout: density, momentum, total energy.
    pub fn conservative_layout(&self) -> Vec<VariableBlock> {
        let c = self.cells;
        vec![
            VariableBlock::new("rho", 0..c, "kg/m^3"),
            VariableBlock::new("rho_u", c..2 * c, "kg/(m^2 s)"),
            VariableBlock::new("rho_e", 2 * c..3 * c, "J/m^3"),
        ]
    }

    /// Lifted layout: velocity, pressure, specific volume.
    pub fn lifted_layout(&self) -> Vec<VariableBlock> {
        let c = self.cells;
        vec![
            VariableBlock::new("u", 0..c, "m/s"),
            VariableBlock::new("p", c..2 * c, "Pa"),
            VariableBlock::new("zeta", 2 * c..3 * c, "m^3/kg"),
        ]
    }

    /// Courant number `max(|u| + c) δt/δx` of a conservative state.
    pub fn courant(&self, state: &[f64]) -> f64 {
        let c = self.cells;
        (0..c)
            .map(|i| {
                let rho = state[i];
                let u = state[c + i] / rho;
                let p = (self.gamma - 1.0) * (state[2 * c + i] - 0.5 * rho * u * u);
                u.abs() + (self.gamma * p / rho).sqrt()
            })
            .fold(0.0, f64::max)
            * self.dt
            / self.dx()
    }
}

/// Periodic cubic spline through `(nodes, values)` with the given period,
/// evaluated at `x`.
pub fn periodic_cubic_spline(nodes: &[f64], values: &[f64], period: f64, x: &[f64]) -> Result<Vec<f64>> {
    let m = nodes.len();
    if m < 3 || values.len() != m {
        return Err(RomError::InvalidArgument(
            "periodic spline needs at least three nodes with values".into(),
        ));
    }
    if nodes.windows(2).any(|w| !(w[1] > w[0])) || !(nodes[m - 1] - nodes[0] < period) {
        return Err(RomError::InvalidArgument("spline nodes must increase within one period".into()));
    }
    let h: Vec<f64> = (0..m)
        .map(|i| if i + 1 < m { nodes[i + 1] - nodes[i] } else { nodes[0] + period - nodes[m - 1] })
        .collect();
    // cyclic system for the second derivatives
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for i in 0..m {
        let prev = (i + m - 1) % m;
        let next = (i + 1) % m;
        a[(i, prev)] += h[prev];
        a[(i, i)] += 2.0 * (h[prev] + h[i]);
        a[(i, next)] += h[i];
        b[i] = 6.0 * ((values[next] - values[i]) / h[i] - (values[i] - values[prev]) / h[prev]);
    }
    let mm = a
        .lu()
        .solve(&b)
        .ok_or_else(|| RomError::InvalidArgument("singular spline system".into()))?;
    Ok(x.iter()
        .map(|&xv| {
            let mut s = (xv - nodes[0]).rem_euclid(period) + nodes[0];
            if s >= nodes[0] + period {
                s -= period;
            }
            let i = (0..m).rev().find(|&i| s >= nodes[i]).unwrap_or(0);
            let next = (i + 1) % m;
            let hi = h[i];
            let (dl, dr) = (s - nodes[i], nodes[i] + hi - s);
            mm[i] * dr.powi(3) / (6.0 * hi)
                + mm[next] * dl.powi(3) / (6.0 * hi)
                + (values[i] - mm[i] * hi * hi / 6.0) * dr / hi
                + (values[next] - mm[next] * hi * hi / 6.0) * dl / hi
        })
        .collect())
}

/// Conservative state from velocity and density node values at uniform pressure.
pub fn initial_condition(config: &EulerConfig, velocity: [f64; 3], density: [f64; 3]) -> Result<DVector<f64>> {
    let x = config.grid();
    let u = periodic_cubic_spline(&config.nodes, &velocity, config.length, &x)?;
    let rho = periodic_cubic_spline(&config.nodes, &density, config.length, &x)?;
    let c = config.cells;
    let mut q = DVector::zeros(3 * c);
    for i in 0..c {
        q[i] = rho[i];
        q[c + i] = rho[i] * u[i];
        q[2 * c + i] = config.pressure / (config.gamma - 1.0) + 0.5 * rho[i] * u[i] * u[i];
    }
    Ok(q)
}

/// Node values of initial condition `index` in `0..64`: bit `j` selects the
/// density level at node `j`, bit `3 + j` the velocity level.
pub fn initial_condition_levels(config: &EulerConfig, index: usize) -> ([f64; 3], [f64; 3]) {
    let pick = |levels: [f64; 2], bit: usize| levels[(index >> bit) & 1];
    (
        [0, 1, 2].map(|j| pick(config.velocity_levels, 3 + j)),
        [0, 1, 2].map(|j| pick(config.density_levels, j)),
    )
}

/// All 64 combinations of node levels.
pub fn make_initial_conditions(config: &EulerConfig) -> Result<Vec<DVector<f64>>> {
    (0..64)
        .map(|idx| {
            let (u, rho) = initial_condition_levels(config, idx);
            initial_condition(config, u, rho)
        })
        .collect()
}

fn check_state(config: &EulerConfig, q: &[f64], time: f64) -> Result<()> {
    let c = config.cells;
    for i in 0..c {
        let rho = q[i];
        let p = (config.gamma - 1.0) * (q[2 * c + i] - 0.5 * q[c + i] * q[c + i] / rho);
        if !q[i].is_finite() || !q[c + i].is_finite() || !q[2 * c + i].is_finite() {
            return Err(RomError::BlowUp {
                time,
                reason: format!("non-finite state in cell {i}"),
            });
        }
        if !(rho > 0.0) || !(p > 0.0) {
            return Err(RomError::BlowUp {
                time,
                reason: format!("non-positive density or pressure in cell {i}"),
            });
        }
    }
    Ok(())
}

/// One explicit Euler step of `∂U/∂t = −(F_i − F_{i−1})/δx` (upwind for
/// rightward-moving waves, periodic).
fn step(config: &EulerConfig, q: &mut [f64], flux: &mut [f64]) {
    let c = config.cells;
    let g = config.gamma;
    for i in 0..c {
        let rho = q[i];
        let m = q[c + i];
        let e = q[2 * c + i];
        let u = m / rho;
        let p = (g - 1.0) * (e - 0.5 * m * u);
        flux[i] = m;
        flux[c + i] = m * u + p;
        flux[2 * c + i] = (e + p) * u;
    }
    let ratio = config.dt / config.dx();
    for v in 0..3 {
        let f = &flux[v * c..(v + 1) * c];
        let s = &mut q[v * c..(v + 1) * c];
        let mut prev = f[c - 1];
        for i in 0..c {
            s[i] -= ratio * (f[i] - prev);
            prev = f[i];
        }
    }
}

/// Full-order trajectory: every training snapshot, and every `truth_stride`-th
/// snapshot over the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FomRun {
    pub training: DMatrix<f64>,
    pub training_times: Vec<f64>,
    pub truth: DMatrix<f64>,
    pub truth_times: Vec<f64>,
}

/// Integrate from a conservative initial state.
pub fn solve_fom(config: &EulerConfig, initial: &DVector<f64>, truth_stride: usize) -> Result<FomRun> {
    config.validate()?;
    let n = config.n();
    if initial.len() != n {
        return Err(RomError::DimensionMismatch(format!(
            "initial state has {} entries, expected {n}",
            initial.len()
        )));
    }
    check_state(config, initial.as_slice(), 0.0)?;
    let courant = config.courant(initial.as_slice());
    if courant > 1.0 {
        log::warn!("Courant number {courant:.3} exceeds 1; the explicit scheme may be unstable");
    }
    let stride = truth_stride.max(1);
    let n_train = config.training_steps();
    let total = config.total_steps();
    let n_truth = total / stride + 1;
    let mut training = DMatrix::zeros(n, n_train);
    let mut truth = DMatrix::zeros(n, n_truth);
    let mut q = initial.as_slice().to_vec();
    let mut flux = vec![0.0; n];
    for s in 0..=total {
        if s < n_train {
            training.column_mut(s).copy_from_slice(&q);
        }
        if s % stride == 0 && s / stride < n_truth {
            truth.column_mut(s / stride).copy_from_slice(&q);
        }
        if s == total {
            break;
        }
        step(config, &mut q, &mut flux);
        if (s + 1) % 100 == 0 || s + 1 == total {
            check_state(config, &q, (s + 1) as f64 * config.dt)?;
        }
    }
    Ok(FomRun {
        training,
        training_times: (0..n_train).map(|s| s as f64 * config.dt).collect(),
        truth,
        truth_times: (0..n_truth).map(|j| (j * stride) as f64 * config.dt).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Relative level `ξ`; each variable gets std `ξ (max − min)`.
    pub level: f64,
    pub seed: u64,
}

/// Per-variable `(min, max)` over all columns.
pub fn variable_ranges(states: &DMatrix<f64>, layout: &[VariableBlock]) -> Vec<(f64, f64)> {
    layout
        .iter()
        .map(|b| {
            states
                .rows(b.range.start, b.range.len())
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Add `N(0, ς_v²)` to every entry of variable `v`, with `ς_v = ξ(max − min)`
/// over the whole set. Trajectory `ℓ` draws from ChaCha20 stream `ℓ`. Returns the `ς_v`.
pub fn add_noise(snapshots: &mut SnapshotSet, spec: &NoiseSpec) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&spec.level) {
        return Err(RomError::InvalidArgument("noise level must lie in [0, 1)".into()));
    }
    let ranges = variable_ranges(&snapshots.states, &snapshots.layout);
    let stds: Vec<f64> = ranges.iter().map(|(lo, hi)| spec.level * (hi - lo)).collect();
    if spec.level == 0.0 {
        return Ok(stds);
    }
    if ranges.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(RomError::DegenerateRange {
            name: "noise".into(),
            value: 0.0,
        });
    }
    let n = snapshots.n();
    let mut row_std = vec![0.0; n];
    for (b, s) in snapshots.layout.iter().zip(&stds) {
        for i in b.range.clone() {
            row_std[i] = *s;
        }
    }
    let trajs = snapshots.trajectories.clone();
    let data = snapshots.states.as_mut_slice();
    // trajectories own contiguous column blocks
    let mut blocks: Vec<(usize, &mut [f64])> = Vec::with_capacity(trajs.len());
    let mut rest = data;
    let mut at = 0;
    for (l, t) in trajs.iter().enumerate() {
        let (_, tail) = rest.split_at_mut((t.start - at) * n);
        let (block, tail) = tail.split_at_mut(t.len() * n);
        blocks.push((l, block));
        rest = tail;
        at = t.end;
    }
    blocks.into_par_iter().for_each(|(l, block)| {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(l as u64);
        for (idx, v) in block.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v += row_std[idx % n] * z;
        }
    });
    Ok(stds)
}

/// Lower limits used when noisy data leaves the physical range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampFloors {
    pub density: f64,
    pub pressure: f64,
}

impl ClampFloors {
    /// `10⁻⁶` of the clean minima of density and pressure.
    pub fn from_clean(config: &EulerConfig, clean: &DMatrix<f64>) -> Self {
        let c = config.cells;
        let mut rho_min = f64::INFINITY;
        let mut p_min = f64::INFINITY;
        for col in clean.column_iter() {
            for i in 0..c {
                let rho = col[i];
                let p = (config.gamma - 1.0) * (col[2 * c + i] - 0.5 * col[c + i] * col[c + i] / rho);
                rho_min = rho_min.min(rho);
                p_min = p_min.min(p);
            }
        }
        ClampFloors {
            density: 1e-6 * rho_min,
            pressure: 1e-6 * p_min,
        }
    }
}

/// Map conservative columns to `(u, p, ζ = 1/ρ)` in place.
///
/// Without floors a non-positive density or pressure is an error; with floors
/// such entries are raised to the floor and counted.
pub fn lift_in_place(config: &EulerConfig, states: &mut DMatrix<f64>, floors: Option<ClampFloors>) -> Result<usize> {
    let c = config.cells;
    if states.nrows() != 3 * c {
        return Err(RomError::DimensionMismatch(format!(
            "state has {} rows, expected {}",
            states.nrows(),
            3 * c
        )));
    }
    let g = config.gamma;
    let mut clamped = 0;
    for mut col in states.column_iter_mut() {
        for i in 0..c {
            let mut rho = col[i];
            if !(rho > 0.0) {
                match floors {
                    Some(f) => {
                        rho = f.density;
                        clamped += 1;
                    }
                    None => {
                        return Err(RomError::DegenerateRange {
                            name: "rho".into(),
                            value: rho,
                        })
                    }
                }
            }
            let m = col[c + i];
            let u = m / rho;
            let mut p = (g - 1.0) * (col[2 * c + i] - 0.5 * m * u);
            if !(p > 0.0) {
                match floors {
                    Some(f) => {
                        p = f.pressure;
                        clamped += 1;
                    }
                    None => {
                        return Err(RomError::DegenerateRange {
                            name: "p".into(),
                            value: p,
                        })
                    }
                }
            }
            col[i] = u;
            col[c + i] = p;
            col[2 * c + i] = 1.0 / rho;
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} non-physical entries while lifting");
    }
    Ok(clamped)
}

pub fn lift(config: &EulerConfig, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = states.clone();
    lift_in_place(config, &mut out, None)?;
    Ok(out)
}

/// Inverse of [`lift`]: `(u, p, ζ) ↦ (ρ, ρu, ρe)`.
pub fn unlift(config: &EulerConfig, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = config.cells;
    if states.nrows() != 3 * c {
        return Err(RomError::DimensionMismatch(format!(
            "state has {} rows, expected {}",
            states.nrows(),
            3 * c
        )));
    }
    let mut out = states.clone();
    for mut col in out.column_iter_mut() {
        for i in 0..c {
            let (u, p, zeta) = (col[i], col[c + i], col[2 * c + i]);
            let rho = 1.0 / zeta;
            col[i] = rho;
            col[c + i] = rho * u;
            col[2 * c + i] = p / (config.gamma - 1.0) + 0.5 * rho * u * u;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum DerivativeMethod {
    /// Fourth-order central differences, one-sided at the ends (uniform grids).
    Fd4,
    /// Sliding-window least-squares polynomial fit.
    LocalPoly { window: usize, degree: usize },
    /// Local polynomial fit whose window is chosen per row by generalized
    /// cross-validation of the fitted values, pooled over trajectories.
    /// Candidates double from `min_window` (11, 21, 41, ...) up to `max_window`
    /// and the shortest trajectory.
    LocalPolyGcv {
        degree: usize,
        min_window: usize,
        max_window: usize,
    },
}

impl Default for DerivativeMethod {
    fn default() -> Self {
        DerivativeMethod::LocalPoly {
            window: 11,
            degree: 2,
        }
    }
}

impl DerivativeMethod {
    pub fn gcv() -> Self {
        DerivativeMethod::LocalPolyGcv {
            degree: 2,
            min_window: 11,
            max_window: 1001,
        }
    }
}

/// Time derivatives of each row of `q` (one trajectory).
pub fn estimate_derivatives(q: &DMatrix<f64>, times: &[f64], method: DerivativeMethod) -> Result<DMatrix<f64>> {
    let k = q.ncols();
    estimate_derivatives_by_trajectory(q, times, &[0..k], method)
}

/// Derivatives computed separately within each trajectory block.
pub fn estimate_derivatives_by_trajectory(
    q: &DMatrix<f64>,
    times: &[f64],
    trajectories: &[Range<usize>],
    method: DerivativeMethod,
) -> Result<DMatrix<f64>> {
    Ok(estimate_derivatives_with_windows(q, times, trajectories, method)?.0)
}

/// As [`estimate_derivatives_by_trajectory`], also returning the window used
/// for each row (empty for finite differences).
pub fn estimate_derivatives_with_windows(
    q: &DMatrix<f64>,
    times: &[f64],
    trajectories: &[Range<usize>],
    method: DerivativeMethod,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let k = q.ncols();
    if times.len() != k {
        return Err(RomError::DimensionMismatch(format!("{} times for {k} columns", times.len())));
    }
    let mut at = 0;
    for t in trajectories {
        if t.start != at || t.end <= t.start {
            return Err(RomError::InvalidArgument(format!(
                "trajectory blocks do not partition 0..{k} ({t:?})"
            )));
        }
        if times[t.clone()].windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RomError::InvalidArgument("times must increase".into()));
        }
        at = t.end;
    }
    if at != k {
        return Err(RomError::InvalidArgument(format!("trajectory blocks cover 0..{at}, not 0..{k}")));
    }
    let windows = match method {
        DerivativeMethod::Fd4 => {
            let mut out = DMatrix::zeros(q.nrows(), k);
            for t in trajectories {
                let block = q.columns(t.start, t.len()).into_owned();
                out.columns_mut(t.start, t.len()).copy_from(&fd4(&block, &times[t.clone()])?);
            }
            return Ok((out, Vec::new()));
        }
        DerivativeMethod::LocalPoly { window, degree } => {
            check_local_poly(window, degree, trajectories)?;
            vec![window; q.nrows()]
        }
        DerivativeMethod::LocalPolyGcv {
            degree,
            min_window,
            max_window,
        } => gcv_windows(q, times, trajectories, degree, &candidate_windows(min_window, max_window, trajectories)?)?,
    };
    let degree = match method {
        DerivativeMethod::LocalPoly { degree, .. } | DerivativeMethod::LocalPolyGcv { degree, .. } => degree,
        DerivativeMethod::Fd4 => unreachable!(),
    };
    let mut out = DMatrix::zeros(q.nrows(), k);
    let mut distinct = windows.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for &w in &distinct {
        let rows: Vec<usize> = (0..q.nrows()).filter(|&i| windows[i] == w).collect();
        for t in trajectories {
            let fits = local_poly_weights(&times[t.clone()], w, degree)?;
            for (j, fit) in fits.iter().enumerate() {
                for &i in &rows {
                    out[(i, t.start + j)] = fit
                        .slope
                        .iter()
                        .enumerate()
                        .map(|(a, wa)| wa * q[(i, t.start + fit.start + a)])
                        .sum();
                }
            }
        }
    }
    Ok((out, windows))
}

fn fd4(q: &DMatrix<f64>, times: &[f64]) -> Result<DMatrix<f64>> {
    let k = q.ncols();
    if k < 5 {
        return Err(RomError::InvalidArgument(format!(
            "fourth-order differences need at least 5 points, got {k}"
        )));
    }
    let h = (times[k - 1] - times[0]) / (k - 1) as f64;
    if times.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-6 * h) {
        return Err(RomError::InvalidArgument(
            "fourth-order differences need a uniform grid".into(),
        ));
    }
    let mut d = DMatrix::zeros(q.nrows(), k);
    let s = 1.0 / (12.0 * h);
    for i in 0..q.nrows() {
        let f = |j: usize| q[(i, j)];
        d[(i, 0)] = s * (-25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4));
        d[(i, 1)] = s * (-3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4));
        for j in 2..k - 2 {
            d[(i, j)] = s * (f(j - 2) - 8.0 * f(j - 1) + 8.0 * f(j + 1) - f(j + 2));
        }
        let e = k - 1;
        d[(i, e - 1)] = s * (3.0 * f(e) + 10.0 * f(e - 1) - 18.0 * f(e - 2) + 6.0 * f(e - 3) - f(e - 4));
        d[(i, e)] = s * (25.0 * f(e) - 48.0 * f(e - 1) + 36.0 * f(e - 2) - 16.0 * f(e - 3) + 3.0 * f(e - 4));
    }
    Ok(d)
}

fn check_local_poly(window: usize, degree: usize, trajectories: &[Range<usize>]) -> Result<()> {
    if window.is_multiple_of(2) || degree == 0 || window <= degree {
        return Err(RomError::InvalidArgument(format!(
            "local polynomial needs an odd window larger than the degree (window {window}, degree {degree})"
        )));
    }
    let shortest = trajectories.iter().map(|t| t.len()).min().unwrap_or(0);
    if window > shortest {
        return Err(RomError::InvalidArgument(format!(
            "window {window} larger than the shortest trajectory ({shortest} points)"
        )));
    }
    Ok(())
}

fn candidate_windows(min_window: usize, max_window: usize, trajectories: &[Range<usize>]) -> Result<Vec<usize>> {
    let shortest = trajectories.iter().map(|t| t.len()).min().unwrap_or(0);
    let cap = max_window.min(shortest);
    if min_window.is_multiple_of(2) || min_window < 3 || min_window > cap {
        return Err(RomError::InvalidArgument(format!(
            "window range [{min_window}, {max_window}] is empty or even for trajectories of {shortest} points"
        )));
    }
    let mut out = vec![min_window];
    while 2 * out[out.len() - 1] - 1 <= cap {
        let w = 2 * out[out.len() - 1] - 1;
        out.push(w);
    }
    Ok(out)
}

/// Fitted-value and slope weights of one point's local fit over
/// `start..start + window` (trajectory-local indices).
struct LocalFit {
    start: usize,
    value: DVector<f64>,
    slope: DVector<f64>,
}

fn local_poly_weights(times: &[f64], window: usize, degree: usize) -> Result<Vec<LocalFit>> {
    let k = times.len();
    let half = window / 2;
    (0..k)
        .map(|j| {
            let start = j.saturating_sub(half).min(k - window);
            let scale = (times[start + window - 1] - times[start]) / 2.0;
            let v = DMatrix::from_fn(window, degree + 1, |a, p| ((times[start + a] - times[j]) / scale).powi(p as i32));
            let chol = (v.transpose() * &v).cholesky().ok_or(RomError::IllConditioned {
                condition: f64::INFINITY,
            })?;
            let unit = |p: usize| DVector::from_fn(degree + 1, |c, _| if c == p { 1.0 } else { 0.0 });
            Ok(LocalFit {
                start,
                value: &v * chol.solve(&unit(0)),
                slope: &v * chol.solve(&unit(1)) / scale,
            })
        })
        .collect()
}

/// Per-row window minimizing `(RSS/k) / (1 − tr S/k)²`, where `S` is the
/// local fit's smoother matrix.
fn gcv_windows(
    q: &DMatrix<f64>,
    times: &[f64],
    trajectories: &[Range<usize>],
    degree: usize,
    candidates: &[usize],
) -> Result<Vec<usize>> {
    let rows = q.nrows();
    let k = q.ncols() as f64;
    let mut best = vec![(f64::INFINITY, candidates[0]); rows];
    for &w in candidates {
        check_local_poly(w, degree, trajectories)?;
        let per_traj = trajectories
            .par_iter()
            .map(|t| {
                let fits = local_poly_weights(&times[t.clone()], w, degree)?;
                let mut rss = vec![0.0; rows];
                let mut trace = 0.0;
                for (j, fit) in fits.iter().enumerate() {
                    trace += fit.value[j - fit.start];
                    for (i, acc) in rss.iter_mut().enumerate() {
                        let y: f64 = fit
                            .value
                            .iter()
                            .enumerate()
                            .map(|(a, wa)| wa * q[(i, t.start + fit.start + a)])
                            .sum();
                        *acc += (y - q[(i, t.start + j)]).powi(2);
                    }
                }
                Ok((rss, trace))
            })
            .collect::<Result<Vec<_>>>()?;
        let trace: f64 = per_traj.iter().map(|p| p.1).sum();
        for (i, b) in best.iter_mut().enumerate() {
            let rss: f64 = per_traj.iter().map(|p| p.0[i]).sum();
            let score = (rss / k) / (1.0 - trace / k).powi(2);
            if score < b.0 {
                *b = (score, w);
            }
        }
    }
    Ok(best.into_iter().map(|b| b.1).collect())
}

/// Generated training set and reference solutions.
#[derive(Debug, Clone)]
pub struct EulerDataset {
    pub config: EulerConfig,
    pub noise: NoiseSpec,
    /// Lifted (and possibly noisy) training snapshots, all trajectories concatenated.
    pub training: SnapshotSet,
    /// Clean lifted solutions over the full horizon at the truth stride.
    pub truth: SnapshotSet,
    /// Indices of the initial conditions used.
    pub initial_conditions: Vec<usize>,
    /// Noise std per conservative variable.
    pub noise_stds: Vec<f64>,
    /// Clean conservative ranges over the training window.
    pub clean_ranges: Vec<(f64, f64)>,
    pub clamped: usize,
}

/// Simulate, corrupt, and lift the selected initial conditions
/// (`None` means all 64).
pub fn generate_dataset(
    config: &EulerConfig,
    noise: &NoiseSpec,
    truth_stride: usize,
    subset: Option<&[usize]>,
) -> Result<EulerDataset> {
    config.validate()?;
    let ids: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..64).collect(),
    };
    if ids.is_empty() || ids.iter().any(|&i| i >= 64) {
        return Err(RomError::InvalidArgument("initial condition indices must lie in 0..64".into()));
    }
    let n = config.n();
    let n_train = config.training_steps();
    let stride = truth_stride.max(1);
    let n_truth = config.total_steps() / stride + 1;
    let l = ids.len();
    let mut train = DMatrix::zeros(n, n_train * l);
    let mut truth = DMatrix::zeros(n, n_truth * l);
    let runs = ids
        .par_iter()
        .map(|&id| {
            let (u, rho) = initial_condition_levels(config, id);
            let ic = initial_condition(config, u, rho)?;
            let run = solve_fom(config, &ic, stride)?;
            Ok((run.training, run.truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train_times = Vec::with_capacity(n_train * l);
    let mut truth_times = Vec::with_capacity(n_truth * l);
    for (pos, (tr, th)) in runs.into_iter().enumerate() {
        train.columns_mut(pos * n_train, n_train).copy_from(&tr);
        truth.columns_mut(pos * n_truth, n_truth).copy_from(&th);
        train_times.extend((0..n_train).map(|s| s as f64 * config.dt));
        truth_times.extend((0..n_truth).map(|j| (j * stride) as f64 * config.dt));
    }
    let floors = ClampFloors::from_clean(config, &train);
    let mut training = SnapshotSet::new(
        train,
        train_times,
        config.conservative_layout(),
        (0..l).map(|p| p * n_train..(p + 1) * n_train).collect(),
    )?;
    let clean_ranges = variable_ranges(&training.states, &training.layout);
    let noise_stds = add_noise(&mut training, noise)?;
    let clamped = lift_in_place(config, &mut training.states, Some(floors))?;
    training.layout = config.lifted_layout();
    lift_in_place(config, &mut truth, None)?;
    let truth = SnapshotSet::new(
        truth,
        truth_times,
        config.lifted_layout(),
        (0..l).map(|p| p * n_truth..(p + 1) * n_truth).collect(),
    )?;
    Ok(EulerDataset {
        config: config.clone(),
        noise: *noise,
        training,
        truth,
        initial_conditions: ids,
        noise_stds,
        clean_ranges,
        clamped,
    })
}
