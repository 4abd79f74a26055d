//! Quadratic reduced-order models: time integration, posterior sampling, and
//! Monte Carlo ensemble statistics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::regression::OperatorPosterior;
use crate::tensorops::{d_dim, CompressedQuadIndex, StructureFlags};

/// Input signal `u(t)`.
pub type InputFn = dyn Fn(f64) -> DVector<f64> + Sync;

/// Operators of `dq̂/dt = Âq̂ + Ĥ(q̂⊗q̂) + B̂u + ĉ`, stored as the row-stacked
/// operator matrix `Ô = [Â Ĥ B̂ ĉ]` with the compressed quadratic block.
#[derive(Debug, Clone, PartialEq)]
pub struct RomOperators {
    operator: DMatrix<f64>,
    flags: StructureFlags,
    pairs: Vec<(usize, usize)>,
}

impl RomOperators {
    /// `operator` is `r × d(r, m)` with blocks ordered as the data matrix columns.
    pub fn new(operator: DMatrix<f64>, flags: StructureFlags) -> Result<Self> {
        flags.validate()?;
        let r = operator.nrows();
        if r == 0 || operator.ncols() != d_dim(r, &flags) {
            return Err(RomError::DimensionMismatch(format!(
                "operator matrix is {}x{}, expected {r}x{}",
                r,
                operator.ncols(),
                d_dim(r, &flags)
            )));
        }
        if operator.iter().any(|v| !v.is_finite()) {
            return Err(RomError::InvalidArgument("operator entries must be finite".into()));
        }
        let pairs = if flags.quadratic {
            CompressedQuadIndex::new(r).pairs().to_vec()
        } else {
            Vec::new()
        };
        Ok(RomOperators {
            operator,
            flags,
            pairs,
        })
    }

    /// Assemble from individual blocks; absent blocks are disabled in the flags.
    pub fn from_blocks(
        a: Option<DMatrix<f64>>,
        h: Option<DMatrix<f64>>,
        b: Option<DMatrix<f64>>,
        c: Option<DVector<f64>>,
    ) -> Result<Self> {
        let r = a
            .as_ref()
            .map(|m| m.nrows())
            .or(h.as_ref().map(|m| m.nrows()))
            .or(b.as_ref().map(|m| m.nrows()))
            .or(c.as_ref().map(|v| v.len()))
            .ok_or_else(|| RomError::InvalidArgument("no operator blocks given".into()))?;
        let flags = StructureFlags {
            linear: a.is_some(),
            quadratic: h.is_some(),
            inputs: b.as_ref().map_or(0, |m| m.ncols()),
            constant: c.is_some(),
        };
        flags.validate()?;
        let layout = flags.layout(r);
        let mut o = DMatrix::zeros(r, layout.width);
        let mut put = |range: Option<std::ops::Range<usize>>, m: &DMatrix<f64>, what: &str| {
            let range = range.expect("flag set");
            if m.shape() != (r, range.len()) {
                return Err(RomError::DimensionMismatch(format!(
                    "{what} block is {}x{}, expected {r}x{}",
                    m.nrows(),
                    m.ncols(),
                    range.len()
                )));
            }
            o.columns_mut(range.start, range.len()).copy_from(m);
            Ok(())
        };
        if let Some(a) = &a {
            put(layout.linear.clone(), a, "linear")?;
        }
        if let Some(h) = &h {
            put(layout.quadratic.clone(), h, "quadratic")?;
        }
        if let Some(b) = &b {
            put(layout.input.clone(), b, "input")?;
        }
        if let Some(c) = &c {
            put(layout.constant.clone(), &DMatrix::from_column_slice(r, 1, c.as_slice()), "constant")?;
        }
        Self::new(o, flags)
    }

    pub fn r(&self) -> usize {
        self.operator.nrows()
    }

    pub fn flags(&self) -> StructureFlags {
        self.flags
    }

    pub fn operator_matrix(&self) -> &DMatrix<f64> {
        &self.operator
    }

    fn block(&self, range: Option<std::ops::Range<usize>>) -> Option<DMatrix<f64>> {
        range.map(|c| self.operator.columns(c.start, c.len()).into_owned())
    }

    pub fn a(&self) -> Option<DMatrix<f64>> {
        self.block(self.flags.layout(self.r()).linear)
    }

    pub fn h(&self) -> Option<DMatrix<f64>> {
        self.block(self.flags.layout(self.r()).quadratic)
    }

    pub fn b(&self) -> Option<DMatrix<f64>> {
        self.block(self.flags.layout(self.r()).input)
    }

    pub fn c(&self) -> Option<DVector<f64>> {
        self.block(self.flags.layout(self.r()).constant)
            .map(|m| m.column(0).into_owned())
    }

    fn features(&self, q: &[f64], u: Option<&[f64]>, out: &mut [f64]) {
        let mut at = 0;
        if self.flags.linear {
            out[..q.len()].copy_from_slice(q);
            at = q.len();
        }
        for &(a, b) in &self.pairs {
            out[at] = if a == b { q[a] * q[a] } else { 2.0 * q[a] * q[b] };
            at += 1;
        }
        if let Some(u) = u {
            out[at..at + u.len()].copy_from_slice(u);
            at += u.len();
        }
        if self.flags.constant {
            out[at] = 1.0;
        }
    }

    /// Right-hand side `f(q̂, u)` written into `out`; `scratch` holds `d(r,m)` features.
    fn eval(&self, q: &[f64], u: Option<&[f64]>, scratch: &mut [f64], out: &mut [f64]) {
        self.features(q, u, scratch);
        let r = self.r();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &f) in scratch.iter().enumerate() {
            if f != 0.0 {
                let col = &self.operator.as_slice()[j * r..(j + 1) * r];
                for (o, c) in out.iter_mut().zip(col) {
                    *o += c * f;
                }
            }
        }
    }

    /// `f(q̂, u)` as a vector.
    pub fn rhs(&self, q: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        let mut scratch = vec![0.0; self.operator.ncols()];
        let mut out = DVector::zeros(self.r());
        self.eval(q.as_slice(), u.map(|u| u.as_slice()), &mut scratch, out.as_mut_slice());
        out
    }
}

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Integrator {
    /// Adaptive Dormand–Prince 5(4) with dense output on the requested grid.
    Dopri5 {
        atol: f64,
        rtol: f64,
        max_steps: usize,
    },
    /// Classical RK4 with a fixed number of substeps per output interval.
    Rk4 { substeps: usize },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Dopri5 {
            atol: 1e-9,
            rtol: 1e-7,
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub integrator: Integrator,
    /// Instability threshold `B` on `max|q̂|`; `None` checks finiteness only.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Unstable { time: f64, reason: String },
}

/// Reduced trajectory on a time grid. An unstable run keeps the columns
/// computed before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn is_stable(&self) -> bool {
        self.outcome == Outcome::Completed
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(RomError::InvalidArgument("empty time grid".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RomError::InvalidArgument(
            "time grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

struct System<'a> {
    ops: &'a RomOperators,
    input: Option<&'a InputFn>,
    scratch: Vec<f64>,
    u: Vec<f64>,
}

impl System<'_> {
    fn f(&mut self, t: f64, y: &[f64], out: &mut [f64]) {
        let u = match self.input {
            Some(input) => {
                let v = input(t);
                self.u.clear();
                self.u.extend_from_slice(v.as_slice());
                Some(self.u.as_slice())
            }
            None => None,
        };
        self.ops.eval(y, u, &mut self.scratch, out);
    }
}

fn violates(y: &[f64], bound: Option<f64>) -> Option<String> {
    if y.iter().any(|v| !v.is_finite()) {
        return Some("non-finite state".into());
    }
    if let Some(b) = bound {
        let m = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > b {
            return Some(format!("max |q| = {m:e} exceeds bound {b:e}"));
        }
    }
    None
}

/// Integrate the ROM from `q0` and report the state at every grid time.
///
/// Blow-up (non-finite state, bound exceeded, step-size collapse or the step
/// limit) yields an unstable trajectory rather than an error.
pub fn integrate(
    ops: &RomOperators,
    q0: &DVector<f64>,
    grid: &[f64],
    input: Option<&InputFn>,
    options: &IntegrateOptions,
) -> Result<Trajectory> {
    validate_grid(grid)?;
    if q0.len() != ops.r() {
        return Err(RomError::DimensionMismatch(format!(
            "initial condition has {} entries, ROM has r = {}",
            q0.len(),
            ops.r()
        )));
    }
    if ops.flags.has_input() {
        let f = input.ok_or_else(|| {
            RomError::InvalidArgument("ROM has an input block but no input function".into())
        })?;
        let u0 = f(grid[0]);
        if u0.len() != ops.flags.inputs {
            return Err(RomError::DimensionMismatch(format!(
                "input function returns {} entries, expected {}",
                u0.len(),
                ops.flags.inputs
            )));
        }
    }
    let mut sys = System {
        ops,
        input: if ops.flags.has_input() { input } else { None },
        scratch: vec![0.0; ops.operator.ncols()],
        u: Vec::new(),
    };
    let r = ops.r();
    let mut out = Vec::with_capacity(r * grid.len());
    let outcome = match violates(q0.as_slice(), options.bound) {
        Some(reason) => Outcome::Unstable {
            time: grid[0],
            reason,
        },
        None => {
            out.extend_from_slice(q0.as_slice());
            match options.integrator {
                Integrator::Dopri5 {
                    atol,
                    rtol,
                    max_steps,
                } => dopri5(&mut sys, q0.as_slice(), grid, atol, rtol, max_steps, options.bound, &mut out),
                Integrator::Rk4 { substeps } => {
                    rk4(&mut sys, q0.as_slice(), grid, substeps.max(1), options.bound, &mut out)
                }
            }
        }
    };
    let cols = out.len() / r;
    Ok(Trajectory {
        times: grid.to_vec(),
        states: DMatrix::from_vec(r, cols, out),
        outcome,
    })
}

fn rk4(
    sys: &mut System,
    y0: &[f64],
    grid: &[f64],
    substeps: usize,
    bound: Option<f64>,
    out: &mut Vec<f64>,
) -> Outcome {
    let r = y0.len();
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; r], vec![0.0; r], vec![0.0; r], vec![0.0; r], vec![0.0; r]);
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            sys.f(t, &y, &mut k1);
            for j in 0..r {
                tmp[j] = y[j] + 0.5 * h * k1[j];
            }
            sys.f(t + 0.5 * h, &tmp, &mut k2);
            for j in 0..r {
                tmp[j] = y[j] + 0.5 * h * k2[j];
            }
            sys.f(t + 0.5 * h, &tmp, &mut k3);
            for j in 0..r {
                tmp[j] = y[j] + h * k3[j];
            }
            sys.f(t + h, &tmp, &mut k4);
            for j in 0..r {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            if let Some(reason) = violates(&y, bound) {
                return Outcome::Unstable { time: t + h, reason };
            }
        }
        out.extend_from_slice(&y);
    }
    Outcome::Completed
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output (Hairer & Wanner's contd5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn rms_scaled(v: &[f64], y: &[f64], atol: f64, rtol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(e, y)| {
            let sc = atol + rtol * y.abs();
            (e / sc).powi(2)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn initial_step(sys: &mut System, t: f64, y: &[f64], f0: &[f64], span: f64, atol: f64, rtol: f64) -> f64 {
    let d0 = rms_scaled(y, y, atol, rtol);
    let d1 = rms_scaled(f0, y, atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 * span } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    sys.f(t + h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, y, atol, rtol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6 * span)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let h = (100.0 * h0).min(h1).min(span);
    if h.is_finite() && h > 0.0 {
        h
    } else {
        1e-6 * span
    }
}

#[allow(clippy::too_many_arguments)]
fn dopri5(
    sys: &mut System,
    y0: &[f64],
    grid: &[f64],
    atol: f64,
    rtol: f64,
    max_steps: usize,
    bound: Option<f64>,
    out: &mut Vec<f64>,
) -> Outcome {
    let r = y0.len();
    let tf = *grid.last().expect("non-empty grid");
    let mut t = grid[0];
    if grid.len() == 1 {
        return Outcome::Completed;
    }
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; r];
    sys.f(t, &y, &mut k1);
    if k1.iter().any(|v| !v.is_finite()) {
        return Outcome::Unstable {
            time: t,
            reason: "non-finite derivative".into(),
        };
    }
    let mut h = initial_step(sys, t, &y, &k1, tf - t, atol, rtol);
    let mut next = 1;
    let mut steps = 0usize;
    let mut rejected_last = false;
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; r],
        vec![0.0; r],
        vec![0.0; r],
        vec![0.0; r],
        vec![0.0; r],
        vec![0.0; r],
    );
    let mut tmp = vec![0.0; r];
    let mut ynew = vec![0.0; r];
    let mut err_v = vec![0.0; r];
    let mut dense = vec![0.0; r];
    while next < grid.len() {
        if steps >= max_steps {
            return Outcome::Unstable {
                time: t,
                reason: format!("step limit {max_steps} reached"),
            };
        }
        steps += 1;
        let last = t + h >= tf || (tf - (t + h)) <= 1e-12 * tf.abs().max(1.0);
        if last {
            h = tf - t;
        }
        for j in 0..r {
            tmp[j] = y[j] + h * A21 * k1[j];
        }
        sys.f(t + C2 * h, &tmp, &mut k2);
        for j in 0..r {
            tmp[j] = y[j] + h * (A31 * k1[j] + A32 * k2[j]);
        }
        sys.f(t + C3 * h, &tmp, &mut k3);
        for j in 0..r {
            tmp[j] = y[j] + h * (A41 * k1[j] + A42 * k2[j] + A43 * k3[j]);
        }
        sys.f(t + C4 * h, &tmp, &mut k4);
        for j in 0..r {
            tmp[j] = y[j] + h * (A51 * k1[j] + A52 * k2[j] + A53 * k3[j] + A54 * k4[j]);
        }
        sys.f(t + C5 * h, &tmp, &mut k5);
        for j in 0..r {
            tmp[j] = y[j]
                + h * (A61 * k1[j] + A62 * k2[j] + A63 * k3[j] + A64 * k4[j] + A65 * k5[j]);
        }
        let t_new = if last { tf } else { t + h };
        sys.f(t_new, &tmp, &mut k6);
        for j in 0..r {
            ynew[j] = y[j]
                + h * (A71 * k1[j] + A73 * k3[j] + A74 * k4[j] + A75 * k5[j] + A76 * k6[j]);
        }
        sys.f(t_new, &ynew, &mut k7);
        for j in 0..r {
            err_v[j] = h
                * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]);
        }
        let err = {
            let s: f64 = (0..r)
                .map(|j| {
                    let sc = atol + rtol * y[j].abs().max(ynew[j].abs());
                    (err_v[j] / sc).powi(2)
                })
                .sum();
            (s / r as f64).sqrt()
        };
        let min_h = 1e-14 * t.abs().max(tf.abs()).max(1e-300);
        if !err.is_finite() || k7.iter().any(|v| !v.is_finite()) {
            h *= 0.2;
            rejected_last = true;
            if h < min_h {
                return Outcome::Unstable {
                    time: t,
                    reason: "non-finite step".into(),
                };
            }
            continue;
        }
        if err <= 1.0 {
            // dense output for grid points inside (t, t_new]
            while next < grid.len() && grid[next] <= t_new {
                let g = grid[next];
                if g == t_new {
                    dense.copy_from_slice(&ynew);
                } else {
                    let th = (g - t) / h;
                    let th1 = 1.0 - th;
                    for j in 0..r {
                        let ydiff = ynew[j] - y[j];
                        let bspl = h * k1[j] - ydiff;
                        let r4 = ydiff - h * k7[j] - bspl;
                        let r5 = h
                            * (D1 * k1[j] + D3 * k3[j] + D4 * k4[j] + D5 * k5[j] + D6 * k6[j]
                                + D7 * k7[j]);
                        dense[j] = y[j] + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)));
                    }
                }
                if let Some(reason) = violates(&dense, bound) {
                    return Outcome::Unstable { time: g, reason };
                }
                out.extend_from_slice(&dense);
                next += 1;
            }
            if let Some(reason) = violates(&ynew, bound) {
                return Outcome::Unstable { time: t_new, reason };
            }
            t = t_new;
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            let mut fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if rejected_last {
                fac = fac.min(1.0);
            }
            rejected_last = false;
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected_last = true;
            if h < min_h {
                return Outcome::Unstable {
                    time: t,
                    reason: "step size underflow".into(),
                };
            }
        }
    }
    Outcome::Completed
}

/// `B = τ · max |q̂|` over all training trajectories.
pub fn stability_bound<'a>(trajectories: impl IntoIterator<Item = &'a DMatrix<f64>>, tau: f64) -> f64 {
    tau * trajectories
        .into_iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `‖truth − pred‖_F / ‖truth‖_F`.
pub fn relative_error(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(RomError::DimensionMismatch(format!(
            "truth {:?} vs prediction {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let num = (truth - pred).norm();
    let den = truth.norm();
    Ok(if den == 0.0 {
        if num == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        num / den
    })
}

/// Draw `n` operator samples, row `i` as `μ_i + L_i z`.
///
/// Sample `s` uses its own ChaCha20 stream `s` under `seed`, so any subset of
/// samples can be regenerated independently of evaluation order.
pub fn sample_operators(posterior: &OperatorPosterior, n: usize, seed: u64) -> Result<Vec<RomOperators>> {
    (0..n)
        .map(|s| sample_operator(posterior, seed, s as u64))
        .collect()
}

/// Draw number `stream` of [`sample_operators`] on its own.
pub fn sample_operator(posterior: &OperatorPosterior, seed: u64, stream: u64) -> Result<RomOperators> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let d = posterior.dim();
    let mut o = DMatrix::zeros(posterior.r, d);
    for (i, row) in posterior.rows.iter().enumerate() {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &row.mean + &row.covariance_factor * z;
        o.row_mut(i).copy_from(&x.transpose());
    }
    RomOperators::new(o, posterior.flags)
}

/// Operators of the posterior mean.
pub fn mean_operators(posterior: &OperatorPosterior) -> Result<RomOperators> {
    RomOperators::new(posterior.mean_matrix(), posterior.flags)
}

/// Affine map `y = W q̂ + b` applied to every trajectory column before statistics
/// are accumulated (e.g. reconstruction at probe locations).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub weights: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearObservation {
    pub fn identity(r: usize) -> Self {
        LinearObservation {
            weights: DMatrix::identity(r, r),
            offset: DVector::zeros(r),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weights * states;
        for mut c in y.column_iter_mut() {
            c += &self.offset;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub seed: u64,
    pub bound: Option<f64>,
    pub integrator: Integrator,
}

/// Statistics of one initial condition's observed trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats {
    /// Pointwise sample mean over stable members.
    pub mean: DMatrix<f64>,
    /// Pointwise sample standard deviation (`N−1` denominator, 0 for one member).
    pub std: DMatrix<f64>,
    /// Observed trajectory of the posterior-mean ROM, NaN after a blow-up.
    pub mean_operator: DMatrix<f64>,
    pub mean_operator_stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RomEnsemble {
    pub times: Vec<f64>,
    pub stats: Vec<ObservedStats>,
    /// A member is stable when it stays bounded for every initial condition.
    pub stable: Vec<bool>,
    pub seed: u64,
    /// Observed member trajectories `[member][ic]`, when requested.
    pub members: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl RomEnsemble {
    pub fn stable_count(&self) -> usize {
        self.stable.iter().filter(|&&s| s).count()
    }
}

/// Sample the posterior and run every draw from every initial condition.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_run(
    posterior: &OperatorPosterior,
    config: &EnsembleConfig,
    initial_conditions: &[DVector<f64>],
    grid: &[f64],
    input: Option<&InputFn>,
    observe: &LinearObservation,
    keep_members: bool,
) -> Result<RomEnsemble> {
    if config.samples == 0 {
        return Err(RomError::InvalidArgument("ensemble size must be positive".into()));
    }
    let samples = sample_operators(posterior, config.samples, config.seed)?;
    let mean = mean_operators(posterior)?;
    ensemble_from_operators(&samples, &mean, config, initial_conditions, grid, input, observe, keep_members)
}

/// Ensemble statistics over explicitly given operator draws.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_from_operators(
    samples: &[RomOperators],
    mean_ops: &RomOperators,
    config: &EnsembleConfig,
    initial_conditions: &[DVector<f64>],
    grid: &[f64],
    input: Option<&InputFn>,
    observe: &LinearObservation,
    keep_members: bool,
) -> Result<RomEnsemble> {
    validate_grid(grid)?;
    if samples.is_empty() || initial_conditions.is_empty() {
        return Err(RomError::InvalidArgument(
            "ensemble needs at least one draw and one initial condition".into(),
        ));
    }
    if observe.weights.ncols() != mean_ops.r() || observe.offset.len() != observe.outputs() {
        return Err(RomError::DimensionMismatch("observation map does not match r".into()));
    }
    let opts = IntegrateOptions {
        integrator: config.integrator,
        bound: config.bound,
    };
    let (p, nt) = (observe.outputs(), grid.len());
    let mean_stats = initial_conditions
        .par_iter()
        .map(|q0| {
            let tr = integrate(mean_ops, q0, grid, input, &opts)?;
            let mut full = DMatrix::from_element(p, nt, f64::NAN);
            let obs = observe.apply(&tr.states);
            full.columns_mut(0, obs.ncols()).copy_from(&obs);
            Ok((full, tr.is_stable()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mean_acc = vec![DMatrix::zeros(p, nt); initial_conditions.len()];
    let mut m2_acc = vec![DMatrix::zeros(p, nt); initial_conditions.len()];
    let mut count = 0usize;
    let mut stable = Vec::with_capacity(samples.len());
    let mut members = keep_members.then(Vec::new);
    let chunk = (rayon::current_num_threads() * 4).max(1);
    for block in samples.chunks(chunk) {
        let runs = block
            .par_iter()
            .map(|ops| {
                let mut out = Vec::with_capacity(initial_conditions.len());
                let mut ok = true;
                for q0 in initial_conditions {
                    let tr = integrate(ops, q0, grid, input, &opts)?;
                    if !tr.is_stable() {
                        ok = false;
                        if !keep_members {
                            break;
                        }
                    }
                    let mut full = DMatrix::from_element(p, nt, f64::NAN);
                    let obs = observe.apply(&tr.states);
                    full.columns_mut(0, obs.ncols()).copy_from(&obs);
                    out.push(full);
                }
                Ok((ok, out))
            })
            .collect::<Result<Vec<_>>>()?;
        // accumulate in draw order so results do not depend on scheduling
        for (ok, trajs) in runs {
            stable.push(ok);
            if ok {
                count += 1;
                for (l, y) in trajs.iter().enumerate() {
                    let delta = y - &mean_acc[l];
                    mean_acc[l] += &delta / count as f64;
                    let delta2 = y - &mean_acc[l];
                    m2_acc[l] += delta.component_mul(&delta2);
                }
            }
            if let Some(m) = members.as_mut() {
                m.push(trajs);
            }
        }
    }
    if count == 0 {
        return Err(RomError::NoStableMembers {
            total: samples.len(),
        });
    }
    let stats = mean_acc
        .into_iter()
        .zip(m2_acc)
        .zip(mean_stats)
        .map(|((mean, m2), (mean_operator, mean_operator_stable))| ObservedStats {
            mean,
            std: if count > 1 {
                m2.map(|v| (v.max(0.0) / (count - 1) as f64).sqrt())
            } else {
                DMatrix::zeros(p, nt)
            },
            mean_operator,
            mean_operator_stable,
        })
        .collect();
    Ok(RomEnsemble {
        times: grid.to_vec(),
        stats,
        stable,
        seed: config.seed,
        members,
    })
}
