//! End-to-end pipeline: dataset generation, training, regularization
//! selection, ensemble prediction and error statistics, plus the command-line
//! front end that drives them from a TOML configuration.
//!
//! Each stage is also available as an in-memory function so that callers can
//! chain stages without going through files.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::euler::{estimate_derivatives_with_windows, generate_dataset, DerivativeMethod, EulerConfig, NoiseSpec};
use crate::io::{self, write_atomic, write_columns_csv, write_json};
use crate::pod::{compute_pod, project, project_vector, ReducedBasis, ScalingScheme, SnapshotSet};
use crate::regression::{OperatorPosterior, PriorMean, RegressionData};
use crate::regselect::{
    error_based_select, fixed_point_select, log_grid, write_trace_csv, ErrorSearchConfig, FixedPointConfig,
    FixedPointIterate, Parameterization, TrainingTrajectory,
};
use crate::rom::{ensemble_run, relative_error, EnsembleConfig, Integrator, LinearObservation, RomEnsemble};
use crate::tensorops::{d_dim, StructureFlags};

const DATASET_DIR: &str = "dataset";
const MODEL_DIR: &str = "model";
const SELECTION_DIR: &str = "selection";
const PREDICT_DIR: &str = "predict";
const STATS_DIR: &str = "stats";

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub regularization: RegularizationConfig,
    pub ensemble: EnsembleSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("bayesrom-out"),
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            regularization: RegularizationConfig::default(),
            ensemble: EnsembleSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Euler,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Snapshot file (`.csv` or binary container) when importing.
    pub training_path: Option<PathBuf>,
    /// Optional reference solutions when importing.
    pub truth_path: Option<PathBuf>,
    pub euler: EulerConfig,
    pub noise_level: f64,
    /// Keep every `truth_stride`-th full-order step as reference data.
    pub truth_stride: usize,
    /// Subset of the 64 initial conditions; all when absent.
    pub initial_conditions: Option<Vec<usize>>,
    pub derivative: DerivativeMethod,
    pub scaling: ScalingScheme,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Euler,
            training_path: None,
            truth_path: None,
            euler: EulerConfig::default(),
            noise_level: 0.05,
            truth_stride: 10,
            initial_conditions: None,
            derivative: DerivativeMethod::gcv(),
            scaling: ScalingScheme::MaxAbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub rank: usize,
    pub flags: StructureFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rank: 9,
            flags: StructureFlags::QUADRATIC_ONLY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizationMethod {
    /// Evidence-maximizing fixed-point iteration.
    FixedPoint,
    /// Grid search on training error subject to stability.
    ErrorBased,
    /// Use `lambda` as given.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub method: RegularizationMethod,
    /// Starting value of every row's λ (fixed point).
    pub initial_lambda: f64,
    /// Relative change `‖Δλ‖/‖λ‖` that stops the iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Penalty used by the `fixed` method.
    pub lambda: f64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub parameterization: Parameterization,
    /// `τ` in the stability bound `B = τ max|Q̂|`.
    pub bound_margin: f64,
    pub refine: bool,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            method: RegularizationMethod::FixedPoint,
            initial_lambda: 50.0,
            tolerance: 1e-3,
            max_iterations: 100,
            lambda: 1.0,
            grid_min: 1e-4,
            grid_max: 1e4,
            grid_points: 9,
            parameterization: Parameterization::TwoScalar,
            bound_margin: 1.25,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub samples: usize,
    /// `τ` in the stability bound applied to every draw.
    pub bound_margin: f64,
    pub integrator: Integrator,
    /// Cell indices probed within each variable block.
    pub probe_cells: Vec<usize>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            samples: 100,
            bound_margin: 1.25,
            integrator: Integrator::default(),
            probe_cells: vec![0, 50, 100, 150],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read configuration `{}`: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> std::result::Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.model.rank == 0 {
            return usage("model.rank must be at least 1");
        }
        if let Err(e) = self.model.flags.validate() {
            return Err(CliError::Usage(e.to_string()));
        }
        if !(0.0..1.0).contains(&self.dataset.noise_level) {
            return usage("dataset.noise_level must lie in [0, 1)");
        }
        if self.dataset.source == DatasetSource::Import && self.dataset.training_path.is_none() {
            return usage("dataset.training_path is required when dataset.source = \"import\"");
        }
        if self.ensemble.samples == 0 {
            return usage("ensemble.samples must be positive");
        }
        if !(self.ensemble.bound_margin >= 1.0) || !(self.regularization.bound_margin >= 1.0) {
            return usage("bound margins must be at least 1");
        }
        let reg = &self.regularization;
        if !(reg.initial_lambda > 0.0) || !(reg.tolerance > 0.0) || reg.max_iterations == 0 {
            return usage("regularization.initial_lambda, tolerance and max_iterations must be positive");
        }
        if !(reg.lambda >= 0.0) {
            return usage("regularization.lambda must be non-negative");
        }
        if !(reg.grid_min > 0.0 && reg.grid_max >= reg.grid_min) || reg.grid_points == 0 {
            return usage("regularization grid needs 0 < grid_min <= grid_max and grid_points >= 1");
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join(DATASET_DIR)
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join(MODEL_DIR)
    }

    pub fn predict_dir(&self) -> PathBuf {
        self.output_dir.join(PREDICT_DIR)
    }
}

/// Annotated default configuration printed by `--print-schema`.
pub const CONFIG_SCHEMA: &str = r#"# bayesrom pipeline configuration (TOML). Every key is optional; the values
# below are the defaults. Command-line flags override file values.

output_dir = "bayesrom-out"   # dataset/, model/, selection/, predict/, stats/ go here
seed = 0                      # root seed for noise and posterior sampling

[dataset]
source = "euler"              # "euler" (generate) or "import" (read training_path)
# training_path = "snap.csv"  # snapshot CSV or binary container, import only
# truth_path = "truth.bin"    # reference solutions, import only
noise_level = 0.05            # noise std = noise_level * (max - min) per variable
truth_stride = 10             # keep every 10th full-order step as reference data
# initial_conditions = [0, 9, 18]   # subset of 0..64, default all
scaling = "max-abs"           # identity | max-abs | centered-max-abs | min-max

[dataset.euler]
length = 2.0                  # periodic domain [0, length)
cells = 200
dt = 1e-5
gamma = 1.4
t_final = 0.03
training_end = 0.01           # snapshots with t < training_end are training data
pressure = 100000.0           # uniform initial pressure [Pa]
velocity_levels = [95.0, 105.0]
density_levels = [20.0, 24.0]
nodes = [0.0, 0.6666666666666666, 1.3333333333333333]

[dataset.derivative]
method = "local-poly-gcv"     # "local-poly-gcv" (degree, min_window, max_window),
degree = 2                    # "local-poly" (window, degree) or "fd4"
min_window = 11               # candidate windows 11, 21, 41, ... chosen per mode
max_window = 1001             # by generalized cross-validation

[model]
rank = 9                      # POD dimension r

[model.flags]                 # operator blocks [A H B c]
linear = false
quadratic = true
inputs = 0
constant = false

[regularization]
method = "fixed-point"        # fixed-point | error-based | fixed
initial_lambda = 50.0         # fixed point: starting λ for every row
tolerance = 0.001             # fixed point: stop when |Δλ|/|λ| < tolerance
max_iterations = 100
lambda = 1.0                  # fixed: penalty on every entry
grid_min = 0.0001             # error-based: log grid bounds and size per scalar
grid_max = 10000.0
grid_points = 9
parameterization = "two-scalar"   # one-scalar | two-scalar
bound_margin = 1.25           # error-based: stability bound τ max|Q̂|
refine = true                 # error-based: Brent / Nelder-Mead after the grid

[ensemble]
samples = 100                 # posterior draws N
bound_margin = 1.25           # draws exceeding τ max|Q̂| count as unstable
probe_cells = [0, 50, 100, 150]   # cell indices probed in every variable

[ensemble.integrator]
method = "dopri5"             # "dopri5" (atol, rtol, max_steps) or "rk4" (substeps)
atol = 1e-9
rtol = 1e-7
max_steps = 200000
"#;

/// Independent 64-bit seed for stream `stream` of the root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

pub const NOISE_STREAM: u64 = 1;
pub const ENSEMBLE_STREAM: u64 = 2;

// ---------------------------------------------------------------- errors

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Rom(#[from] RomError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Rom(RomError::Io(e))
    }
}

impl CliError {
    /// 1 usage, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Rom(e) if e.is_numerical() => 3,
            CliError::Rom(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------- stages

/// Training snapshots reduced to `r` modes, with derivative targets.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    pub basis: ReducedBasis,
    pub qhat: DMatrix<f64>,
    pub times: Vec<f64>,
    pub trajectories: Vec<Range<usize>>,
    pub data: RegressionData,
    /// `max|Q̂|` over the training data.
    pub max_abs: f64,
    /// Local-fit window per row (empty for finite differences).
    pub derivative_windows: Vec<usize>,
}

impl TrainingProblem {
    pub fn r(&self) -> usize {
        self.basis.r()
    }

    pub fn training_trajectories(&self) -> Vec<TrainingTrajectory> {
        self.trajectories
            .iter()
            .map(|t| TrainingTrajectory {
                times: self.times[t.clone()].to_vec(),
                states: self.qhat.columns(t.start, t.len()).into_owned(),
            })
            .collect()
    }
}

/// Scale the snapshots in place and compute a POD basis of rank `r_max`.
pub fn prepare_basis(set: &mut SnapshotSet, scaling: ScalingScheme, r_max: usize) -> Result<ReducedBasis> {
    if set.scaling.is_none() {
        let schemes = vec![scaling; set.layout.len()];
        crate::pod::scale_variables_in_place(set, &schemes)?;
    }
    compute_pod(set, r_max)
}

/// Project scaled snapshots onto the leading `r` modes and estimate derivatives.
pub fn reduce(
    set: &SnapshotSet,
    basis: &ReducedBasis,
    r: usize,
    flags: StructureFlags,
    derivative: DerivativeMethod,
) -> Result<TrainingProblem> {
    let basis = basis.truncate(r)?;
    let qhat = project(&basis, set)?;
    let (targets, derivative_windows) =
        estimate_derivatives_with_windows(&qhat, &set.times, &set.trajectories, derivative)?;
    let data = RegressionData::from_states(&qhat, set.inputs.as_ref(), targets, flags)?;
    let max_abs = qhat.amax();
    Ok(TrainingProblem {
        basis,
        qhat,
        times: set.times.clone(),
        trajectories: set.trajectories.clone(),
        data,
        max_abs,
        derivative_windows,
    })
}

/// Outcome of a regularization selection.
#[derive(Debug, Clone)]
pub struct Selection {
    pub method: RegularizationMethod,
    pub lambdas: Vec<DVector<f64>>,
    pub posterior: OperatorPosterior,
    pub trace: Vec<FixedPointIterate>,
    pub converged: bool,
    pub iterations: usize,
    /// Selected search scalars and training error (error-based only).
    pub search_params: Option<Vec<f64>>,
    pub search_error: Option<f64>,
}

pub fn select_regularization(
    problem: &TrainingProblem,
    config: &RegularizationConfig,
    horizon: f64,
) -> Result<Selection> {
    let r = problem.r();
    let data = &problem.data;
    match config.method {
        RegularizationMethod::Fixed => {
            let lambdas = vec![config.lambda; r];
            let posterior = OperatorPosterior::fit_uniform(data, &lambdas, &PriorMean::Zero)?;
            Ok(Selection {
                method: config.method,
                lambdas: posterior.rows.iter().map(|row| row.lambda.clone()).collect(),
                posterior,
                trace: Vec::new(),
                converged: true,
                iterations: 0,
                search_params: None,
                search_error: None,
            })
        }
        RegularizationMethod::FixedPoint => {
            let fp = FixedPointConfig {
                initial_lambdas: vec![config.initial_lambda; r],
                tolerance: config.tolerance,
                max_iterations: config.max_iterations,
            };
            let res = fixed_point_select(data, &fp)?;
            Ok(Selection {
                method: config.method,
                lambdas: res.posterior.rows.iter().map(|row| row.lambda.clone()).collect(),
                posterior: res.posterior,
                trace: res.trace,
                converged: res.converged,
                iterations: res.iterations,
                search_params: None,
                search_error: None,
            })
        }
        RegularizationMethod::ErrorBased => {
            let mut cfg = ErrorSearchConfig::new(
                log_grid(config.grid_min, config.grid_max, config.grid_points),
                config.parameterization,
                horizon,
            );
            cfg.bound_margin = config.bound_margin;
            cfg.refine = config.refine;
            let res = error_based_select(&problem.training_trajectories(), data, &cfg, None)?;
            let lambdas = vec![res.lambda.clone(); r];
            let posterior = OperatorPosterior::fit(data, &lambdas, &PriorMean::Zero)?;
            Ok(Selection {
                method: config.method,
                lambdas,
                posterior,
                trace: Vec::new(),
                converged: true,
                iterations: res.evaluations.len(),
                search_params: Some(res.params),
                search_error: Some(res.error),
            })
        }
    }
}

/// Probe location: a state row, named by variable and cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub variable: String,
    pub cell: usize,
    pub row: usize,
}

pub fn probes_for(basis: &ReducedBasis, layout: &[crate::pod::VariableBlock], cells: &[usize]) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for b in layout {
        for &c in cells {
            if c >= b.range.len() {
                return Err(RomError::InvalidArgument(format!(
                    "probe cell {c} outside variable `{}` ({} cells)",
                    b.name,
                    b.range.len()
                )));
            }
            out.push(Probe {
                variable: b.name.clone(),
                cell: c,
                row: b.range.start + c,
            });
        }
    }
    if out.iter().any(|p| p.row >= basis.n()) {
        return Err(RomError::DimensionMismatch("probe rows exceed the basis dimension".into()));
    }
    Ok(out)
}

/// `[I_r; diag(s_p) V_p]` with offsets `[0; shift_p]`: reduced coordinates
/// followed by probe values in physical units.
pub fn observation_map(basis: &ReducedBasis, probes: &[Probe]) -> LinearObservation {
    let r = basis.r();
    let p = probes.len();
    let mut weights = DMatrix::zeros(r + p, r);
    let mut offset = DVector::zeros(r + p);
    weights.view_mut((0, 0), (r, r)).fill_with_identity();
    for (j, probe) in probes.iter().enumerate() {
        let (shift, scale) = basis.row_scaling(probe.row);
        for c in 0..r {
            weights[(r + j, c)] = scale * basis.vectors[(probe.row, c)];
        }
        offset[r + j] = shift;
    }
    LinearObservation { weights, offset }
}

/// Reduced initial condition of each reference trajectory.
pub fn reduced_initial_conditions(basis: &ReducedBasis, truth: &SnapshotSet) -> Result<Vec<DVector<f64>>> {
    truth
        .trajectories
        .iter()
        .map(|t| project_vector(basis, &truth.states.column(t.start).into_owned()))
        .collect()
}

/// Run the posterior ensemble from every reference initial condition.
pub fn predict_ensemble(
    posterior: &OperatorPosterior,
    basis: &ReducedBasis,
    truth: &SnapshotSet,
    probes: &[Probe],
    config: &EnsembleConfig,
) -> Result<RomEnsemble> {
    let ics = reduced_initial_conditions(basis, truth)?;
    let first = &truth.trajectories[0];
    let grid = &truth.times[first.clone()];
    if truth.trajectories.iter().any(|t| &truth.times[t.clone()] != grid) {
        return Err(RomError::InvalidArgument(
            "reference trajectories must share one time grid".into(),
        ));
    }
    let observe = observation_map(basis, probes);
    ensemble_run(posterior, config, &ics, grid, None, &observe, false)
}

/// Error statistics of one initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcStats {
    pub initial_condition: usize,
    pub training_error: f64,
    pub prediction_error: f64,
    pub mean_operator_training_error: f64,
    pub mean_operator_prediction_error: f64,
    /// Probe points in the prediction regime within mean ± 3 std.
    pub covered: usize,
    pub probe_points: usize,
}

/// `‖truth − V q̃‖_F / ‖truth‖_F` over the given columns, in scaled coordinates.
pub fn regime_error(basis: &ReducedBasis, truth_scaled: &DMatrix<f64>, reduced: &DMatrix<f64>, cols: &[usize]) -> Result<f64> {
    if cols.is_empty() {
        return Ok(f64::NAN);
    }
    if reduced.iter().any(|v| !v.is_finite()) {
        let finite = cols.iter().all(|&j| reduced.column(j).iter().all(|v| v.is_finite()));
        if !finite {
            return Ok(f64::INFINITY);
        }
    }
    let t = truth_scaled.select_columns(cols);
    let p = basis.vectors.clone() * reduced.select_columns(cols);
    relative_error(&t, &p)
}

/// Column indices in the training (`t < training_end`) and prediction regimes.
pub fn regimes(times: &[f64], training_end: f64) -> (Vec<usize>, Vec<usize>) {
    let tol = 1e-9 * times.iter().fold(0.0f64, |a, t| a.max(t.abs())).max(training_end.abs());
    let mut train = Vec::new();
    let mut pred = Vec::new();
    for (j, &t) in times.iter().enumerate() {
        if t < training_end - tol {
            train.push(j);
        } else {
            pred.push(j);
        }
    }
    (train, pred)
}

/// Errors and coverage of one initial condition given its reduced sample
/// mean, mean-operator trajectory, probe statistics, and reference solution.
#[allow(clippy::too_many_arguments)]
pub fn ic_stats(
    index: usize,
    basis: &ReducedBasis,
    truth: &DMatrix<f64>,
    times: &[f64],
    training_end: f64,
    reduced_mean: &DMatrix<f64>,
    reduced_mean_operator: &DMatrix<f64>,
    probes: &[Probe],
    probe_mean: &DMatrix<f64>,
    probe_std: &DMatrix<f64>,
) -> Result<IcStats> {
    let mut scaled = truth.clone();
    if let Some(rec) = &basis.scaling {
        rec.apply(&mut scaled);
    }
    let (train, pred) = regimes(times, training_end);
    let mut covered = 0;
    for &j in &pred {
        for (p, probe) in probes.iter().enumerate() {
            let err = (truth[(probe.row, j)] - probe_mean[(p, j)]).abs();
            if err <= 3.0 * probe_std[(p, j)] {
                covered += 1;
            }
        }
    }
    Ok(IcStats {
        initial_condition: index,
        training_error: regime_error(basis, &scaled, reduced_mean, &train)?,
        prediction_error: regime_error(basis, &scaled, reduced_mean, &pred)?,
        mean_operator_training_error: regime_error(basis, &scaled, reduced_mean_operator, &train)?,
        mean_operator_prediction_error: regime_error(basis, &scaled, reduced_mean_operator, &pred)?,
        covered,
        probe_points: pred.len() * probes.len(),
    })
}

/// Summary over initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub r: usize,
    pub mean_training_error: f64,
    pub mean_prediction_error: f64,
    pub mean_operator_training_error: f64,
    pub mean_operator_prediction_error: f64,
    pub coverage: f64,
    pub per_ic: Vec<IcStats>,
}

pub fn summarize(r: usize, per_ic: Vec<IcStats>) -> StatsSummary {
    let avg = |f: fn(&IcStats) -> f64| per_ic.iter().map(f).sum::<f64>() / per_ic.len() as f64;
    let covered: usize = per_ic.iter().map(|s| s.covered).sum();
    let points: usize = per_ic.iter().map(|s| s.probe_points).sum();
    StatsSummary {
        r,
        mean_training_error: avg(|s| s.training_error),
        mean_prediction_error: avg(|s| s.prediction_error),
        mean_operator_training_error: avg(|s| s.mean_operator_training_error),
        mean_operator_prediction_error: avg(|s| s.mean_operator_prediction_error),
        coverage: if points == 0 { f64::NAN } else { covered as f64 / points as f64 },
        per_ic,
    }
}

/// Statistics of an in-memory ensemble against the reference solutions.
pub fn ensemble_stats(
    basis: &ReducedBasis,
    truth: &SnapshotSet,
    training_end: f64,
    probes: &[Probe],
    ensemble: &RomEnsemble,
) -> Result<StatsSummary> {
    let r = basis.r();
    let p = probes.len();
    let per_ic = truth
        .trajectories
        .iter()
        .zip(&ensemble.stats)
        .enumerate()
        .map(|(i, (t, s))| {
            ic_stats(
                i,
                basis,
                &truth.states.columns(t.start, t.len()).into_owned(),
                &truth.times[t.clone()],
                training_end,
                &s.mean.rows(0, r).into_owned(),
                &s.mean_operator.rows(0, r).into_owned(),
                probes,
                &s.mean.rows(r, p).into_owned(),
                &s.std.rows(r, p).into_owned(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(r, per_ic))
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub noise_seed: u64,
    pub noise_level: f64,
    pub noise_free: bool,
    pub source: DatasetSource,
    pub euler: Option<EulerConfig>,
    pub initial_conditions: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub trajectories: usize,
    pub training_end: f64,
    /// Per-variable `(name, min, max)` of the clean training data.
    pub clean_ranges: Vec<(String, f64, f64)>,
    pub noise_stds: Vec<f64>,
    pub clamped: usize,
    pub training_file: String,
    pub truth_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub format: String,
    pub seed: u64,
    pub r: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub flags: StructureFlags,
    pub method: RegularizationMethod,
    /// Uniform λ per row (fixed point and fixed) or the error-based scalars.
    pub lambda_per_row: Vec<f64>,
    pub search_params: Option<Vec<f64>>,
    pub search_error: Option<f64>,
    pub noise_vars: Vec<f64>,
    pub gram_condition: f64,
    pub converged: bool,
    pub iterations: usize,
    pub training_max_abs: f64,
    pub training_end: f64,
    pub derivative_windows: Vec<usize>,
    pub singular_values: Vec<f64>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub format: String,
    pub seed: u64,
    pub ensemble_seed: u64,
    pub samples: usize,
    pub stable_count: usize,
    pub mean_operator_stable: Vec<bool>,
    pub bound: f64,
    pub r: usize,
    pub lambda_per_row: Vec<f64>,
    pub training_end: f64,
    pub t_final: f64,
    pub probes: Vec<Probe>,
    pub initial_conditions: Vec<usize>,
    pub files: Vec<String>,
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Rom(RomError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))))
}

fn load_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    io::read_json(path).map_err(|e| {
        CliError::Rom(RomError::Format(format!("cannot read `{}`: {e}", path.display())))
    })
}

// ---------------------------------------------------------------- commands

pub fn cmd_generate(config: &PipelineConfig) -> CliResult<DatasetManifest> {
    config.validate()?;
    let dir = config.dataset_dir();
    ensure_dir(&dir)?;
    let noise_seed = derive_seed(config.seed, NOISE_STREAM);
    let (training, truth, manifest) = match config.dataset.source {
        DatasetSource::Euler => {
            let ds = generate_dataset(
                &config.dataset.euler,
                &NoiseSpec {
                    level: config.dataset.noise_level,
                    seed: noise_seed,
                },
                config.dataset.truth_stride,
                config.dataset.initial_conditions.as_deref(),
            )?;
            let names = ["rho", "rho_u", "rho_e"];
            let manifest = DatasetManifest {
                format: "bayesrom-dataset".into(),
                seed: config.seed,
                noise_seed,
                noise_level: config.dataset.noise_level,
                noise_free: config.dataset.noise_level == 0.0,
                source: DatasetSource::Euler,
                euler: Some(config.dataset.euler.clone()),
                initial_conditions: ds.initial_conditions.clone(),
                n: ds.training.n(),
                k: ds.training.k(),
                trajectories: ds.training.trajectories.len(),
                training_end: config.dataset.euler.training_end,
                clean_ranges: names
                    .iter()
                    .zip(&ds.clean_ranges)
                    .map(|(n, (lo, hi))| (n.to_string(), *lo, *hi))
                    .collect(),
                noise_stds: ds.noise_stds.clone(),
                clamped: ds.clamped,
                training_file: "training.bin".into(),
                truth_file: Some("truth.bin".into()),
            };
            (ds.training, Some(ds.truth), manifest)
        }
        DatasetSource::Import => {
            let path = config.dataset.training_path.as_ref().expect("validated");
            let mut set = io::load_snapshots(path)?;
            let clean_ranges = crate::euler::variable_ranges(&set.states, &set.layout);
            let noise_stds = crate::euler::add_noise(
                &mut set,
                &NoiseSpec {
                    level: config.dataset.noise_level,
                    seed: noise_seed,
                },
            )?;
            let truth = match &config.dataset.truth_path {
                Some(p) => Some(io::load_snapshots(p)?),
                None => None,
            };
            let training_end = set
                .trajectories
                .iter()
                .map(|t| set.times[t.end - 1])
                .fold(f64::NEG_INFINITY, f64::max);
            let spacing = set.times.get(1).map_or(0.0, |t1| (t1 - set.times[0]).abs());
            let manifest = DatasetManifest {
                format: "bayesrom-dataset".into(),
                seed: config.seed,
                noise_seed,
                noise_level: config.dataset.noise_level,
                noise_free: config.dataset.noise_level == 0.0,
                source: DatasetSource::Import,
                euler: None,
                initial_conditions: (0..set.trajectories.len()).collect(),
                n: set.n(),
                k: set.k(),
                trajectories: set.trajectories.len(),
                training_end: training_end + 0.5 * spacing,
                clean_ranges: set
                    .layout
                    .iter()
                    .zip(&clean_ranges)
                    .map(|(b, (lo, hi))| (b.name.clone(), *lo, *hi))
                    .collect(),
                noise_stds,
                clamped: 0,
                training_file: "training.bin".into(),
                truth_file: truth.as_ref().map(|_| "truth.bin".to_string()),
            };
            (set, truth, manifest)
        }
    };
    io::save_snapshots(&dir.join(&manifest.training_file), &training)?;
    if let (Some(t), Some(name)) = (&truth, &manifest.truth_file) {
        io::save_snapshots(&dir.join(name), t)?;
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!(
        "dataset: {} trajectories, n = {}, k = {}, written to {}",
        manifest.trajectories,
        manifest.n,
        manifest.k,
        dir.display()
    );
    Ok(manifest)
}

fn load_problem(config: &PipelineConfig) -> CliResult<(DatasetManifest, TrainingProblem)> {
    let dir = config.dataset_dir();
    let manifest: DatasetManifest = load_manifest(&dir.join("manifest.json"))?;
    let mut set = io::load_snapshots(&dir.join(&manifest.training_file))?;
    let basis = prepare_basis(&mut set, config.dataset.scaling, config.model.rank)?;
    let problem = reduce(&set, &basis, config.model.rank, config.model.flags, config.dataset.derivative)?;
    Ok((manifest, problem))
}

fn horizon(manifest: &DatasetManifest, config: &PipelineConfig) -> CliResult<f64> {
    if let Some(e) = &manifest.euler {
        return Ok(e.t_final);
    }
    match &manifest.truth_file {
        Some(name) => {
            let truth = io::load_snapshots(&config.dataset_dir().join(name))?;
            Ok(truth.times.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        None => Ok(manifest.training_end),
    }
}

fn write_trace(path: &Path, trace: &[FixedPointIterate]) -> CliResult<()> {
    write_atomic(path, |w| write_trace_csv(trace, w))?;
    Ok(())
}

fn lambda_summary(sel: &Selection) -> Vec<f64> {
    sel.lambdas.iter().map(|l| l.max()).collect()
}

/// Selection report written by `select-reg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub format: String,
    pub seed: u64,
    pub r: usize,
    pub method: RegularizationMethod,
    pub lambdas: Vec<Vec<f64>>,
    pub search_params: Option<Vec<f64>>,
    pub search_error: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub noise_vars: Vec<f64>,
}

pub fn cmd_select_reg(config: &PipelineConfig) -> CliResult<SelectionReport> {
    config.validate()?;
    let (manifest, problem) = load_problem(config)?;
    let sel = select_regularization(&problem, &config.regularization, horizon(&manifest, config)?)?;
    let dir = config.output_dir.join(SELECTION_DIR);
    ensure_dir(&dir)?;
    if !sel.trace.is_empty() {
        write_trace(&dir.join("trace.csv"), &sel.trace)?;
    }
    let report = SelectionReport {
        format: "bayesrom-selection".into(),
        seed: config.seed,
        r: problem.r(),
        method: sel.method,
        lambdas: sel.lambdas.iter().map(|l| l.iter().copied().collect()).collect(),
        search_params: sel.search_params.clone(),
        search_error: sel.search_error,
        converged: sel.converged,
        iterations: sel.iterations,
        noise_vars: sel.posterior.noise_vars(),
    };
    write_json(&dir.join("selection.json"), &report)?;
    Ok(report)
}

pub fn cmd_train(config: &PipelineConfig) -> CliResult<TrainingReport> {
    config.validate()?;
    let (manifest, problem) = load_problem(config)?;
    let sel = select_regularization(&problem, &config.regularization, horizon(&manifest, config)?)?;
    let dir = config.model_dir();
    ensure_dir(&dir)?;
    let mut files = vec!["basis.bin".to_string(), "posterior.json".to_string()];
    io::save_basis(&dir.join("basis.bin"), &problem.basis)?;
    if !sel.trace.is_empty() {
        write_trace(&dir.join("trace.csv"), &sel.trace)?;
        files.push("trace.csv".into());
    }
    let report = TrainingReport {
        format: "bayesrom-training-report".into(),
        seed: config.seed,
        r: problem.r(),
        m: config.model.flags.inputs,
        d: d_dim(problem.r(), &config.model.flags),
        k: problem.data.k(),
        flags: config.model.flags,
        method: sel.method,
        lambda_per_row: lambda_summary(&sel),
        search_params: sel.search_params.clone(),
        search_error: sel.search_error,
        noise_vars: sel.posterior.noise_vars(),
        gram_condition: problem.data.gram_condition(),
        converged: sel.converged,
        iterations: sel.iterations,
        training_max_abs: problem.max_abs,
        training_end: manifest.training_end,
        derivative_windows: problem.derivative_windows.clone(),
        singular_values: problem.basis.singular_values.clone(),
        files,
    };
    // the posterior goes last so a failed run never leaves one behind
    write_json(&dir.join("report.json"), &report)?;
    let json = sel.posterior.to_json()?;
    write_atomic(&dir.join("posterior.json"), |w| {
        use std::io::Write;
        w.write_all(json.as_bytes())?;
        Ok(())
    })?;
    log::info!(
        "trained r = {} ({:?}), λ = {:?}, σ² = {:?}",
        report.r,
        report.method,
        report.lambda_per_row,
        report.noise_vars
    );
    Ok(report)
}

fn column_header(prefix: &[&str], names: &[String]) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain(names.iter().cloned()).collect()
}

pub fn cmd_predict(config: &PipelineConfig, posterior_path: Option<&Path>) -> CliResult<PredictionManifest> {
    config.validate()?;
    let dataset_dir = config.dataset_dir();
    let model_dir = config.model_dir();
    let dataset: DatasetManifest = load_manifest(&dataset_dir.join("manifest.json"))?;
    let report: TrainingReport = load_manifest(&model_dir.join("report.json"))?;
    let post_path = posterior_path.map(Path::to_path_buf).unwrap_or_else(|| model_dir.join("posterior.json"));
    let posterior = OperatorPosterior::from_json(&fs::read_to_string(&post_path)?)?;
    let basis = io::load_basis(&model_dir.join("basis.bin"))?;
    if basis.r() != posterior.r {
        return Err(RomError::DimensionMismatch(format!(
            "basis has {} modes, posterior r = {}",
            basis.r(),
            posterior.r
        ))
        .into());
    }
    let truth_name = dataset
        .truth_file
        .as_ref()
        .ok_or_else(|| CliError::Usage("dataset has no reference solutions to start predictions from".into()))?;
    let truth = io::load_snapshots(&dataset_dir.join(truth_name))?;
    let probes = probes_for(&basis, &truth.layout, &config.ensemble.probe_cells)?;
    let ensemble_seed = derive_seed(config.seed, ENSEMBLE_STREAM);
    let bound = config.ensemble.bound_margin * report.training_max_abs;
    let ens_cfg = EnsembleConfig {
        samples: config.ensemble.samples,
        seed: ensemble_seed,
        bound: Some(bound),
        integrator: config.ensemble.integrator,
    };
    let ensemble = predict_ensemble(&posterior, &basis, &truth, &probes, &ens_cfg)?;

    let dir = config.predict_dir();
    ensure_dir(&dir)?;
    let r = basis.r();
    let p = probes.len();
    let times = &ensemble.times;
    let in_training: Vec<f64> = times
        .iter()
        .map(|&t| if t < dataset.training_end - 1e-9 * dataset.training_end.abs() { 1.0 } else { 0.0 })
        .collect();
    let modes: Vec<String> = (1..=r).map(|i| format!("q{i}")).collect();
    let probe_names: Vec<String> = probes.iter().map(|pr| format!("{}[{}]", pr.variable, pr.cell)).collect();
    let mut files = Vec::new();
    for (i, s) in ensemble.stats.iter().enumerate() {
        let nt = times.len();
        // reduced: training flag, mean, std, mean-operator per mode
        let mut red = DMatrix::zeros(1 + 3 * r, nt);
        red.row_mut(0).copy_from_slice(&in_training);
        red.rows_mut(1, r).copy_from(&s.mean.rows(0, r));
        red.rows_mut(1 + r, r).copy_from(&s.std.rows(0, r));
        red.rows_mut(1 + 2 * r, r).copy_from(&s.mean_operator.rows(0, r));
        let mut header = column_header(&["time", "training"], &[]);
        header.extend(modes.iter().map(|m| format!("mean_{m}")));
        header.extend(modes.iter().map(|m| format!("std_{m}")));
        header.extend(modes.iter().map(|m| format!("meanop_{m}")));
        let name = format!("reduced_{i:03}.csv");
        write_atomic(&dir.join(&name), |w| write_columns_csv(w, &header, times, &red))?;
        files.push(name);

        let mut pro = DMatrix::zeros(1 + 5 * p, nt);
        pro.row_mut(0).copy_from_slice(&in_training);
        let mean = s.mean.rows(r, p);
        let std = s.std.rows(r, p);
        pro.rows_mut(1, p).copy_from(&mean);
        pro.rows_mut(1 + p, p).copy_from(&std);
        pro.rows_mut(1 + 2 * p, p).copy_from(&(mean - std * 3.0));
        pro.rows_mut(1 + 3 * p, p).copy_from(&(mean + std * 3.0));
        pro.rows_mut(1 + 4 * p, p).copy_from(&s.mean_operator.rows(r, p));
        let mut header = column_header(&["time", "training"], &[]);
        for tag in ["mean", "std", "lower3", "upper3", "meanop"] {
            header.extend(probe_names.iter().map(|n| format!("{tag}_{n}")));
        }
        let name = format!("probes_{i:03}.csv");
        write_atomic(&dir.join(&name), |w| write_columns_csv(w, &header, times, &pro))?;
        files.push(name);
    }
    let manifest = PredictionManifest {
        format: "bayesrom-prediction".into(),
        seed: config.seed,
        ensemble_seed,
        samples: config.ensemble.samples,
        stable_count: ensemble.stable_count(),
        mean_operator_stable: ensemble.stats.iter().map(|s| s.mean_operator_stable).collect(),
        bound,
        r,
        lambda_per_row: report.lambda_per_row.clone(),
        training_end: dataset.training_end,
        t_final: *times.last().expect("non-empty grid"),
        probes,
        initial_conditions: dataset.initial_conditions.clone(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!(
        "prediction: {}/{} stable draws, {} initial conditions",
        manifest.stable_count,
        manifest.samples,
        ensemble.stats.len()
    );
    Ok(manifest)
}

fn read_table(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(RomError::from)?;
    let header: Vec<String> = reader.headers().map_err(RomError::from)?.iter().map(String::from).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(RomError::from)?;
        if rec.len() != header.len() {
            return Err(RomError::Format(format!("ragged row in `{}`", path.display())).into());
        }
        for s in rec.iter() {
            values.push(
                s.parse::<f64>()
                    .map_err(|_| RomError::Format(format!("bad number `{s}` in `{}`", path.display())))?,
            );
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

pub fn cmd_stats(config: &PipelineConfig, prediction_dir: Option<&Path>, truth_path: Option<&Path>) -> CliResult<StatsSummary> {
    config.validate()?;
    let pred_dir = prediction_dir.map(Path::to_path_buf).unwrap_or_else(|| config.predict_dir());
    let manifest: PredictionManifest = load_manifest(&pred_dir.join("manifest.json"))?;
    let basis = io::load_basis(&config.model_dir().join("basis.bin"))?;
    let truth = match truth_path {
        Some(p) => io::load_snapshots(p)?,
        None => {
            let dataset: DatasetManifest = load_manifest(&config.dataset_dir().join("manifest.json"))?;
            let name = dataset
                .truth_file
                .ok_or_else(|| CliError::Usage("no reference solutions available".into()))?;
            io::load_snapshots(&config.dataset_dir().join(name))?
        }
    };
    if truth.trajectories.len() * 2 != manifest.files.len() || basis.r() != manifest.r {
        return Err(RomError::DimensionMismatch(
            "prediction files do not match the reference set or basis".into(),
        )
        .into());
    }
    let r = manifest.r;
    let p = manifest.probes.len();
    let dir = config.output_dir.join(STATS_DIR);
    ensure_dir(&dir)?;
    let mut per_ic = Vec::new();
    for (i, t) in truth.trajectories.iter().enumerate() {
        let (_, red) = read_table(&pred_dir.join(format!("reduced_{i:03}.csv")))?;
        let (_, pro) = read_table(&pred_dir.join(format!("probes_{i:03}.csv")))?;
        let times: Vec<f64> = red.column(0).iter().copied().collect();
        if times.as_slice() != &truth.times[t.clone()] {
            return Err(RomError::DimensionMismatch(format!(
                "prediction grid of initial condition {i} does not match the reference grid"
            ))
            .into());
        }
        let reduced_mean = red.columns(2, r).transpose();
        let reduced_meanop = red.columns(2 + 2 * r, r).transpose();
        let probe_mean = pro.columns(2, p).transpose();
        let probe_std = pro.columns(2 + p, p).transpose();
        let states = truth.states.columns(t.start, t.len()).into_owned();
        let s = ic_stats(
            i,
            &basis,
            &states,
            &times,
            manifest.training_end,
            &reduced_mean,
            &reduced_meanop,
            &manifest.probes,
            &probe_mean,
            &probe_std,
        )?;
        // pointwise |error| against 3σ per probe
        let nt = times.len();
        let mut trace = DMatrix::zeros(2 * p, nt);
        for j in 0..nt {
            for (q, probe) in manifest.probes.iter().enumerate() {
                trace[(q, j)] = (states[(probe.row, j)] - probe_mean[(q, j)]).abs();
                trace[(p + q, j)] = 3.0 * probe_std[(q, j)];
            }
        }
        let mut header = vec!["time".to_string()];
        for tag in ["abs_error", "three_sigma"] {
            header.extend(manifest.probes.iter().map(|pr| format!("{tag}_{}[{}]", pr.variable, pr.cell)));
        }
        write_atomic(&dir.join(format!("probe_errors_{i:03}.csv")), |w| {
            write_columns_csv(w, &header, &times, &trace)
        })?;
        per_ic.push(s);
    }
    let summary = summarize(r, per_ic);
    let header: Vec<String> = [
        "initial_condition",
        "r",
        "training_error",
        "prediction_error",
        "meanop_training_error",
        "meanop_prediction_error",
        "coverage",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let lead: Vec<f64> = summary.per_ic.iter().map(|s| s.initial_condition as f64).collect();
    let table = DMatrix::from_fn(6, summary.per_ic.len(), |row, c| {
        let s = &summary.per_ic[c];
        match row {
            0 => r as f64,
            1 => s.training_error,
            2 => s.prediction_error,
            3 => s.mean_operator_training_error,
            4 => s.mean_operator_prediction_error,
            _ => {
                if s.probe_points == 0 {
                    f64::NAN
                } else {
                    s.covered as f64 / s.probe_points as f64
                }
            }
        }
    });
    write_atomic(&dir.join("errors.csv"), |w| write_columns_csv(w, &header, &lead, &table))?;
    write_json(&dir.join("stats.json"), &summary)?;
    log::info!(
        "errors: training {:.4e}, prediction {:.4e}, coverage {:.3}",
        summary.mean_training_error,
        summary.mean_prediction_error,
        summary.coverage
    );
    Ok(summary)
}

// ---------------------------------------------------------------- front end

#[derive(Debug, Parser)]
#[command(name = "bayesrom", version, about = "Bayesian operator inference for reduced-order models")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the annotated configuration schema and exit.
    #[arg(long)]
    pub print_schema: bool,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Values that take precedence over the configuration file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    #[arg(long, global = true)]
    pub noise_level: Option<f64>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<RegularizationMethod>,
    #[arg(long, global = true)]
    pub initial_lambda: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Comma-separated initial-condition indices.
    #[arg(long, global = true, value_delimiter = ',')]
    pub initial_conditions: Option<Vec<usize>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rank {
            cfg.model.rank = v;
        }
        if let Some(v) = self.noise_level {
            cfg.dataset.noise_level = v;
        }
        if let Some(v) = self.samples {
            cfg.ensemble.samples = v;
        }
        if let Some(v) = self.method {
            cfg.regularization.method = v;
        }
        if let Some(v) = self.initial_lambda {
            cfg.regularization.initial_lambda = v;
        }
        if let Some(v) = self.lambda {
            cfg.regularization.lambda = v;
        }
        if let Some(v) = &self.initial_conditions {
            cfg.dataset.initial_conditions = Some(v.clone());
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate or import training data and write the dataset.
    Generate,
    /// Build the POD basis and the operator posterior.
    Train,
    /// Run regularization selection only and report the chosen penalties.
    SelectReg,
    /// Sample the posterior and write ensemble statistics.
    Predict {
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Compare predictions with reference solutions.
    Stats {
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// Resolve the configuration from file and flags.
pub fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Execute a parsed command line; returns the text to print on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    if cli.print_schema {
        return Ok(CONFIG_SCHEMA.to_string());
    }
    let command = cli
        .command
        .as_ref()
        .ok_or_else(|| CliError::Usage("a subcommand is required (see --help)".into()))?;
    let cfg = resolve_config(cli)?;
    let out = match command {
        Command::Generate => {
            let m = cmd_generate(&cfg)?;
            format!(
                "generated {} trajectories (n = {}, k = {}) in {}",
                m.trajectories,
                m.n,
                m.k,
                cfg.dataset_dir().display()
            )
        }
        Command::Train => {
            let r = cmd_train(&cfg)?;
            format!(
                "trained r = {}, d = {}, λ = {:?}, converged = {}, written to {}",
                r.r,
                r.d,
                r.lambda_per_row,
                r.converged,
                cfg.model_dir().display()
            )
        }
        Command::SelectReg => {
            let r = cmd_select_reg(&cfg)?;
            format!("selected λ = {:?} ({:?})", r.lambdas.iter().map(|l| l[0]).collect::<Vec<_>>(), r.method)
        }
        Command::Predict { posterior } => {
            let m = cmd_predict(&cfg, posterior.as_deref())?;
            format!(
                "{} of {} draws stable; outputs in {}",
                m.stable_count,
                m.samples,
                cfg.predict_dir().display()
            )
        }
        Command::Stats { prediction, truth } => {
            let s = cmd_stats(&cfg, prediction.as_deref(), truth.as_deref())?;
            format!(
                "mean relative error: training {:.4e}, prediction {:.4e}; coverage {:.2}%",
                s.mean_training_error,
                s.mean_prediction_error,
                100.0 * s.coverage
            )
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_parses_to_defaults() {
        let cfg = PipelineConfig::from_toml(CONFIG_SCHEMA).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let e = PipelineConfig::from_toml("bogus = 1").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let cfg = PipelineConfig::from_toml("[model]\nrank = 0").unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(CliError::from(RomError::Format("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(RomError::NoStableMembers { total: 3 }).exit_code(), 3);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn regimes_split_at_training_end() {
        let t: Vec<f64> = (0..31).map(|j| j as f64 * 1e-3).collect();
        let (a, b) = regimes(&t, 0.01);
        assert_eq!(a.len(), 10);
        assert_eq!(b[0], 10);
    }

    #[test]
    fn flags_override_file() {
        let cli = Cli::parse_from(["bayesrom", "--rank", "4", "--seed", "11", "train"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.model.rank, 4);
        assert_eq!(cfg.seed, 11);
    }
}
