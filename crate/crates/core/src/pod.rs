//! Snapshot containers, variable scaling, and POD bases.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

/// A named contiguous block of state entries, e.g. the velocity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableBlock {
    pub name: String,
    pub range: Range<usize>,
    pub units: String,
}

impl VariableBlock {
    pub fn new(name: &str, range: Range<usize>, units: &str) -> Self {
        VariableBlock {
            name: name.to_string(),
            range,
            units: units.to_string(),
        }
    }
}

/// Snapshot matrix `Q` (n × k) with its time grid and metadata.
///
/// Columns from several trajectories may be concatenated; `trajectories`
/// partitions the columns and times only need to increase within each part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub states: DMatrix<f64>,
    pub times: Vec<f64>,
    pub inputs: Option<DMatrix<f64>>,
    pub layout: Vec<VariableBlock>,
    pub trajectories: Vec<Range<usize>>,
    /// Present when `states` have been scaled by [`scale_variables`].
    pub scaling: Option<ScalingRecord>,
}

impl SnapshotSet {
    pub fn new(
        states: DMatrix<f64>,
        times: Vec<f64>,
        layout: Vec<VariableBlock>,
        trajectories: Vec<Range<usize>>,
    ) -> Result<Self> {
        let set = SnapshotSet {
            states,
            times,
            inputs: None,
            layout,
            trajectories,
            scaling: None,
        };
        set.validate()?;
        Ok(set)
    }

    /// One trajectory, one unnamed variable spanning all rows.
    pub fn single(states: DMatrix<f64>, times: Vec<f64>) -> Result<Self> {
        let (n, k) = states.shape();
        Self::new(
            states,
            times,
            vec![VariableBlock::new("q", 0..n, "")],
            vec![0..k],
        )
    }

    pub fn with_inputs(mut self, inputs: DMatrix<f64>) -> Result<Self> {
        self.inputs = Some(inputs);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.states.nrows()
    }

    pub fn k(&self) -> usize {
        self.states.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = self.states.shape();
        if self.times.len() != k {
            return Err(RomError::DimensionMismatch(format!(
                "{} times for {k} snapshots",
                self.times.len()
            )));
        }
        if let Some(u) = &self.inputs {
            if u.ncols() != k {
                return Err(RomError::DimensionMismatch(format!(
                    "inputs have {} columns, snapshots {k}",
                    u.ncols()
                )));
            }
        }
        let mut at = 0;
        for b in &self.layout {
            if b.range.start != at || b.range.end <= b.range.start {
                return Err(RomError::Format(format!(
                    "variable blocks do not partition 0..{n} (block `{}` = {:?})",
                    b.name, b.range
                )));
            }
            at = b.range.end;
        }
        if at != n {
            return Err(RomError::Format(format!(
                "variable blocks cover 0..{at}, state has {n} rows"
            )));
        }
        let mut at = 0;
        for t in &self.trajectories {
            if t.start != at || t.end <= t.start {
                return Err(RomError::Format(format!(
                    "trajectory boundaries do not partition 0..{k} ({t:?})"
                )));
            }
            if self.times[t.clone()].windows(2).any(|w| w[1] <= w[0]) {
                return Err(RomError::Format(format!(
                    "times not strictly increasing within trajectory {t:?}"
                )));
            }
            at = t.end;
        }
        if at != k {
            return Err(RomError::Format(format!(
                "trajectories cover 0..{at}, snapshot count {k}"
            )));
        }
        Ok(())
    }

    /// Columns of one trajectory as a new single-trajectory set.
    pub fn trajectory(&self, index: usize) -> SnapshotSet {
        let cols = self.trajectories[index].clone();
        SnapshotSet {
            states: self.states.columns(cols.start, cols.len()).into_owned(),
            times: self.times[cols.clone()].to_vec(),
            inputs: self
                .inputs
                .as_ref()
                .map(|u| u.columns(cols.start, cols.len()).into_owned()),
            layout: self.layout.clone(),
            trajectories: vec![0..cols.len()],
            scaling: self.scaling.clone(),
        }
    }
}

/// Per-variable affine map applied before the SVD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingScheme {
    Identity,
    /// Divide by the maximum absolute value.
    MaxAbs,
    /// Subtract the mean, then divide by the maximum absolute deviation.
    CenteredMaxAbs,
    /// Map `[min, max]` onto `[-1, 1]`.
    MinMax,
}

/// `x' = (x - shift) / scale` for one variable block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableScaling {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub layout: Vec<VariableBlock>,
    pub variables: Vec<VariableScaling>,
}

impl ScalingRecord {
    pub fn apply(&self, states: &mut DMatrix<f64>) {
        self.map(states, |x, s| (x - s.shift) / s.scale);
    }

    pub fn invert(&self, states: &mut DMatrix<f64>) {
        self.map(states, |x, s| x * s.scale + s.shift);
    }

    pub fn apply_vector(&self, v: &mut DVector<f64>) {
        for (b, s) in self.layout.iter().zip(&self.variables) {
            for i in b.range.clone() {
                v[i] = (v[i] - s.shift) / s.scale;
            }
        }
    }

    pub fn invert_vector(&self, v: &mut DVector<f64>) {
        for (b, s) in self.layout.iter().zip(&self.variables) {
            for i in b.range.clone() {
                v[i] = v[i] * s.scale + s.shift;
            }
        }
    }

    fn map(&self, states: &mut DMatrix<f64>, f: impl Fn(f64, &VariableScaling) -> f64) {
        let k = states.ncols();
        for (b, s) in self.layout.iter().zip(&self.variables) {
            for j in 0..k {
                for i in b.range.clone() {
                    states[(i, j)] = f(states[(i, j)], s);
                }
            }
        }
    }
}

/// Scale each variable block by its scheme; the record lets the map be undone.
pub fn scale_variables(snapshots: &SnapshotSet, schemes: &[ScalingScheme]) -> Result<SnapshotSet> {
    let record = scaling_record(snapshots, schemes)?;
    let mut out = snapshots.clone();
    record.apply(&mut out.states);
    out.scaling = Some(record);
    Ok(out)
}

/// [`scale_variables`] without copying the snapshot matrix.
pub fn scale_variables_in_place(snapshots: &mut SnapshotSet, schemes: &[ScalingScheme]) -> Result<()> {
    let record = scaling_record(snapshots, schemes)?;
    record.apply(&mut snapshots.states);
    snapshots.scaling = Some(record);
    Ok(())
}

fn scaling_record(snapshots: &SnapshotSet, schemes: &[ScalingScheme]) -> Result<ScalingRecord> {
    if snapshots.scaling.is_some() {
        return Err(RomError::InvalidArgument(
            "snapshots are already scaled".into(),
        ));
    }
    if schemes.len() != snapshots.layout.len() {
        return Err(RomError::InvalidArgument(format!(
            "{} scaling schemes for {} variables",
            schemes.len(),
            snapshots.layout.len()
        )));
    }
    let q = &snapshots.states;
    let mut variables = Vec::with_capacity(schemes.len());
    for (block, scheme) in snapshots.layout.iter().zip(schemes) {
        let rows = q.rows(block.range.start, block.range.len());
        let (min, max) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if *scheme != ScalingScheme::Identity && !(max > min) {
            return Err(RomError::DegenerateRange {
                name: block.name.clone(),
                value: min,
            });
        }
        let s = match scheme {
            ScalingScheme::Identity => VariableScaling {
                shift: 0.0,
                scale: 1.0,
            },
            ScalingScheme::MaxAbs => VariableScaling {
                shift: 0.0,
                scale: max.abs().max(min.abs()),
            },
            ScalingScheme::CenteredMaxAbs => {
                let mean = rows.mean();
                VariableScaling {
                    shift: mean,
                    scale: (max - mean).abs().max((min - mean).abs()),
                }
            }
            ScalingScheme::MinMax => VariableScaling {
                shift: 0.5 * (max + min),
                scale: 0.5 * (max - min),
            },
        };
        variables.push(s);
    }
    Ok(ScalingRecord {
        layout: snapshots.layout.clone(),
        variables,
    })
}

/// Inverse of [`scale_variables`].
pub fn unscale_variables(snapshots: &SnapshotSet) -> SnapshotSet {
    let mut out = snapshots.clone();
    if let Some(rec) = out.scaling.take() {
        rec.invert(&mut out.states);
    }
    out
}

/// Orthonormal POD basis `V` (n × r) with the full singular value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedBasis {
    pub vectors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub scaling: Option<ScalingRecord>,
}

impl ReducedBasis {
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn r(&self) -> usize {
        self.vectors.ncols()
    }

    /// Keep the leading `r` vectors.
    pub fn truncate(&self, r: usize) -> Result<ReducedBasis> {
        if r == 0 || r > self.r() {
            return Err(RomError::InvalidArgument(format!(
                "cannot truncate a rank-{} basis to {r}",
                self.r()
            )));
        }
        Ok(ReducedBasis {
            vectors: self.vectors.columns(0, r).into_owned(),
            singular_values: self.singular_values.clone(),
            scaling: self.scaling.clone(),
        })
    }

    /// `q ≈ V q̂`, mapped back through the scaling record.
    pub fn reconstruct(&self, qhat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if qhat.nrows() != self.r() {
            return Err(RomError::DimensionMismatch(format!(
                "reduced states have {} rows, basis rank {}",
                qhat.nrows(),
                self.r()
            )));
        }
        let mut q = &self.vectors * qhat;
        if let Some(rec) = &self.scaling {
            rec.invert(&mut q);
        }
        Ok(q)
    }

    /// Full-space values of a few rows only, `V[rows, :] q̂`, unscaled.
    pub fn reconstruct_rows(&self, rows: &[usize], qhat: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), qhat.ncols());
        for (o, &i) in rows.iter().enumerate() {
            let vi = self.vectors.row(i);
            let (shift, scale) = self.row_scaling(i);
            for j in 0..qhat.ncols() {
                out[(o, j)] = vi.dot(&qhat.column(j).transpose()) * scale + shift;
            }
        }
        out
    }

    /// `(shift, scale)` applied to state row `i`.
    pub fn row_scaling(&self, i: usize) -> (f64, f64) {
        self.scaling
            .as_ref()
            .and_then(|rec| {
                rec.layout
                    .iter()
                    .zip(&rec.variables)
                    .find(|(b, _)| b.range.contains(&i))
                    .map(|(_, s)| (s.shift, s.scale))
            })
            .unwrap_or((0.0, 1.0))
    }
}

/// Column count above which the SVD is taken through the `n × n` spatial Gram matrix.
const GRAM_PATH_RATIO: usize = 2;
const GRAM_CHUNK: usize = 2048;

/// Leading `r` left singular vectors of the snapshot matrix.
pub fn compute_pod(snapshots: &SnapshotSet, r: usize) -> Result<ReducedBasis> {
    let (n, k) = snapshots.states.shape();
    if r == 0 || r > n.min(k) {
        return Err(RomError::InvalidArgument(format!(
            "POD rank {r} outside 1..={}",
            n.min(k)
        )));
    }
    let (u, sv) = left_singular_vectors(&snapshots.states);
    let tol = sv.first().copied().unwrap_or(0.0) * (n.max(k) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if r > rank {
        return Err(RomError::RankDeficient { requested: r, rank });
    }
    Ok(ReducedBasis {
        vectors: u.columns(0, r).into_owned(),
        singular_values: sv,
        scaling: snapshots.scaling.clone(),
    })
}

/// Left singular vectors (all `min(n,k)` of them) and non-increasing singular values.
fn left_singular_vectors(q: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (n, k) = q.shape();
    let p = n.min(k);
    let (mut u, mut sv): (DMatrix<f64>, Vec<f64>) = if k > GRAM_PATH_RATIO * n {
        let mut gram = DMatrix::<f64>::zeros(n, n);
        let mut start = 0;
        while start < k {
            let w = GRAM_CHUNK.min(k - start);
            let block = q.columns(start, w);
            gram.gemm(1.0, &block, &block.transpose(), 1.0);
            start += w;
        }
        crate::linalg::symmetrize(&mut gram);
        let eig = gram.symmetric_eigen();
        let sv = eig.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).collect();
        (eig.eigenvectors, sv)
    } else {
        let svd = q.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        (u, svd.singular_values.iter().copied().collect())
    };
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    order.truncate(p);
    u = DMatrix::from_fn(n, p, |i, j| u[(i, order[j])]);
    sv = order.iter().map(|&j| sv[j]).collect();
    // fix signs: largest-magnitude entry of each vector positive
    for j in 0..p {
        let col = u.column(j);
        let imax = col.iamax();
        if col[imax] < 0.0 {
            u.column_mut(j).neg_mut();
        }
    }
    (u, sv)
}

/// `Q̂ = Vᵀ Q`, scaling raw snapshots with the basis' record first.
pub fn project(basis: &ReducedBasis, snapshots: &SnapshotSet) -> Result<DMatrix<f64>> {
    if snapshots.n() != basis.n() {
        return Err(RomError::DimensionMismatch(format!(
            "snapshots have {} rows, basis {}",
            snapshots.n(),
            basis.n()
        )));
    }
    match (&snapshots.scaling, &basis.scaling) {
        (None, Some(rec)) => {
            let mut q = snapshots.states.clone();
            rec.apply(&mut q);
            Ok(basis.vectors.tr_mul(&q))
        }
        (Some(a), Some(b)) if a != b => Err(RomError::InvalidArgument(
            "snapshots were scaled with a different record than the basis".into(),
        )),
        (Some(_), None) => Err(RomError::InvalidArgument(
            "scaled snapshots projected onto an unscaled basis".into(),
        )),
        _ => Ok(basis.vectors.tr_mul(&snapshots.states)),
    }
}

/// Project one raw state vector.
pub fn project_vector(basis: &ReducedBasis, q: &DVector<f64>) -> Result<DVector<f64>> {
    if q.len() != basis.n() {
        return Err(RomError::DimensionMismatch(format!(
            "state has {} entries, basis {}",
            q.len(),
            basis.n()
        )));
    }
    let mut q = q.clone();
    if let Some(rec) = &basis.scaling {
        rec.apply_vector(&mut q);
    }
    Ok(basis.vectors.tr_mul(&q))
}

/// Smallest rank whose cumulative energy `Σσ²` reaches `threshold` of the total.
pub fn rank_for_energy(singular_values: &[f64], threshold: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc / total >= threshold {
            return i + 1;
        }
    }
    singular_values.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(v: &DMatrix<f64>) -> f64 {
        (v.tr_mul(v) - DMatrix::identity(v.ncols(), v.ncols()))
            .abs()
            .max()
    }

    /// Largest principal angle sine between two orthonormal column spaces.
    fn subspace_sine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let proj = a - b * b.tr_mul(a);
        proj.norm() / (a.ncols() as f64).sqrt()
    }

    #[test]
    fn identity_snapshots() {
        let s = SnapshotSet::single(DMatrix::identity(3, 3), vec![0.0, 1.0, 2.0]).unwrap();
        let b = compute_pod(&s, 2).unwrap();
        assert_eq!(b.r(), 2);
        assert!(orthonormality_error(&b.vectors) < 1e-12);
        for s in &b.singular_values {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_matrix() {
        let u = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let v = DVector::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        let q = &u * v.transpose();
        let s = SnapshotSet::single(q, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = compute_pod(&s, 1).unwrap();
        assert!((b.singular_values[0] - 15.0).abs() < 1e-12);
        assert!(b.singular_values[1..].iter().all(|&x| x.abs() < 1e-12));
        assert!(matches!(
            compute_pod(&s, 2),
            Err(RomError::RankDeficient { rank: 1, .. })
        ));
    }

    #[test]
    fn both_svd_paths_match_dense_oracle() {
        // 50×200 takes the Gram path, its transpose-shaped sibling the direct path
        for (n, k) in [(50, 200), (50, 60)] {
            let q = random(n, k, 7 + n as u64 + k as u64);
            let s = SnapshotSet::single(q.clone(), (0..k).map(|t| t as f64).collect()).unwrap();
            let b = compute_pod(&s, 10).unwrap();
            let oracle = q.clone().svd(true, false);
            let mut idx: Vec<usize> = (0..oracle.singular_values.len()).collect();
            idx.sort_by(|&a, &c| oracle.singular_values[c].total_cmp(&oracle.singular_values[a]));
            let u = oracle.u.unwrap();
            let uo = DMatrix::from_fn(n, 10, |i, j| u[(i, idx[j])]);
            assert!(orthonormality_error(&b.vectors) < 1e-10);
            assert!(subspace_sine(&b.vectors, &uo) < 1e-8, "n={n} k={k}");
            for (j, &o) in idx.iter().take(10).enumerate() {
                let so = oracle.singular_values[o];
                assert!((b.singular_values[j] - so).abs() < 1e-9 * so);
            }
            assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn projection_on_and_off_subspace() {
        let q = random(20, 8, 3);
        let s = SnapshotSet::single(q.clone(), (0..8).map(|t| t as f64).collect()).unwrap();
        let b = compute_pod(&s, 3).unwrap();
        let inside = &b.vectors * DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let back = &b.vectors * project_vector(&b, &inside).unwrap();
        assert!((back - &inside).norm() <= 1e-10 * inside.norm());
        let mut outside = random(20, 1, 9).column(0).into_owned();
        outside -= &b.vectors * b.vectors.tr_mul(&outside);
        assert!(project_vector(&b, &outside).unwrap().norm() < 1e-12);
        // energy never grows under projection
        let qh = project(&b, &s).unwrap();
        assert!((&b.vectors * qh).norm() <= q.norm());
    }

    #[test]
    fn project_dimension_mismatch() {
        let b = compute_pod(
            &SnapshotSet::single(random(6, 4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            2,
        )
        .unwrap();
        let other = SnapshotSet::single(random(5, 4, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            project(&b, &other),
            Err(RomError::DimensionMismatch(_))
        ));
    }

    fn two_var_set() -> SnapshotSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = DMatrix::from_fn(6, 5, |i, _| {
            if i < 3 {
                rng.random_range(20.0..24.0)
            } else {
                rng.random_range(-5.0..1.0)
            }
        });
        SnapshotSet::new(
            q,
            vec![0.0, 0.1, 0.2, 0.3, 0.4],
            vec![
                VariableBlock::new("rho", 0..3, "kg/m^3"),
                VariableBlock::new("x", 3..6, ""),
            ],
            vec![0..5],
        )
        .unwrap()
    }

    #[test]
    fn scaling_schemes_and_round_trip() {
        let s = two_var_set();
        let scaled =
            scale_variables(&s, &[ScalingScheme::CenteredMaxAbs, ScalingScheme::MaxAbs]).unwrap();
        assert!(scaled.states.iter().all(|v| v.abs() <= 1.0 + 1e-15));
        let back = unscale_variables(&scaled);
        assert!((back.states - &s.states).abs().max() < 1e-12);
        let mm = scale_variables(&s, &[ScalingScheme::MinMax, ScalingScheme::MinMax]).unwrap();
        let rows = mm.states.rows(0, 3);
        assert!((rows.max() - 1.0).abs() < 1e-14 && (rows.min() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_range_is_rejected() {
        let q = DMatrix::from_element(3, 4, 7.0);
        let s = SnapshotSet::single(q, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            scale_variables(&s, &[ScalingScheme::MaxAbs]),
            Err(RomError::DegenerateRange { .. })
        ));
    }

    #[test]
    fn projection_applies_recorded_scaling() {
        let s = two_var_set();
        let scaled = scale_variables(&s, &[ScalingScheme::MaxAbs, ScalingScheme::MaxAbs]).unwrap();
        let b = compute_pod(&scaled, 2).unwrap();
        let from_raw = project(&b, &s).unwrap();
        let from_scaled = project(&b, &scaled).unwrap();
        assert!((from_raw - from_scaled).abs().max() < 1e-12);
    }

    #[test]
    fn layout_and_time_validation() {
        let bad_layout = SnapshotSet::new(
            DMatrix::zeros(4, 2),
            vec![0.0, 1.0],
            vec![VariableBlock::new("a", 0..3, "")],
            vec![0..2],
        );
        assert!(bad_layout.is_err());
        let bad_times = SnapshotSet::single(DMatrix::zeros(2, 3), vec![0.0, 1.0, 1.0]);
        assert!(bad_times.is_err());
        // times may restart across trajectory boundaries
        let ok = SnapshotSet::new(
            DMatrix::zeros(2, 4),
            vec![0.0, 1.0, 0.0, 1.0],
            vec![VariableBlock::new("a", 0..2, "")],
            vec![0..2, 2..4],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn energy_rank() {
        assert_eq!(rank_for_energy(&[3.0, 1.0, 0.1], 0.89), 1);
        assert_eq!(rank_for_energy(&[3.0, 1.0, 0.1], 0.9), 2);
        assert_eq!(rank_for_energy(&[3.0, 1.0, 0.1], 0.999), 2);
        assert_eq!(rank_for_energy(&[3.0, 1.0, 0.1], 1.0), 3);
    }
}
