//! Block layout of the operator matrix and compressed quadratic products.
//!
//! The quadratic term `Ĥ(q ⊗ q)` only has `r(r+1)/2` independent monomials.
//! We store them in column-major upper-triangular order with the diagonal
//! first in each column:
//!
//! ```text
//! (0,0) | (1,1) (0,1) | (2,2) (0,2) (1,2) | ...
//! ```
//!
//! Off-diagonal monomials carry a factor 2, so a compressed row `h` satisfies
//! `h · compressed_kron(q) = H_sym (q ⊗ q)` where `H_sym` is the symmetric full
//! operator with `H_sym[a, (a,b)] = H_sym[a, (b,a)] = h[(a,b)]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

/// Which operator blocks `[Â Ĥ B̂ ĉ]` a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureFlags {
    pub linear: bool,
    pub quadratic: bool,
    /// Input dimension `m`; zero means no input block.
    pub inputs: usize,
    pub constant: bool,
}

impl StructureFlags {
    pub const QUADRATIC_ONLY: StructureFlags = StructureFlags {
        linear: false,
        quadratic: true,
        inputs: 0,
        constant: false,
    };

    /// All four blocks with `m` inputs (`m = 0` drops the input block).
    pub fn full(m: usize) -> Self {
        StructureFlags {
            linear: true,
            quadratic: true,
            inputs: m,
            constant: true,
        }
    }

    pub fn has_input(&self) -> bool {
        self.inputs > 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.linear || self.quadratic || self.has_input() || self.constant) {
            return Err(RomError::InvalidArgument(
                "structure flags enable no operator block".into(),
            ));
        }
        Ok(())
    }

    /// Column ranges of each enabled block in the data matrix.
    pub fn layout(&self, r: usize) -> BlockLayout {
        let mut at = 0;
        let mut take = |on: bool, w: usize| {
            if on {
                let range = at..at + w;
                at += w;
                Some(range)
            } else {
                None
            }
        };
        let linear = take(self.linear, r);
        let quadratic = take(self.quadratic, quad_dim(r));
        let input = take(self.has_input(), self.inputs);
        let constant = take(self.constant, 1);
        BlockLayout {
            linear,
            quadratic,
            input,
            constant,
            width: at,
        }
    }
}

/// Column ranges of the enabled blocks, in `[linear, quadratic, input, constant]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub linear: Option<std::ops::Range<usize>>,
    pub quadratic: Option<std::ops::Range<usize>>,
    pub input: Option<std::ops::Range<usize>>,
    pub constant: Option<std::ops::Range<usize>>,
    pub width: usize,
}

/// `r(r+1)/2`.
pub fn quad_dim(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Number of unknowns per operator row, `d(r, m)`.
pub fn d_dim(r: usize, flags: &StructureFlags) -> usize {
    flags.layout(r).width
}

/// Bijection between flat compressed indices and upper-triangular pairs.
#[derive(Debug, Clone)]
pub struct CompressedQuadIndex {
    r: usize,
    pairs: Vec<(usize, usize)>,
}

impl CompressedQuadIndex {
    pub fn new(r: usize) -> Self {
        let mut pairs = Vec::with_capacity(quad_dim(r));
        for b in 0..r {
            pairs.push((b, b));
            for a in 0..b {
                pairs.push((a, b));
            }
        }
        CompressedQuadIndex { r, pairs }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Flat index -> `(a, b)` with `a ≤ b`.
    pub fn pair(&self, j: usize) -> (usize, usize) {
        self.pairs[j]
    }

    /// `(a, b)` in either order -> flat index.
    pub fn index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        assert!(b < self.r, "pair ({a},{b}) out of range for r = {}", self.r);
        let start = b * (b + 1) / 2;
        if a == b {
            start
        } else {
            start + 1 + a
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

fn fill_compressed(q: &[f64], out: &mut [f64]) {
    let mut j = 0;
    for b in 0..q.len() {
        out[j] = q[b] * q[b];
        j += 1;
        for a in 0..b {
            out[j] = 2.0 * q[a] * q[b];
            j += 1;
        }
    }
}

/// Compressed `q ⊗ q` of length `r(r+1)/2`.
pub fn compressed_kron(q: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(quad_dim(q.len()));
    fill_compressed(q.as_slice(), out.as_mut_slice());
    out
}

/// Column-wise compressed Kronecker (Khatri–Rao) product of an `r × k` matrix.
pub fn khatri_rao_compressed(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, k) = q.shape();
    let mut out = DMatrix::zeros(quad_dim(r), k);
    for j in 0..k {
        let col: Vec<f64> = q.column(j).iter().copied().collect();
        let mut buf = vec![0.0; quad_dim(r)];
        fill_compressed(&col, &mut buf);
        out.column_mut(j).copy_from_slice(&buf);
    }
    out
}

/// Expand compressed quadratic rows (`rows × r(r+1)/2`) to symmetric full rows (`rows × r²`).
///
/// Column `a·r + b` of the result multiplies `q_a q_b` in `q ⊗ q`.
pub fn expand_quadratic(h: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    if h.ncols() != quad_dim(r) {
        return Err(RomError::DimensionMismatch(format!(
            "compressed quadratic operator has {} columns, expected {}",
            h.ncols(),
            quad_dim(r)
        )));
    }
    let idx = CompressedQuadIndex::new(r);
    let mut full = DMatrix::zeros(h.nrows(), r * r);
    for (j, &(a, b)) in idx.pairs().iter().enumerate() {
        for i in 0..h.nrows() {
            full[(i, a * r + b)] = h[(i, j)];
            full[(i, b * r + a)] = h[(i, j)];
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_kron(q: &DVector<f64>) -> DVector<f64> {
        let r = q.len();
        DVector::from_fn(r * r, |j, _| q[j / r] * q[j % r])
    }

    #[test]
    fn d_dim_examples() {
        assert_eq!(d_dim(9, &StructureFlags::QUADRATIC_ONLY), 45);
        assert_eq!(d_dim(2, &StructureFlags::full(1)), 7);
        // 38 + 741 + 1 + 1
        assert_eq!(d_dim(38, &StructureFlags::full(1)), 781);
    }

    #[test]
    fn layout_order() {
        let l = StructureFlags::full(1).layout(2);
        assert_eq!(l.linear, Some(0..2));
        assert_eq!(l.quadratic, Some(2..5));
        assert_eq!(l.input, Some(5..6));
        assert_eq!(l.constant, Some(6..7));
    }

    #[test]
    fn empty_flags_rejected() {
        let f = StructureFlags {
            linear: false,
            quadratic: false,
            inputs: 0,
            constant: false,
        };
        assert!(f.validate().is_err());
    }

    #[test]
    fn compressed_kron_examples() {
        let e = compressed_kron(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0]);
        // pair order (0,0), (1,1), (0,1); off-diagonal scaled by 2
        let v = compressed_kron(&DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(v.as_slice(), &[4.0, 9.0, 12.0]);
    }

    #[test]
    fn compressed_matches_full_kron_r3() {
        let q = DVector::from_vec(vec![0.3, -1.7, 2.2]);
        let c = compressed_kron(&q);
        let full = full_kron(&q);
        let idx = CompressedQuadIndex::new(3);
        // reconstruct every full entry from the compressed form
        for a in 0..3 {
            for b in 0..3 {
                let j = idx.index(a, b);
                let scale = if a == b { 1.0 } else { 0.5 };
                assert!((scale * c[j] - full[a * 3 + b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn khatri_rao_columns() {
        let q = DMatrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) as f64).sin());
        let kr = khatri_rao_compressed(&q);
        for j in 0..5 {
            let col = compressed_kron(&q.column(j).into_owned());
            assert_eq!(kr.column(j).as_slice(), col.as_slice());
        }
        assert!(khatri_rao_compressed(&DMatrix::zeros(3, 4))
            .iter()
            .all(|&v| v == 0.0));
        let single = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        assert_eq!(
            khatri_rao_compressed(&single).as_slice(),
            compressed_kron(&DVector::from_vec(vec![2.0, 3.0])).as_slice()
        );
    }

    proptest! {
        #[test]
        fn pair_map_round_trip(r in 1usize..=50) {
            let idx = CompressedQuadIndex::new(r);
            prop_assert_eq!(idx.len(), quad_dim(r));
            let mut seen = std::collections::HashSet::new();
            for j in 0..idx.len() {
                let (a, b) = idx.pair(j);
                prop_assert!(a <= b && b < r);
                prop_assert!(seen.insert((a, b)));
                prop_assert_eq!(idx.index(a, b), j);
                prop_assert_eq!(idx.index(b, a), j);
            }
        }

        #[test]
        fn compressed_row_matches_symmetrized_full_operator(
            r in 1usize..=5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0));
            // arbitrary, non-symmetric full row
            let full_row = DVector::from_fn(r * r, |_, _| rng.random_range(-1.0..1.0));
            let full_val = full_row.dot(&full_kron(&q));
            // compressed row holding the symmetric part
            let idx = CompressedQuadIndex::new(r);
            let h = DVector::from_fn(idx.len(), |j, _| {
                let (a, b) = idx.pair(j);
                0.5 * (full_row[a * r + b] + full_row[b * r + a])
            });
            let comp_val = h.dot(&compressed_kron(&q));
            prop_assert!((full_val - comp_val).abs() <= 1e-12 * (1.0 + full_val.abs()));
            // and expansion back to full reproduces the same quadratic form
            let hm = DMatrix::from_row_slice(1, idx.len(), h.as_slice());
            let expanded = expand_quadratic(&hm, r).unwrap();
            let exp_val = expanded.row(0).transpose().dot(&full_kron(&q));
            prop_assert!((exp_val - full_val).abs() <= 1e-12 * (1.0 + full_val.abs()));
        }
    }
}
