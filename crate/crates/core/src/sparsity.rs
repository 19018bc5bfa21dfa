//! Euclidean projections onto the per-layer sparsity constraint sets.
//!
//! Four modes: irregular (element cardinality), filter (whole GEMM rows),
//! column (whole GEMM columns), and combined (filter then column). Each
//! projection keeps the α largest-magnitude elements or largest-l2-norm
//! groups and zeroes the rest, which is the Frobenius-nearest feasible
//! point. Ties between equal norms go to the lower index so results are
//! reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GemmMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    Irregular,
    Filter,
    Column,
    Combined,
}

impl std::fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SparsityMode::Irregular => "irregular",
            SparsityMode::Filter => "filter",
            SparsityMode::Column => "column",
            SparsityMode::Combined => "combined",
        };
        f.write_str(s)
    }
}

/// Per-layer pruning constraint: the mode plus retained counts for the
/// dimensions that mode constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityConstraint {
    pub mode: SparsityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_columns: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_weights: Option<usize>,
}

impl SparsityConstraint {
    pub fn irregular(alpha_weights: usize) -> Self {
        Self {
            mode: SparsityMode::Irregular,
            alpha_filters: None,
            alpha_columns: None,
            alpha_weights: Some(alpha_weights),
        }
    }

    pub fn filter(alpha_filters: usize) -> Self {
        Self {
            mode: SparsityMode::Filter,
            alpha_filters: Some(alpha_filters),
            alpha_columns: None,
            alpha_weights: None,
        }
    }

    pub fn column(alpha_columns: usize) -> Self {
        Self {
            mode: SparsityMode::Column,
            alpha_filters: None,
            alpha_columns: Some(alpha_columns),
            alpha_weights: None,
        }
    }

    pub fn combined(alpha_filters: usize, alpha_columns: usize) -> Self {
        Self {
            mode: SparsityMode::Combined,
            alpha_filters: Some(alpha_filters),
            alpha_columns: Some(alpha_columns),
            alpha_weights: None,
        }
    }

    /// Check the constraint against a layer's GEMM dimensions.
    pub fn validate_for(&self, rows: usize, cols: usize) -> Result<()> {
        let check = |alpha: Option<usize>, limit: usize, context: &'static str| match alpha {
            Some(a) if a > limit => Err(Error::AlphaOutOfRange {
                context,
                alpha: a,
                limit,
            }),
            Some(_) => Ok(()),
            None => Err(Error::Usage {
                message: format!("{context}: required alpha is missing"),
            }),
        };
        match self.mode {
            SparsityMode::Irregular => check(self.alpha_weights, rows * cols, "alpha_weights"),
            SparsityMode::Filter => check(self.alpha_filters, rows, "alpha_filters"),
            SparsityMode::Column => check(self.alpha_columns, cols, "alpha_columns"),
            SparsityMode::Combined => {
                check(self.alpha_filters, rows, "alpha_filters")?;
                check(self.alpha_columns, cols, "alpha_columns")
            }
        }
    }
}

/// Retained count from a retention ratio: `floor(ratio * dim)`, at least 1
/// whenever the ratio is positive, clamped to `dim`.
pub fn retained_from_ratio(ratio: f64, dim: usize) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((ratio * dim as f64).floor() as usize).clamp(1, dim)
}

/// Binary retain/prune pattern congruent to a layer's GEMM matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    data: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl SparsityMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![1; rows * cols],
            rows,
            cols,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.data[r * self.cols + c] = keep as u8;
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    /// Rows that contain at least one retained entry, ascending.
    pub fn retained_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&r| self.data[r * self.cols..(r + 1) * self.cols].iter().any(|&b| b != 0))
            .collect()
    }

    /// Columns that contain at least one retained entry, ascending.
    pub fn retained_cols(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&c| (0..self.rows).any(|r| self.data[r * self.cols + c] != 0))
            .collect()
    }

    fn row_uniform(&self, r: usize) -> Option<bool> {
        let row = &self.data[r * self.cols..(r + 1) * self.cols];
        if row.iter().all(|&b| b != 0) {
            Some(true)
        } else if row.iter().all(|&b| b == 0) {
            Some(false)
        } else {
            None
        }
    }

    /// Every row all-ones or all-zeros.
    pub fn is_filter_structured(&self) -> bool {
        (0..self.rows).all(|r| self.row_uniform(r).is_some())
    }

    /// Every column all-ones or all-zeros.
    pub fn is_column_structured(&self) -> bool {
        (0..self.cols).all(|c| {
            let first = self.data[c] != 0;
            (0..self.rows).all(|r| (self.data[r * self.cols + c] != 0) == first)
        })
    }

    /// Mask is the outer AND of a row mask and a column mask: all nonzero
    /// rows carry one identical column pattern.
    pub fn is_combined_structured(&self) -> bool {
        let mut pattern: Option<&[u8]> = None;
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            if row.iter().all(|&b| b == 0) {
                continue;
            }
            match pattern {
                None => pattern = Some(row),
                Some(p) if p == row => {}
                Some(_) => return false,
            }
        }
        true
    }

    /// True when the mask satisfies the structure invariant of the given
    /// constraint, including its exact retained counts.
    pub fn matches_constraint(&self, c: &SparsityConstraint) -> bool {
        match c.mode {
            SparsityMode::Irregular => c.alpha_weights == Some(self.popcount()),
            SparsityMode::Filter => {
                self.is_filter_structured()
                    && c.alpha_filters == Some(self.retained_rows().len())
            }
            SparsityMode::Column => {
                self.is_column_structured()
                    && c.alpha_columns == Some(self.retained_cols().len())
            }
            SparsityMode::Combined => match (c.alpha_filters, c.alpha_columns) {
                (Some(af), Some(ac)) => {
                    // A zero alpha on either axis empties the outer AND, so
                    // the other axis's retained count collapses to zero too.
                    let (rows, cols) = if af == 0 || ac == 0 { (0, 0) } else { (af, ac) };
                    self.is_combined_structured()
                        && self.retained_rows().len() == rows
                        && self.retained_cols().len() == cols
                }
                _ => false,
            },
        }
    }

    /// Intersection of two congruent masks.
    pub fn and(&self, other: &SparsityMask) -> Result<SparsityMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                context: "SparsityMask::and",
                expected: format!("{}x{}", self.rows, self.cols),
                actual: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a & b)
            .collect();
        Ok(SparsityMask {
            data,
            rows: self.rows,
            cols: self.cols,
        })
    }

    /// Pack into bytes, row-major, LSB-first within each byte.
    pub fn to_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len().div_ceil(8)];
        for (i, &b) in self.data.iter().enumerate() {
            if b != 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bits(rows: usize, cols: usize, bits: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if bits.len() != n.div_ceil(8) {
            return Err(Error::ShapeMismatch {
                context: "SparsityMask::from_bits",
                expected: format!("{} bytes", n.div_ceil(8)),
                actual: format!("{} bytes", bits.len()),
            });
        }
        let data = (0..n).map(|i| (bits[i / 8] >> (i % 8)) & 1).collect();
        Ok(Self { data, rows, cols })
    }
}

/// Masks for a set of layers, keyed by conv-layer ordinal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    masks: BTreeMap<usize, SparsityMask>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, mask: SparsityMask) {
        self.masks.insert(layer, mask);
    }

    pub fn get(&self, layer: usize) -> Option<&SparsityMask> {
        self.masks.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SparsityMask)> {
        self.masks.iter().map(|(&k, v)| (k, v))
    }

    pub fn layers(&self) -> Vec<usize> {
        self.masks.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// True when every mask is structured (filter, column, or combined), i.e.
    /// the model can be compacted into smaller dense GEMMs.
    pub fn compaction_eligible(&self) -> bool {
        self.masks.values().all(|m| {
            (m.is_filter_structured() || m.is_column_structured()) || m.is_combined_structured()
        })
    }
}

/// Indices of the `k` largest scores, ascending; ties broken by lower index.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

fn row_norms(m: &GemmMatrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn col_norms(m: &GemmMatrix) -> Vec<f64> {
    let mut sums = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            sums[c] += (v as f64) * (v as f64);
        }
    }
    sums.into_iter().map(f64::sqrt).collect()
}

/// Keep the `alpha` largest-magnitude elements, zero the rest.
pub fn project_irregular(m: &GemmMatrix, alpha: usize) -> Result<GemmMatrix> {
    Ok(project_irregular_with_mask(m, alpha)?.0)
}

pub fn project_irregular_with_mask(
    m: &GemmMatrix,
    alpha: usize,
) -> Result<(GemmMatrix, SparsityMask)> {
    let n = m.rows() * m.cols();
    if alpha > n {
        return Err(Error::AlphaOutOfRange {
            context: "project_irregular",
            alpha,
            limit: n,
        });
    }
    let scores: Vec<f64> = m.data().iter().map(|&v| (v as f64).abs()).collect();
    let keep = top_k_indices(&scores, alpha);
    let mut out = GemmMatrix::zeros(m.rows(), m.cols());
    let mut mask = SparsityMask::zeros(m.rows(), m.cols());
    for &i in &keep {
        out.data_mut()[i] = m.data()[i];
        mask.data[i] = 1;
    }
    Ok((out, mask))
}

/// Keep the `alpha` rows with largest l2 norm, zero the rest.
///
/// ```
/// use prunenet::sparsity::project_filters;
/// use prunenet::tensor::GemmMatrix;
///
/// let m = GemmMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0], vec![0.0, 4.0]]).unwrap();
/// let (pruned, mask) = project_filters(&m, 2).unwrap();
/// assert_eq!(mask.retained_rows(), vec![0, 2]);
/// assert_eq!(pruned.row(1), &[0.0, 0.0]);
/// ```
pub fn project_filters(m: &GemmMatrix, alpha: usize) -> Result<(GemmMatrix, SparsityMask)> {
    if alpha > m.rows() {
        return Err(Error::AlphaOutOfRange {
            context: "project_filters",
            alpha,
            limit: m.rows(),
        });
    }
    let keep = top_k_indices(&row_norms(m), alpha);
    let mut out = GemmMatrix::zeros(m.rows(), m.cols());
    let mut mask = SparsityMask::zeros(m.rows(), m.cols());
    for &r in &keep {
        let cols = m.cols();
        out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(m.row(r));
        mask.data[r * cols..(r + 1) * cols].fill(1);
    }
    Ok((out, mask))
}

/// Keep the `alpha` columns with largest l2 norm, zero the rest.
pub fn project_columns(m: &GemmMatrix, alpha: usize) -> Result<(GemmMatrix, SparsityMask)> {
    if alpha > m.cols() {
        return Err(Error::AlphaOutOfRange {
            context: "project_columns",
            alpha,
            limit: m.cols(),
        });
    }
    let keep = top_k_indices(&col_norms(m), alpha);
    let mut out = GemmMatrix::zeros(m.rows(), m.cols());
    let mut mask = SparsityMask::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for &c in &keep {
            out.set(r, c, m.at(r, c));
            mask.set(r, c, true);
        }
    }
    Ok((out, mask))
}

/// Filter projection followed by column projection of the filter-masked
/// matrix. Column norms therefore see only surviving rows. The returned mask
/// is the outer AND of the row pattern and the column pattern.
pub fn project_combined(
    m: &GemmMatrix,
    c: &SparsityConstraint,
) -> Result<(GemmMatrix, SparsityMask)> {
    if c.mode != SparsityMode::Combined {
        return Err(Error::Usage {
            message: format!("project_combined called with mode {}", c.mode),
        });
    }
    c.validate_for(m.rows(), m.cols())?;
    let (row_pruned, row_mask) = project_filters(m, c.alpha_filters.unwrap())?;
    let (out, col_mask) = project_columns(&row_pruned, c.alpha_columns.unwrap())?;
    let mask = row_mask.and(&col_mask)?;
    Ok((out, mask))
}

/// Dispatch on the constraint's mode.
pub fn project(m: &GemmMatrix, c: &SparsityConstraint) -> Result<(GemmMatrix, SparsityMask)> {
    c.validate_for(m.rows(), m.cols())?;
    match c.mode {
        SparsityMode::Irregular => project_irregular_with_mask(m, c.alpha_weights.unwrap()),
        SparsityMode::Filter => project_filters(m, c.alpha_filters.unwrap()),
        SparsityMode::Column => project_columns(m, c.alpha_columns.unwrap()),
        SparsityMode::Combined => project_combined(m, c),
    }
}

/// Elementwise product with a binary mask.
pub fn apply_mask(m: &GemmMatrix, mask: &SparsityMask) -> Result<GemmMatrix> {
    if m.rows() != mask.rows() || m.cols() != mask.cols() {
        return Err(Error::ShapeMismatch {
            context: "apply_mask",
            expected: format!("{}x{}", m.rows(), m.cols()),
            actual: format!("{}x{}", mask.rows(), mask.cols()),
        });
    }
    let data = m
        .data()
        .iter()
        .zip(&mask.data)
        .map(|(&v, &b)| if b != 0 { v } else { 0.0 })
        .collect();
    GemmMatrix::new(m.rows(), m.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> GemmMatrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        GemmMatrix::new(rows, cols, data).unwrap()
    }

    /// All size-k index subsets of 0..n, lexicographic order.
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn go(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if current.len() == k {
                out.push(current.clone());
                return;
            }
            for i in start..n {
                current.push(i);
                go(i + 1, n, k, current, out);
                current.pop();
            }
        }
        go(0, n, k, &mut current, &mut out);
        out
    }

    /// Exhaustive best row support by Frobenius distance, ties to the
    /// lexicographically smallest support.
    fn best_row_support(m: &GemmMatrix, alpha: usize) -> Vec<usize> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for support in subsets(m.rows(), alpha) {
            let mut dist = 0.0f64;
            for r in 0..m.rows() {
                if !support.contains(&r) {
                    dist += m.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
            if best.as_ref().map_or(true, |(d, _)| dist < *d) {
                best = Some((dist, support));
            }
        }
        best.unwrap().1
    }

    fn best_col_support(m: &GemmMatrix, alpha: usize) -> Vec<usize> {
        let t = m.transpose();
        best_row_support(&t, alpha)
    }

    #[test]
    fn irregular_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 4);
        assert_eq!(project_irregular(&m, 12).unwrap(), m);
        let z = project_irregular(&m, 0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn irregular_hand_case() {
        let m = GemmMatrix::from_rows(&[vec![1.0, -5.0], vec![3.0, 2.0]]).unwrap();
        let out = project_irregular(&m, 2).unwrap();
        assert_eq!(out.data(), &[0.0, -5.0, 3.0, 0.0]);
    }

    #[test]
    fn irregular_brute_force_oracle() {
        // Enumerate every magnitude ranking on small random matrices.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 2, 3);
            for alpha in 0..=6usize {
                let out = project_irregular(&m, alpha).unwrap();
                let mut order: Vec<usize> = (0..6).collect();
                order.sort_by(|&a, &b| {
                    (m.data()[b].abs())
                        .total_cmp(&m.data()[a].abs())
                        .then(a.cmp(&b))
                });
                for (rank, &i) in order.iter().enumerate() {
                    let expect = if rank < alpha { m.data()[i] } else { 0.0 };
                    assert_eq!(out.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn irregular_alpha_out_of_range() {
        let m = GemmMatrix::zeros(2, 2);
        assert!(matches!(
            project_irregular(&m, 5),
            Err(Error::AlphaOutOfRange { .. })
        ));
    }

    #[test]
    fn filters_identity_and_hand_case() {
        let m = GemmMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let (same, mask) = project_filters(&m, 3).unwrap();
        assert_eq!(same, m);
        assert!(mask.matches_constraint(&SparsityConstraint::filter(3)));

        let (out, mask) = project_filters(&m, 2).unwrap();
        assert_eq!(
            out,
            GemmMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0], vec![0.0, 4.0]]).unwrap()
        );
        assert_eq!(mask.retained_rows(), vec![0, 2]);
    }

    #[test]
    fn filters_frobenius_optimal_vs_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(1..=5);
            let m = random_matrix(&mut rng, rows, cols);
            for alpha in 0..=rows {
                let (_, mask) = project_filters(&m, alpha).unwrap();
                assert_eq!(mask.retained_rows(), best_row_support(&m, alpha));
            }
        }
    }

    #[test]
    fn columns_identity_and_hand_case() {
        let m = GemmMatrix::from_rows(&[vec![3.0, 0.0, 4.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let (same, _) = project_columns(&m, 3).unwrap();
        assert_eq!(same, m);

        let (out, mask) = project_columns(&m, 2).unwrap();
        assert_eq!(
            out,
            GemmMatrix::from_rows(&[vec![3.0, 0.0, 4.0], vec![0.0, 0.0, 0.0]]).unwrap()
        );
        assert_eq!(mask.retained_cols(), vec![0, 2]);
        assert!(mask.matches_constraint(&SparsityConstraint::column(2)));
    }

    #[test]
    fn columns_frobenius_optimal_vs_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(1..=5);
            let m = random_matrix(&mut rng, rows, cols);
            for alpha in 0..=cols {
                let (_, mask) = project_columns(&m, alpha).unwrap();
                assert_eq!(mask.retained_cols(), best_col_support(&m, alpha));
            }
        }
    }

    #[test]
    fn combined_hand_case() {
        let m = GemmMatrix::from_rows(&[vec![3.0, 0.0, 4.0], vec![0.0, 9.0, 0.0]]).unwrap();
        let c = SparsityConstraint::combined(1, 1);
        let (out, mask) = project_combined(&m, &c).unwrap();
        assert_eq!(
            out,
            GemmMatrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 9.0, 0.0]]).unwrap()
        );
        assert!(mask.matches_constraint(&c));
        assert_eq!(mask.retained_rows(), vec![1]);
        assert_eq!(mask.retained_cols(), vec![1]);
    }

    #[test]
    fn combined_identity_and_mask_is_outer_and() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 4, 6);
        let c = SparsityConstraint::combined(4, 6);
        let (same, mask) = project_combined(&m, &c).unwrap();
        assert_eq!(same, m);
        assert_eq!(mask.popcount(), 24);

        let c = SparsityConstraint::combined(2, 3);
        let (out, mask) = project_combined(&m, &c).unwrap();
        let rows = mask.retained_rows();
        let cols = mask.retained_cols();
        for r in 0..4 {
            for col in 0..6 {
                let expect = rows.contains(&r) && cols.contains(&col);
                assert_eq!(mask.at(r, col), expect);
                if !expect {
                    assert_eq!(out.at(r, col), 0.0);
                }
            }
        }
    }

    #[test]
    fn combined_column_norms_ignore_dead_rows() {
        // Row 0 dominates column 0 but dies in the filter step, so the column
        // step must prefer column 1.
        let m = GemmMatrix::from_rows(&[vec![100.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let (out, mask) = project_combined(&m, &SparsityConstraint::combined(1, 1)).unwrap();
        assert_eq!(mask.retained_rows(), vec![0]);
        // Row 0 survives (norm 100 > sqrt(5)); its largest column is 0.
        assert_eq!(mask.retained_cols(), vec![0]);
        assert_eq!(out.at(0, 0), 100.0);

        // Now make row 1 the survivor; column norms must be computed on the
        // masked matrix where row 0 is gone.
        let m = GemmMatrix::from_rows(&[vec![100.0, 0.0], vec![1.0, 200.0]]).unwrap();
        let (out, mask) = project_combined(&m, &SparsityConstraint::combined(1, 1)).unwrap();
        assert_eq!(mask.retained_rows(), vec![1]);
        assert_eq!(mask.retained_cols(), vec![1]);
        assert_eq!(out.at(1, 1), 200.0);
        assert_eq!(out.at(1, 0), 0.0);
    }

    #[test]
    fn combined_output_is_compactable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, 5, 7);
            let c = SparsityConstraint::combined(3, 4);
            let (out, mask) = project_combined(&m, &c).unwrap();
            let compacted =
                crate::tensor::compact(&out, &mask.retained_rows(), &mask.retained_cols()).unwrap();
            assert_eq!(compacted.dense().rows(), 3);
            assert_eq!(compacted.dense().cols(), 4);
            assert_eq!(compacted.expand(), out);
        }
    }

    #[test]
    fn apply_mask_identities_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 3, 4);
        assert_eq!(apply_mask(&m, &SparsityMask::ones(3, 4)).unwrap(), m);
        let z = apply_mask(&m, &SparsityMask::zeros(3, 4)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let (_, mask) = project_filters(&m, 2).unwrap();
        let once = apply_mask(&m, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        assert_eq!(once, twice);

        assert!(apply_mask(&m, &SparsityMask::ones(4, 3)).is_err());
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        let m = GemmMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        let (_, mask) = project_filters(&m, 2).unwrap();
        assert_eq!(mask.retained_rows(), vec![0, 1]);

        let m = GemmMatrix::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let out = project_irregular(&m, 2).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_groups_may_be_retained_without_backfill() {
        let m = GemmMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (out, mask) = project_filters(&m, 2).unwrap();
        // Only one nonzero row exists; the second retained slot goes to the
        // lowest-index zero row and stays zero.
        assert_eq!(mask.retained_rows(), vec![0, 1]);
        assert_eq!(out.count_nonzero(), 1);
    }

    #[test]
    fn mask_bits_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_matrix(&mut rng, 5, 7);
        let (_, mask) = project_combined(&m, &SparsityConstraint::combined(2, 3)).unwrap();
        let bits = mask.to_bits();
        let back = SparsityMask::from_bits(5, 7, &bits).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn retained_from_ratio_rules() {
        assert_eq!(retained_from_ratio(0.5, 16), 8);
        assert_eq!(retained_from_ratio(0.0, 16), 0);
        assert_eq!(retained_from_ratio(0.01, 16), 1); // minimum 1 when positive
        assert_eq!(retained_from_ratio(1.0, 16), 16);
        assert_eq!(retained_from_ratio(2.0, 16), 16); // clamped
    }

    proptest! {
        #[test]
        fn prop_projection_non_expansive(seed in 0u64..500, rows in 1usize..6, cols in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            let norm = m.frobenius_norm();
            let alpha_w = seed as usize % (rows * cols + 1);
            let p = project_irregular(&m, alpha_w).unwrap();
            prop_assert!(p.sub(&m).unwrap().frobenius_norm() <= norm + 1e-9);
            let (p, _) = project_filters(&m, seed as usize % (rows + 1)).unwrap();
            prop_assert!(p.sub(&m).unwrap().frobenius_norm() <= norm + 1e-9);
            let (p, _) = project_columns(&m, seed as usize % (cols + 1)).unwrap();
            prop_assert!(p.sub(&m).unwrap().frobenius_norm() <= norm + 1e-9);
        }

        #[test]
        fn prop_mask_structure_invariants(seed in 0u64..300, rows in 1usize..6, cols in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            let af = seed as usize % (rows + 1);
            let ac = (seed / 7) as usize % (cols + 1);
            let (_, mask) = project_filters(&m, af).unwrap();
            prop_assert!(mask.matches_constraint(&SparsityConstraint::filter(af)));
            let (_, mask) = project_columns(&m, ac).unwrap();
            prop_assert!(mask.matches_constraint(&SparsityConstraint::column(ac)));
            let c = SparsityConstraint::combined(af, ac);
            let (_, mask) = project_combined(&m, &c).unwrap();
            prop_assert!(mask.matches_constraint(&c));
        }

        #[test]
        fn prop_projection_deterministic(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 4, 5);
            let a = project_irregular(&m, 7).unwrap();
            let b = project_irregular(&m, 7).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
