//! Dense row-major embedding matrices and the similarity kernels built on them.
//!
//! Storage is `f32`; every reduction (dot products, norms) accumulates in `f64`
//! with a fixed summation order, so results do not depend on thread count.

use crate::error::{Error, Result};

/// An `rows x dim` matrix of finite `f32` values in row-major order.
///
/// Holds per-slide patch embeddings, the sampled training pool, stacked text
/// embeddings and prototype matrices alike.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

/// Checks the matrix invariants on raw parts and reports the first violation.
///
/// Order of checks: empty shape, payload length, then values in row-major
/// order (the reported location is the first non-finite element).
pub fn validate_embedding_matrix(rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    if rows == 0 || dim == 0 {
        return Err(Error::EmptyMatrix { rows, dim });
    }
    let expected = rows.checked_mul(dim).unwrap_or(usize::MAX);
    if data.len() != expected {
        return Err(Error::ShapeMismatch {
            rows,
            dim,
            expected,
            actual: data.len(),
        });
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: pos / dim,
            col: pos % dim,
            value: data[pos],
        });
    }
    Ok(())
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        validate_embedding_matrix(rows, dim, &data)?;
        Ok(Self { rows, dim, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Multiplies every element by `factor`, re-validating the result.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.rows,
            self.dim,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Output of [`l2_normalize_rows`]: the normalized matrix plus the rows that
/// were left untouched because their norm was below `1e-12`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRows {
    pub matrix: EmbeddingMatrix,
    pub zero_rows: Vec<usize>,
}

pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> NormalizedRows {
    let mut data = Vec::with_capacity(m.data.len());
    let mut zero_rows = Vec::new();
    for (i, row) in m.iter_rows().enumerate() {
        let norm = dot(row, row).sqrt();
        if norm < ZERO_NORM_THRESHOLD {
            zero_rows.push(i);
            data.extend_from_slice(row);
        } else {
            data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    NormalizedRows {
        matrix: EmbeddingMatrix {
            rows: m.rows,
            dim: m.dim,
            data,
        },
        zero_rows,
    }
}

const LANES: usize = 4;

/// Dot product of two `f32` slices accumulated in `f64`.
///
/// Uses four interleaved accumulators combined in a fixed order, which keeps
/// the result bit-stable while letting the compiler pipeline the loop.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks_a = a.chunks_exact(LANES);
    let chunks_b = b.chunks_exact(LANES);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..LANES {
            acc[k] += ca[k] as f64 * cb[k] as f64;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Four [`dot`] results with both operands already widened to `f64`;
/// bit-identical to calling [`dot`] four times.
#[inline]
fn dot_widened_x4(a: &[f64], ys: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; LANES]; 4];
    let body = a.len() - a.len() % LANES;
    for c in (0..body).step_by(LANES) {
        let x = &a[c..c + LANES];
        for (acc, y) in acc.iter_mut().zip(&ys) {
            let y = &y[c..c + LANES];
            for k in 0..LANES {
                acc[k] += x[k] * y[k];
            }
        }
    }
    let mut out = [0.0f64; 4];
    for ((o, acc), y) in out.iter_mut().zip(&acc).zip(&ys) {
        let tail: f64 = a[body..].iter().zip(&y[body..]).map(|(&p, &q)| p * q).sum();
        *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

/// Dense `rows x cols` matrix of `f64` similarities (`S` or `S'`).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::ShapeMismatch {
                rows,
                dim: cols,
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row index of the largest entry in column `j`; ties go to the smaller row.
    pub fn column_argmax(&self, j: usize) -> Option<usize> {
        argmax_first((0..self.rows).map(|i| self.get(i, j)))
    }

    /// Adds `shift[j]` to every entry of column `j`.
    pub fn shift_columns(&self, shift: &[f64]) -> Self {
        let values = self
            .values
            .chunks_exact(self.cols)
            .flat_map(|row| row.iter().zip(shift).map(|(v, s)| v + s))
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }
}

/// `S[i][j] = dot(a_i, b_j)` for every row pair.
pub fn similarity(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: b.dim(),
            actual: a.dim(),
        });
    }
    // widen each operand once instead of once per product
    let wide_b: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let mut wide_x = vec![0.0f64; a.dim()];
    let mut values = Vec::with_capacity(a.rows() * b.rows());
    for x in a.iter_rows() {
        wide_x.iter_mut().zip(x).for_each(|(w, &v)| *w = v as f64);
        // four prototypes at a time share the loads of `x`; each keeps its own
        // accumulation order, so the values match `dot` bit for bit
        let blocked = b.rows() - b.rows() % 4;
        for j in (0..blocked).step_by(4) {
            let y = |t: usize| &wide_b[(j + t) * b.dim()..(j + t + 1) * b.dim()];
            values.extend(dot_widened_x4(&wide_x, [y(0), y(1), y(2), y(3)]));
        }
        values.extend((blocked..b.rows()).map(|j| dot(x, b.row(j))));
    }
    Ok(SimilarityMatrix {
        rows: a.rows(),
        cols: b.rows(),
        values,
    })
}

/// Index of the maximum; the first occurrence wins ties.
pub fn argmax_first<I: IntoIterator<Item = f64>>(values: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_valid() {
        assert!(validate_embedding_matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn nan_is_reported_with_location() {
        match validate_embedding_matrix(1, 2, &[f32::NAN, 0.0]) {
            Err(Error::NonFiniteValue { row: 0, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match validate_embedding_matrix(2, 2, &[0.0, 0.0, 1.0, f32::INFINITY]) {
            Err(Error::NonFiniteValue { row: 1, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_payload_is_shape_mismatch() {
        assert!(matches!(
            validate_embedding_matrix(3, 2, &[0.0; 5]),
            Err(Error::ShapeMismatch {
                expected: 6,
                actual: 5,
                ..
            })
        ));
        assert!(matches!(
            validate_embedding_matrix(0, 2, &[]),
            Err(Error::EmptyMatrix { .. })
        ));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_rows(&m);
        assert_eq!(n.matrix.data(), &[0.6, 0.8]);
        assert!(n.zero_rows.is_empty());
    }

    #[test]
    fn normalize_flags_zero_rows() {
        let m = EmbeddingMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let n = l2_normalize_rows(&m);
        assert_eq!(n.matrix.data(), &[0.0, 0.0]);
        assert_eq!(n.zero_rows, vec![0]);
    }

    #[test]
    fn normalize_diagonal_rows() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let n = l2_normalize_rows(&m);
        // 1/sqrt(2) and 2/sqrt(8), computed independently
        let a = 1.0 / 2f64.sqrt();
        let b = 2.0 / 8f64.sqrt();
        for (i, &v) in n.matrix.data().iter().enumerate() {
            let want = if i < 2 { a } else { b };
            assert!((v as f64 - want).abs() < 1e-7);
            assert!((v as f64 - 0.70710678).abs() < 1e-7);
        }
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_first([5.0, 5.0, 5.0]), Some(0));
        assert_eq!(argmax_first([1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(std::iter::empty()), None);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (1..=7).map(|v| v as f32).collect();
        let naive: f64 = a.iter().map(|&v| (v * v) as f64).sum();
        assert_eq!(dot(&a, &a), naive);
    }

    proptest! {
        #[test]
        fn blocked_similarity_matches_dot(n in 1usize..6, k in 1usize..10, d in 1usize..13, seed in any::<u64>()) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            };
            let a = EmbeddingMatrix::new(n, d, (0..n * d).map(|_| next()).collect()).unwrap();
            let b = EmbeddingMatrix::new(k, d, (0..k * d).map(|_| next()).collect()).unwrap();
            let s = similarity(&a, &b).unwrap();
            for i in 0..n {
                for j in 0..k {
                    prop_assert_eq!(s.get(i, j).to_bits(), dot(a.row(i), b.row(j)).to_bits());
                }
            }
        }
    }

    fn finite_matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, d)| {
            (
                Just(r),
                Just(d),
                proptest::collection::vec(-1e3f32..1e3, r * d),
            )
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent((r, d, data) in finite_matrix()) {
            let m = EmbeddingMatrix::new(r, d, data).unwrap();
            let once = l2_normalize_rows(&m).matrix;
            let twice = l2_normalize_rows(&once).matrix;
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn validator_matches_invariants(
            (r, d, mut data) in finite_matrix(),
            corrupt in 0usize..4,
            pos in any::<proptest::sample::Index>(),
        ) {
            let len = data.len();
            let expect_ok = match corrupt {
                0 => true,
                1 => { data[pos.index(len)] = f32::NAN; false }
                2 => { data.pop(); false }
                _ => { data[pos.index(len)] = f32::NEG_INFINITY; false }
            };
            prop_assert_eq!(validate_embedding_matrix(r, d, &data).is_ok(), expect_ok);
        }
    }
}
