//! Dense row-major `f64` arrays and the handful of operations the loss
//! formulas need.
//!
//! There are no views and no implicit broadcasting: every operation returns a
//! fresh array, and the only broadcasts are [`broadcast_weights`] and
//! [`gather_target_columns`].

use std::fmt;

use crate::error::{check_labels, Error, Result};

/// Norm threshold below which a vector is treated as having no direction.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Element-wise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Row-major rank-3 array, indexed `[i][k][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dim0: usize,
    dim1: usize,
    dim2: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dim0: usize, dim1: usize, dim2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim0 * dim1 * dim2 {
            return Err(Error::shape(format!(
                "{dim0}x{dim1}x{dim2} tensor needs {} values, got {}",
                dim0 * dim1 * dim2,
                data.len()
            )));
        }
        Ok(Tensor3 {
            dim0,
            dim1,
            dim2,
            data,
        })
    }

    pub fn zeros(dim0: usize, dim1: usize, dim2: usize) -> Self {
        Tensor3 {
            dim0,
            dim1,
            dim2,
            data: vec![0.0; dim0 * dim1 * dim2],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.dim0, self.dim1, self.dim2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize, j: usize) -> f64 {
        self.data[(i * self.dim1 + k) * self.dim2 + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, k: usize, j: usize, v: f64) {
        self.data[(i * self.dim1 + k) * self.dim2 + j] = v;
    }

    /// Slice `i` as a `dim1 x dim2` matrix.
    pub fn slice(&self, i: usize) -> Matrix {
        let n = self.dim1 * self.dim2;
        Matrix {
            rows: self.dim1,
            cols: self.dim2,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(Tensor3 {
            dim0: self.dim0,
            dim1: self.dim1,
            dim2: self.dim2,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// L2-normalizes every `[i][..][j]` fiber over the middle axis. Fibers with
    /// norm `<= epsilon` become zero.
    pub fn l2_normalize_middle(&self, epsilon: f64) -> Result<Tensor3> {
        check_epsilon(epsilon)?;
        let mut out = self.clone();
        for i in 0..self.dim0 {
            for j in 0..self.dim2 {
                let norm = (0..self.dim1)
                    .map(|k| self.get(i, k, j).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let inv = if norm > epsilon { 1.0 / norm } else { 0.0 };
                for k in 0..self.dim1 {
                    out.set(i, k, j, self.get(i, k, j) * inv);
                }
            }
        }
        Ok(out)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

fn check_nonempty(m: &Matrix) -> Result<()> {
    if m.rows == 0 || m.cols == 0 {
        Err(Error::shape(format!(
            "cannot normalize an empty {}x{} matrix",
            m.rows, m.cols
        )))
    } else {
        Ok(())
    }
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales each column to unit norm. Columns with norm `<= epsilon` become zero.
pub fn l2_normalize_columns(m: &Matrix, epsilon: f64) -> Result<Matrix> {
    check_nonempty(m)?;
    check_epsilon(epsilon)?;
    let mut out = m.clone();
    for j in 0..m.cols {
        let n = (0..m.rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        let inv = if n > epsilon { 1.0 / n } else { 0.0 };
        for i in 0..m.rows {
            out.set(i, j, m.get(i, j) * inv);
        }
    }
    Ok(out)
}

/// Scales each row to unit norm. Rows with norm `<= epsilon` become zero.
pub fn l2_normalize_rows(m: &Matrix, epsilon: f64) -> Result<Matrix> {
    check_nonempty(m)?;
    check_epsilon(epsilon)?;
    let mut out = m.clone();
    for i in 0..m.rows {
        let n = norm(m.row(i));
        let inv = if n > epsilon { 1.0 / n } else { 0.0 };
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `result[i][j] = sum_k e[i][k] * h[i][k][j]`, i.e. einsum `ik,ikj->ij`.
pub fn batched_contract(e: &Matrix, h: &Tensor3) -> Result<Matrix> {
    if e.rows != h.dim0 || e.cols != h.dim1 {
        return Err(Error::shape(format!(
            "contract {}x{} with {}x{}x{}",
            e.rows, e.cols, h.dim0, h.dim1, h.dim2
        )));
    }
    let c = h.dim2;
    let mut out = Matrix::zeros(e.rows, c);
    for i in 0..e.rows {
        let out_row = &mut out.data[i * c..(i + 1) * c];
        for (k, &eik) in e.row(i).iter().enumerate() {
            let base = (i * h.dim1 + k) * c;
            for (o, &hv) in out_row.iter_mut().zip(&h.data[base..base + c]) {
                *o += eik * hv;
            }
        }
    }
    Ok(out)
}

/// Replicates `w_hat` (N x C) `batch_size` times into a B x N x C tensor.
pub fn broadcast_weights(w_hat: &Matrix, batch_size: usize) -> Result<Tensor3> {
    if batch_size == 0 {
        return Err(Error::shape("batch size must be at least 1"));
    }
    let mut data = Vec::with_capacity(batch_size * w_hat.data.len());
    for _ in 0..batch_size {
        data.extend_from_slice(&w_hat.data);
    }
    Tensor3::new(batch_size, w_hat.rows, w_hat.cols, data)
}

/// Gathers column `labels[i]` of `w_hat` for every sample.
///
/// The result has shape B x N x 1; use [`replicate_classes`] to expand it along
/// the class axis.
pub fn gather_target_columns(w_hat: &Matrix, labels: &[usize]) -> Result<Tensor3> {
    check_labels(labels, w_hat.cols)?;
    let n = w_hat.rows;
    let mut data = Vec::with_capacity(labels.len() * n);
    for &l in labels {
        data.extend((0..n).map(|k| w_hat.get(k, l)));
    }
    Tensor3::new(labels.len(), n, 1, data)
}

/// Repeats a B x N x 1 tensor `num_classes` times along its last axis.
pub fn replicate_classes(t: &Tensor3, num_classes: usize) -> Result<Tensor3> {
    if t.dim2 != 1 {
        return Err(Error::shape(format!(
            "expected a trailing axis of 1, got {:?}",
            t.shape()
        )));
    }
    let mut data = Vec::with_capacity(t.data.len() * num_classes);
    for &v in &t.data {
        data.extend(std::iter::repeat_n(v, num_classes));
    }
    Tensor3::new(t.dim0, t.dim1, num_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn normalize_columns_examples() {
        let m = Matrix::from_rows(&[[3.0, 0.0, 5.0], [4.0, 0.0, 0.0]]).unwrap();
        let n = l2_normalize_columns(&m, DEFAULT_EPSILON).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(1, 0) - 0.8).abs() < 1e-15);
        assert_eq!(n.column(1), vec![0.0, 0.0]);
        assert_eq!(n.column(2), vec![1.0, 0.0]);
        // input untouched
        assert_eq!(m.get(0, 0), 3.0);
    }

    #[test]
    fn normalize_rows_examples() {
        let m = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![-2.0, 0.0, 0.0],
        ])
        .unwrap();
        let n = l2_normalize_rows(&m, DEFAULT_EPSILON).unwrap();
        assert!((n.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((n.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(n.row(2), &[-1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_empty_and_bad_epsilon() {
        assert!(matches!(
            l2_normalize_rows(&Matrix::zeros(0, 3), 1e-12),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            l2_normalize_columns(&Matrix::zeros(2, 0), 1e-12),
            Err(Error::InvalidShape(_))
        ));
        assert!(l2_normalize_rows(&Matrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let sel = matmul(
            &Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            &Matrix::from_rows(&[[2.0], [5.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(sel.data(), &[2.0]);
        let sum = matmul(
            &Matrix::from_rows(&[[1.0, 1.0]]).unwrap(),
            &Matrix::from_rows(&[[1.0], [1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(sum.data(), &[2.0]);
        assert!(matches!(
            matmul(&a, &Matrix::zeros(3, 1)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn contract_examples() {
        let e = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let h = Tensor3::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(batched_contract(&e, &h).unwrap().data(), &[1.0, 0.0]);

        let e = Matrix::from_rows(&[[3.0, -1.0], [2.0, 7.0]]).unwrap();
        let r = batched_contract(&e, &Tensor3::zeros(2, 2, 3)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));

        assert!(batched_contract(&e, &Tensor3::zeros(3, 2, 3)).is_err());
        assert!(batched_contract(&e, &Tensor3::zeros(2, 3, 3)).is_err());
    }

    #[test]
    fn contract_matches_triple_loop_b2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = random_matrix(&mut rng, 2, 3);
        let h = Tensor3::new(
            2,
            3,
            4,
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let r = batched_contract(&e, &h).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += e.get(i, k) * h.get(i, k, j);
                }
                assert!((r.get(i, j) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn broadcast_examples() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let one = broadcast_weights(&w, 1).unwrap();
        assert_eq!(one.slice(0), w);
        let three = broadcast_weights(&w, 3).unwrap();
        assert_eq!(three.shape(), (3, 2, 2));
        for i in 0..3 {
            assert_eq!(three.slice(i), w);
        }
        assert!(broadcast_weights(&w, 0).is_err());
    }

    #[test]
    fn gather_examples() {
        let w = Matrix::identity(2);
        let t = replicate_classes(&gather_target_columns(&w, &[0]).unwrap(), 2).unwrap();
        assert_eq!(
            t.slice(0),
            Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap()
        );

        let t = replicate_classes(&gather_target_columns(&w, &[1, 1]).unwrap(), 2).unwrap();
        for i in 0..2 {
            assert_eq!(
                t.slice(i),
                Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap()
            );
        }
        assert!(matches!(
            gather_target_columns(&w, &[2]),
            Err(Error::InvalidLabel {
                label: 2,
                num_classes: 2
            })
        ));
    }

    #[test]
    fn gather_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 4, 3);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let t = replicate_classes(&gather_target_columns(&w, &labels).unwrap(), 3).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            for k in 0..4 {
                for j in 0..3 {
                    assert_eq!(t.get(i, k, j), w.data()[k * 3 + l]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_rows_are_unit_or_zero(
            rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), zero_row in any::<bool>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = random_matrix(&mut rng, rows, cols);
            if zero_row {
                m.row_mut(0).fill(0.0);
            }
            let n = l2_normalize_rows(&m, DEFAULT_EPSILON).unwrap();
            for i in 0..rows {
                let r = norm(n.row(i));
                prop_assert!(r == 0.0 || (r - 1.0).abs() < 1e-12);
            }
            let n = l2_normalize_columns(&m, DEFAULT_EPSILON).unwrap();
            for j in 0..cols {
                let r = norm(&n.column(j));
                prop_assert!(r == 0.0 || (r - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn contract_agrees_with_naive_loop(
            b in 1usize..=8, n in 1usize..=8, c in 1usize..=8, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_matrix(&mut rng, b, n);
            let h = Tensor3::new(b, n, c, (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let r = batched_contract(&e, &h).unwrap();
            for i in 0..b {
                for j in 0..c {
                    let mut s = 0.0;
                    let mut mag = 0.0;
                    for k in 0..n {
                        s += e.get(i, k) * h.get(i, k, j);
                        mag += (e.get(i, k) * h.get(i, k, j)).abs();
                    }
                    prop_assert!((r.get(i, j) - s).abs() <= 1e-12 * mag.max(1e-300));
                }
            }
        }

        #[test]
        fn matmul_identity_is_bitwise(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, cols);
            prop_assert_eq!(matmul(&a, &Matrix::identity(cols)).unwrap(), a);
        }

        #[test]
        fn broadcast_slices_equal_source(b in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_matrix(&mut rng, 3, 4);
            let t = broadcast_weights(&w, b).unwrap();
            let (i, k, j) = (rng.random_range(0..b), rng.random_range(0..3), rng.random_range(0..4));
            prop_assert_eq!(t.get(i, k, j), w.get(k, j));
        }
    }
}
