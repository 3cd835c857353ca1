//! Dense row-major `f64` matrices with the handful of operations the heads
//! need. Every reduction accumulates in ascending index order so results are
//! bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `f64` strictly below 1.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh` that never rounds to ±1: for `|x|` above ~19.06 plain `f64::tanh`
/// returns exactly ±1, here it returns ±[`BELOW_ONE`], within one ulp of the
/// true value.
pub fn bounded_tanh(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self × other`; entry (i, j) sums `self[i,t]·other[t,j]` over ascending `t`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.cols {
                let mut acc = 0.0;
                for (t, &a) in a_row.iter().enumerate() {
                    acc += a * other.data[t * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for (a, b) in self.row(i).iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }

    /// `selfᵀ · y` for a column vector `y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.rows != y.len() {
            return Err(Error::Shape {
                op: "matvec_transposed",
                left: self.shape(),
                right: (y.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Ok(out)
    }

    /// Elementwise `tanh`, kept inside the open interval `(-1, 1)`.
    pub fn tanh_elementwise(&self) -> Matrix {
        self.map(bounded_tanh)
    }

    pub fn masked_row_mean(&self, mask: &[bool]) -> Result<Vec<f64>> {
        let count = self.check_mask(mask)?;
        let mut out = vec![0.0; self.cols];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let k = count as f64;
        out.iter_mut().for_each(|o| *o /= k);
        Ok(out)
    }

    /// Population variance of each column over the masked rows, averaged
    /// over columns.
    pub fn masked_row_variance(&self, mask: &[bool]) -> Result<f64> {
        let count = self.check_mask(mask)?;
        let mean = self.masked_row_mean(mask)?;
        let mut col_acc = vec![0.0; self.cols];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for ((acc, &v), &mu) in col_acc.iter_mut().zip(self.row(r)).zip(&mean) {
                let dev = v - mu;
                *acc += dev * dev;
            }
        }
        let k = count as f64;
        let mut total = 0.0;
        for acc in &col_acc {
            total += acc / k;
        }
        Ok(total / self.cols as f64)
    }

    pub(crate) fn check_mask(&self, mask: &[bool]) -> Result<usize> {
        if mask.len() != self.rows {
            return Err(Error::Shape {
                op: "mask",
                left: self.shape(),
                right: (mask.len(), 1),
            });
        }
        match mask.iter().filter(|&&m| m).count() {
            0 => Err(Error::EmptyMask),
            n => Ok(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_times_m() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_multiplication() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn zero_annihilates() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let z = Matrix::zeros(3, 2);
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(a.matmul(&b).unwrap_err().to_string().contains("(2, 3)"));
    }

    #[test]
    fn tanh_values() {
        let m = Matrix::from_rows(&[[0.0, 1.0, -1.0]]).tanh_elementwise();
        assert_eq!(m.get(0, 0), 0.0);
        assert!((m.get(0, 1) - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert_eq!(m.get(0, 2), -m.get(0, 1));
        assert_eq!(bounded_tanh(40.0), BELOW_ONE);
        assert_eq!(bounded_tanh(f64::MAX), BELOW_ONE);
        assert_eq!(bounded_tanh(-40.0), -BELOW_ONE);
        assert_eq!(BELOW_ONE.next_up(), 1.0);
    }

    #[test]
    fn row_mean_cases() {
        let same = Matrix::from_rows(&[[2.0, -1.0], [2.0, -1.0]]);
        assert_eq!(same.masked_row_mean(&[true, true]).unwrap(), vec![2.0, -1.0]);
        let m = Matrix::from_rows(&[[1.0, 3.0], [3.0, 5.0]]);
        assert_eq!(m.masked_row_mean(&[true, true]).unwrap(), vec![2.0, 4.0]);
        let m = Matrix::from_rows(&[[1.0, 1.0], [9.0, 9.0]]);
        assert_eq!(m.masked_row_mean(&[true, false]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_mask_rejected() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(m.masked_row_mean(&[false, false]), Err(Error::EmptyMask)));
        assert!(matches!(m.masked_row_variance(&[false, false]), Err(Error::EmptyMask)));
        assert!(matches!(m.masked_row_mean(&[true]), Err(Error::Shape { .. })));
    }

    #[test]
    fn variance_cases() {
        let same = Matrix::from_rows(&[[0.3, 0.1], [0.3, 0.1], [0.3, 0.1]]);
        assert!(same.masked_row_variance(&[true; 3]).unwrap() < 1e-12);
        let m = Matrix::from_rows(&[[0.0], [2.0]]);
        assert_eq!(m.masked_row_variance(&[true, true]).unwrap(), 1.0);
        // masked-out row does not contribute
        let m = Matrix::from_rows(&[[0.0], [2.0], [100.0]]);
        assert_eq!(m.masked_row_variance(&[true, true, false]).unwrap(), 1.0);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 3)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((l - r).abs() <= 1e-9);
            }
        }

        #[test]
        fn tanh_strictly_bounded(a in prop::collection::vec(-1e6f64..1e6, 1..32)) {
            let n = a.len();
            let m = Matrix::from_vec(1, n, a).unwrap().tanh_elementwise();
            prop_assert!(m.as_slice().iter().all(|v| v.abs() < 1.0));
        }

        #[test]
        fn tanh_exact_below_saturation(x in -15.0f64..15.0) {
            prop_assert_eq!(bounded_tanh(x), x.tanh());
            prop_assert_eq!(bounded_tanh(-x), -bounded_tanh(x));
        }

        #[test]
        fn variance_nonnegative_and_scales(a in matrix(5, 3), mask in prop::collection::vec(any::<bool>(), 5)) {
            prop_assume!(mask.iter().any(|&m| m));
            let v = a.masked_row_variance(&mask).unwrap();
            prop_assert!(v >= 0.0);
            let v2 = a.map(|x| 2.0 * x).masked_row_variance(&mask).unwrap();
            prop_assert!((v2 - 4.0 * v).abs() <= 1e-12 * (1.0 + v2.abs()));
        }

        #[test]
        fn deterministic(a in matrix(4, 4), b in matrix(4, 3)) {
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert_eq!(
                x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn variance_zero_iff_identical_rows() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0 + 1e-3]]);
        assert!(m.masked_row_variance(&[true, true]).unwrap() > 1e-12);
        assert_eq!(m.masked_row_variance(&[true, false]).unwrap(), 0.0);
    }
}
