use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LsiError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LsiError::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; panics on ragged input (test and literal use).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn diag(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &x) in v.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LsiError::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `diag(v) · self`: row `i` multiplied by `v[i]`.
    pub fn scale_rows(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.rows {
            return Err(LsiError::Shape(format!(
                "row scale of length {} for {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for (r, &s) in v.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        Ok(out)
    }

    /// `self · diag(v)`: column `j` multiplied by `v[j]`.
    pub fn scale_cols(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(LsiError::Shape(format!(
                "column scale of length {} for {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &s) in out.row_mut(r).iter_mut().zip(v) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// Column `j` divided by `v[j]`.
    pub fn div_cols(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(LsiError::Shape(format!(
                "column divisor of length {} for {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &s) in out.row_mut(r).iter_mut().zip(v) {
                *x /= s;
            }
        }
        Ok(out)
    }

    /// Add `v` to every row.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(LsiError::Shape(format!(
                "row vector of length {} for {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Copy of the block starting at `(r0, c0)` with the given size.
    pub fn slice(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Matrix> {
        if r0 + nr > self.rows || c0 + nc > self.cols {
            return Err(LsiError::Shape(format!(
                "slice [{r0}..{}, {c0}..{}] out of {}x{}",
                r0 + nr,
                c0 + nc,
                self.rows,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(nr * nc);
        for r in r0..r0 + nr {
            data.extend_from_slice(&self.row(r)[c0..c0 + nc]);
        }
        Ok(Matrix {
            rows: nr,
            cols: nc,
            data,
        })
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(LsiError::Shape("concat_cols: row counts differ".into()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(LsiError::Shape("concat_rows: column counts differ".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Column sums as a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Row-vector times matrix: `v · self`.
    pub fn vec_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LsiError::Shape(format!(
                "vector of length {} times {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += x * w;
            }
        }
        Ok(out)
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LsiError::Shape(format!(
            "matmul: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LsiError::Shape(format!(
            "matmul_tn: ({}x{})ᵀ · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LsiError::Shape(format!(
            "matmul_nt: {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Mean of squared elementwise differences.
pub fn frobenius_mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(LsiError::Shape(format!(
            "frobenius_mse: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::RandomStream;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            s
        })
    }

    #[test]
    fn identity_product() {
        let mut rng = RandomStream::new(3);
        let m = rng.uniform_matrix(3, 3, -1.0, 1.0);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn two_by_two() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![2.0], vec![4.0]]));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = RandomStream::new(11);
        let a = rng.uniform_matrix(5, 4, -1.0, 1.0);
        let b = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap();
        assert!(diff < 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&naive(&a, &b)).unwrap() < 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(LsiError::Shape(_))));
        assert!(matches!(
            frobenius_mse(&a, &Matrix::zeros(3, 2)),
            Err(LsiError::Shape(_))
        ));
    }

    #[test]
    fn mse_cases() {
        let mut rng = RandomStream::new(5);
        let m = rng.uniform_matrix(4, 4, -2.0, 2.0);
        assert_eq!(frobenius_mse(&m, &m).unwrap(), 0.0);
        let one = Matrix::from_rows(&[vec![1.0]]);
        let three = Matrix::from_rows(&[vec![3.0]]);
        assert_eq!(frobenius_mse(&one, &three).unwrap(), 4.0);

        let n = rng.uniform_matrix(4, 4, -2.0, 2.0);
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let d = m.get(i, j) - n.get(i, j);
                acc += d * d;
            }
        }
        assert!((frobenius_mse(&m, &n).unwrap() - acc / 16.0).abs() < 1e-12);
    }

    #[test]
    fn associativity() {
        let mut rng = RandomStream::new(8);
        for _ in 0..20 {
            let a = rng.uniform_matrix(7, 5, -1.0, 1.0);
            let b = rng.uniform_matrix(5, 6, -1.0, 1.0);
            let c = rng.uniform_matrix(6, 4, -1.0, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn slice_and_concat() {
        let m = Matrix::from_fn(4, 5, |r, c| (r * 10 + c) as f64);
        let left = m.slice(0, 4, 0, 2).unwrap();
        let right = m.slice(0, 4, 2, 3).unwrap();
        assert_eq!(Matrix::concat_cols(&[&left, &right]).unwrap(), m);
        let top = m.slice(0, 1, 0, 5).unwrap();
        let rest = m.slice(1, 3, 0, 5).unwrap();
        assert_eq!(Matrix::concat_rows(&[&top, &rest]).unwrap(), m);
        assert!(m.slice(3, 2, 0, 1).is_err());
    }
}
