//! Small dense linear algebra over `f64`.
//!
//! Vectors are row vectors: the delta recursion multiplies a row vector on the
//! right by a matrix (`v · M`, see [`row_vec_mat`]). [`mat_vec`] is the
//! column-vector product `M · v`, used where a product is written in
//! transposed form.
//!
//! Shape mismatches are programming errors and panic with both shapes in the
//! message, the same way `ndarray` treats them.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {} values do not fill a {}x{} matrix",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "Mat::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(n, m, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Square matrix with `d` on the diagonal.
    pub fn diag(d: &Vector) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.check_same_shape(other, "add");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.check_same_shape(other, "sub");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Mat) {
        self.check_same_shape(x, "axpy");
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    /// `self += outer(a, b)` without allocating the outer product.
    pub fn add_outer(&mut self, a: &Vector, b: &Vector) {
        assert!(
            self.rows == a.len() && self.cols == b.len(),
            "add_outer: {}x{} matrix vs outer of lengths {} and {}",
            self.rows,
            self.cols,
            a.len(),
            b.len()
        );
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b.iter()) {
                *r += ai * bj;
            }
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Mat, op: &str) {
        assert!(
            self.shape() == other.shape(),
            "{op}: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "{:?}", self.row(i))?;
            if i + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        write!(f, "]")
    }
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v[i] = 1.0;
        v
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        self.data.iter().map(|&x| f(x)).collect()
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Vector) -> Vector {
        check_len(self, other, "add");
        self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect()
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        check_len(self, other, "sub");
        self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect()
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        check_len(self, other, "hadamard");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) {
        check_len(self, x, "axpy");
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self {
            data: iter.into_iter().collect(),
        }
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self {
            data: data.to_vec(),
        }
    }
}

impl<'a> IntoIterator for &'a Vector {
    type Item = &'a f64;
    type IntoIter = std::slice::Iter<'a, f64>;

    fn into_iter(self) -> Self::IntoIter {
        self.data.iter()
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.data)
    }
}

fn check_len(a: &Vector, b: &Vector, op: &str) {
    assert!(
        a.len() == b.len(),
        "{op}: length mismatch {} vs {}",
        a.len(),
        b.len()
    );
}

/// Matrix product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert!(
        a.cols == b.rows,
        "matmul: shape mismatch {}x{} · {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = Mat::zeros(a.rows, b.cols);
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
    out
}

/// Row vector times matrix: `v · m`.
pub fn row_vec_mat(v: &Vector, m: &Mat) -> Vector {
    let mut out = Vector::zeros(m.cols);
    row_vec_mat_into(v, m, &mut out);
    out
}

/// `out = v · m`, reusing `out`'s storage.
pub fn row_vec_mat_into(v: &Vector, m: &Mat, out: &mut Vector) {
    assert!(
        v.len() == m.rows,
        "row_vec_mat: vector of length {} · {}x{} matrix",
        v.len(),
        m.rows,
        m.cols
    );
    assert_eq!(out.len(), m.cols, "row_vec_mat: output length");
    out.data.iter_mut().for_each(|x| *x = 0.0);
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, &mij) in out.data.iter_mut().zip(m.row(i)) {
            *o += vi * mij;
        }
    }
}

/// Matrix times column vector: `m · v`.
pub fn mat_vec(m: &Mat, v: &Vector) -> Vector {
    assert!(
        v.len() == m.cols,
        "mat_vec: {}x{} matrix · vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    (0..m.rows)
        .map(|i| m.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// `m · diag(d)`: scales column `j` of `m` by `d[j]`.
pub fn scale_cols_by(m: &Mat, d: &Vector) -> Mat {
    assert!(
        m.cols == d.len(),
        "scale_cols_by: {}x{} matrix vs diagonal of length {}",
        m.rows,
        m.cols,
        d.len()
    );
    let mut out = m.clone();
    for i in 0..m.rows {
        for (x, &dj) in out.data[i * m.cols..(i + 1) * m.cols].iter_mut().zip(d.iter()) {
            *x *= dj;
        }
    }
    out
}

pub fn dot(a: &Vector, b: &Vector) -> f64 {
    assert!(
        a.len() == b.len(),
        "dot: length mismatch {} vs {}",
        a.len(),
        b.len()
    );
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(v: &Vector) -> f64 {
    dot(v, v).sqrt()
}

/// Outer product `aᵀ b`, shape `a.len() x b.len()`.
pub fn outer(a: &Vector, b: &Vector) -> Mat {
    let mut m = Mat::zeros(a.len(), b.len());
    m.add_outer(a, b);
    m
}
