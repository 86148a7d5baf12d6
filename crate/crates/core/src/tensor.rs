//! Dense row-major `f64` matrices and the seeded generator used everywhere else.
//!
//! Matrices are plain values: every operation returns a new matrix except the
//! explicitly in-place accumulators (`axpy`, `scale_in_place`, [`gemm`]) that the
//! optimizer and the backward pass rely on.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Shape as printed in dimension errors.
fn shape(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Square,
}

/// Logistic function, evaluated so that neither branch overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Square => x * x,
        }
    }
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix, the storage used for bias vectors.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(op, shape(self), shape(other)))
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", shape(self), shape(other)));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, out.view_mut());
        Ok(out)
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(
                "matvec",
                shape(self),
                format!("vector of {}", v.len()),
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v` for a vector `v` of length `rows`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim(
                "matvec_transposed",
                shape(self),
                format!("vector of {}", v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            if s != 0.0 {
                axpy_slice(s, self.row(r), &mut out);
            }
        }
        Ok(out)
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

    pub fn zip_with(&self, op: BinaryOp, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "elementwise")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn apply(&self, op: UnaryOp) -> Matrix {
        self.map(|x| op.apply(x))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(BinaryOp::Sub, other)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(BinaryOp::Mul, other)
    }

    /// Adds a `1 × cols` bias row to every row.
    pub fn add_row_vector(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dim("add_row_vector", shape(self), shape(bias)));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        axpy_slice(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            row_stride: self.cols,
            col_stride: 1,
        }
    }

    pub fn view_mut(&mut self) -> MatMut<'_> {
        MatMut {
            rows: self.rows,
            cols: self.cols,
            row_stride: self.cols,
            data: &mut self.data,
        }
    }

    /// Leading `ncols` columns as a strided view.
    pub fn leading_cols(&self, ncols: usize) -> MatRef<'_> {
        assert!(ncols <= self.cols);
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: ncols,
            row_stride: self.cols,
            col_stride: 1,
        }
    }
}

/// Borrowed strided matrix. `t()` swaps strides to give a transposed view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// Mutable row-major view that may skip trailing columns of a wider buffer.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn leading_cols(data: &'a mut [f64], rows: usize, row_stride: usize, cols: usize) -> Self {
        assert!(cols <= row_stride && data.len() >= rows * row_stride);
        MatMut {
            data,
            rows,
            cols,
            row_stride,
        }
    }
}

/// `c ← alpha · a · b + beta · c`.
///
/// Shapes are checked with panics; callers validate user-facing shapes first.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for x in &mut c.data[r * c.row_stride..r * c.row_stride + n] {
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len());
    assert!(b.max_index() < b.data.len());
    assert!((m - 1) * c.row_stride + (n - 1) < c.data.len());
    // SAFETY: every index reachable through the given strides was bounds-checked
    // above and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        );
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha · x`.
#[inline]
pub fn axpy_slice(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Seeded pseudo-random generator: xoshiro256++ seeded through SplitMix64.
///
/// Floats use the upper 53 bits of a draw; bounded integers and shuffles follow
/// `rand` 0.8's value-stable algorithms, so a seed reproduces a run exactly.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Independent child generator, seeded from the next draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::EmptyDomain("uniform requires finite lo < hi"));
        }
        Ok(lo + (hi - lo) * self.unit())
    }

    /// Uniform index in `0..n`.
    pub fn choice(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::EmptyDomain("choice over zero items"));
        }
        Ok(self.inner.gen_range(0..n))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::EmptyDomain("more distinct draws than items"));
        }
        // Partial Fisher-Yates.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.choice(n - i)?;
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_and_strided_views() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 6, 9);
        let b = random_matrix(&mut rng, 6, 4);
        // aᵀ · b through a transposed view.
        let mut out = Matrix::zeros(9, 4);
        gemm(1.0, a.view().t(), b.view(), 0.0, out.view_mut());
        let slow = naive_matmul(&a.transpose(), &b);
        for (x, y) in out.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Leading columns only.
        let w = random_matrix(&mut rng, 5, 9);
        let x = random_matrix(&mut rng, 3, 7);
        let mut proj = Matrix::zeros(3, 5);
        gemm(1.0, x.view(), w.leading_cols(7).t(), 0.0, proj.view_mut());
        for t in 0..3 {
            for g in 0..5 {
                let s: f64 = (0..7).map(|p| x.get(t, p) * w.get(g, p)).sum();
                assert!((proj.get(t, g) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matvec_variants_agree_with_matmul() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 7, 13);
        let v: Vec<f64> = (0..13).map(|_| rng.unit()).collect();
        let col = Matrix::from_vec(13, 1, v.clone()).unwrap();
        let expect = naive_matmul(&a, &col);
        for (x, y) in a.matvec(&v).unwrap().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let u: Vec<f64> = (0..7).map(|_| rng.unit()).collect();
        let expect = naive_matmul(&a.transpose(), &Matrix::from_vec(7, 1, u.clone()).unwrap());
        for (x, y) in a.matvec_transposed(&u).unwrap().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_and_tanh_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(UnaryOp::Tanh.apply(0.0), 0.0);
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let x = rng.uniform(-50.0, 50.0).unwrap();
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturating_inputs_stay_finite() {
        let m = Matrix::from_rows(&[vec![-50.0, 50.0, -1e300, 1e300]]).unwrap();
        for op in [UnaryOp::Sigmoid, UnaryOp::Tanh] {
            assert!(m.apply(op).is_finite());
        }
        assert!(Matrix::row_vector(&[-50.0, 50.0]).apply(UnaryOp::Square).is_finite());
    }

    #[test]
    fn binary_ops_and_bias_rows() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[6.0, 8.0, 10.0, 12.0]);
        assert_eq!(b.sub(&a).unwrap().data(), &[4.0; 4]);
        assert_eq!(a.hadamard(&b).unwrap().data(), &[5.0, 12.0, 21.0, 32.0]);
        assert!(a.add(&Matrix::zeros(1, 2)).is_err());
        let biased = a.add_row_vector(&Matrix::row_vector(&[10.0, 20.0])).unwrap();
        assert_eq!(biased.data(), &[11.0, 22.0, 13.0, 24.0]);
        let mut acc = a.clone();
        acc.axpy(2.0, &b).unwrap();
        assert_eq!(acc.data(), &[11.0, 14.0, 17.0, 20.0]);
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let pa = (a.uniform(0.0, 1.0).unwrap(), a.uniform(0.0, 1.0).unwrap());
        let pb = (b.uniform(0.0, 1.0).unwrap(), b.uniform(0.0, 1.0).unwrap());
        assert_eq!(pa.0.to_bits(), pb.0.to_bits());
        assert_eq!(pa.1.to_bits(), pb.1.to_bits());
    }

    #[test]
    fn rng_domain_errors() {
        let mut rng = Rng::new(1);
        assert_eq!(rng.choice(1).unwrap(), 0);
        assert!(matches!(rng.choice(0), Err(Error::EmptyDomain(_))));
        assert!(rng.uniform(1.0, 1.0).is_err());
        assert!(rng.sample_distinct(3, 4).is_err());
    }

    #[test]
    fn choice_passes_chi_square() {
        // 99% critical value of chi-square with 9 degrees of freedom.
        const CRITICAL: f64 = 21.666;
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[rng.choice(10).unwrap()] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < CRITICAL, "chi2 = {chi2}");
    }

    #[test]
    fn shuffle_positions_are_uniform() {
        let mut rng = Rng::new(99);
        let trials = 100_000;
        let n = 5;
        let mut counts = vec![[0usize; 5]; n];
        for _ in 0..trials {
            let mut v: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut v);
            let mut sorted = v.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            for (pos, &item) in v.iter().enumerate() {
                counts[item][pos] += 1;
            }
        }
        let p = 1.0 / n as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for row in &counts {
            for &c in row {
                assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sigma + 1.0);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::tensor::Rng;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5) {
                let mut rng = Rng::new(seed);
                let a = random_matrix(&mut rng, m, k);
                let b = random_matrix(&mut rng, k, l);
                let c = random_matrix(&mut rng, l, n);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
                }
            }

            #[test]
            fn activations_stay_finite(x in -50.0f64..50.0) {
                let s = sigmoid(x);
                prop_assert!(s.is_finite() && (0.0..=1.0).contains(&s));
                prop_assert!(x.tanh().is_finite());
            }

            #[test]
            fn dot_matches_naive(seed in any::<u64>(), n in 0usize..40) {
                let mut rng = Rng::new(seed);
                let a: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
                let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                prop_assert!((dot(&a, &b) - naive).abs() < 1e-12);
            }
        }
    }
}
