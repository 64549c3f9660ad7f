//! Dense row-major matrices, just enough linear algebra for the model.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = S::zero());
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    /// `self += other - base`, elementwise.
    pub fn add_difference(&mut self, other: &Mat<S>, base: &Mat<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        debug_assert_eq!(self.shape(), base.shape());
        for ((a, &o), &b) in self.data.iter_mut().zip(&other.data).zip(&base.data) {
            *a += o - b;
        }
    }

    pub fn add_scaled(&mut self, other: &Mat<S>, scale: S) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn difference(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
        debug_assert_eq!(a.shape(), b.shape());
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect();
        Mat { rows: a.rows, cols: a.cols, data }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat<S>) -> S {
        debug_assert_eq!(self.shape(), other.shape());
        let mut acc = S::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, other.cols);
        out.matmul_acc(self, other);
        out
    }

    /// `self += a · b`.
    pub fn matmul_acc(&mut self, a: &Mat<S>, b: &Mat<S>) {
        assert_eq!(a.cols, b.rows, "matmul inner dimension");
        assert_eq!((self.rows, self.cols), (a.rows, b.cols), "matmul output shape");
        let n = b.cols;
        for i in 0..a.rows {
            let out = &mut self.data[i * n..(i + 1) * n];
            for (k, &aik) in a.row(i).iter().enumerate() {
                if aik == S::zero() {
                    continue;
                }
                for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
                    *o += aik * bkj;
                }
            }
        }
    }

    /// `self += aᵀ · b`.
    pub fn matmul_tn_acc(&mut self, a: &Mat<S>, b: &Mat<S>) {
        assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
        assert_eq!((self.rows, self.cols), (a.cols, b.cols), "matmul_tn output shape");
        let n = b.cols;
        for k in 0..a.rows {
            let brow = b.row(k);
            for (i, &aki) in a.row(k).iter().enumerate() {
                if aki == S::zero() {
                    continue;
                }
                let out = &mut self.data[i * n..(i + 1) * n];
                for (o, &bkj) in out.iter_mut().zip(brow) {
                    *o += aki * bkj;
                }
            }
        }
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
        assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            let arow = a.row(i);
            for j in 0..b.rows {
                let mut acc = S::zero();
                for (&x, &y) in arow.iter().zip(b.row(j)) {
                    acc += x * y;
                }
                out.data[i * b.rows + j] = acc;
            }
        }
        out
    }
}
