//! Dense row-major arrays generic over the working precision.
//!
//! Training runs in `f32`; gradient verification runs the same code in `f64`.
//! [`Scalar`] is the closed set of element types; it also routes matrix
//! multiplication to the tuned `matrixmultiply` kernels per type.

use crate::error::{Error, Result};

/// Element type of all model arrays. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// c = alpha * a @ b + beta * c, row-major with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }

            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Logistic sigmoid, numerically stable on both tails.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// softplus(x) = ln(1 + e^x), computed as max(x, 0) + ln(1 + e^-|x|).
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::ZERO) + (F::ONE + (-x.abs()).exp()).ln()
}

/// Row-major dense array. Rank-2 throughout the model code; scalars are 1x1
/// and vectors 1xN.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

pub type Mat<F> = DenseArray<F>;

impl<F: Scalar> DenseArray<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseArray { rows, cols, data: vec![F::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "array data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseArray { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseArray { rows, cols, data }
    }

    pub fn scalar(v: F) -> Self {
        DenseArray { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row_vec(data: Vec<F>) -> Self {
        DenseArray { rows: 1, cols: data.len(), data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// The single element of a 1x1 array.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        DenseArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// out = self @ other.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} @ {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = DenseArray::zeros(self.rows, other.cols);
        unsafe {
            F::gemm(
                self.rows,
                self.cols,
                other.cols,
                F::ONE,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                F::ZERO,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    /// out += a @ b with optional transposes; used by backward passes.
    pub fn gemm_acc(&mut self, a: &Self, trans_a: bool, b: &Self, trans_b: bool) {
        let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, kb, "gemm_acc inner dim mismatch");
        assert_eq!((self.rows, self.cols), (m, n), "gemm_acc output shape mismatch");
        let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::ONE,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                F::ONE,
                self.data.as_mut_ptr(),
                self.cols as isize,
                1,
            );
        }
    }

    /// Convert element type (used at the feature/checkpoint boundary).
    pub fn cast<G: Scalar>(&self) -> DenseArray<G> {
        DenseArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }
}

impl DenseArray<f32> {
    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend(row.iter().map(|&x| x as f32));
        }
        DenseArray { rows: r, cols: c, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = DenseArray::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = DenseArray::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_acc_transposes() {
        let a = DenseArray::from_fn(4, 3, |r, c| (r + 2 * c) as f64);
        let b = DenseArray::from_fn(4, 2, |r, c| (r as f64) - (c as f64) * 3.0);
        let mut out = DenseArray::zeros(3, 2);
        out.gemm_acc(&a, true, &b, false);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(k, i) * b.at(k, j);
                }
                assert!((out.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_softplus_reference_points() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!((softplus(0.0f64) - 2.0f64.ln()).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!((softplus(40.0f64) - 40.0).abs() < 1e-12);
    }
}
