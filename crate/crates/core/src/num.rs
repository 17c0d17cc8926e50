//! Scalar abstraction and the dense matrix kernels used by the model.
//!
//! Everything numeric is generic over [`Float`] so the same network runs in
//! 32-bit for training and in 64-bit for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw strided GEMM: `C = alpha * A·B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must address valid memory for the given shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Float for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Row-major `[rows, cols]` matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = View {
            data,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(view.fits(data.len()), "matrix view out of bounds");
        view
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// `C[rows, cols] (strided) = alpha * A·B + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    alpha: F,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: &mut [F],
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let out = View {
        data: &*c,
        rows: m,
        cols: n,
        rs: rsc,
        cs: csc,
    };
    assert!(out.fits(c.len()), "output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Row-major `c[m,n] (+)= a[m,k] · b[k,n]` with optional transposes of the
/// stored operands.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Float>(
    c: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let av = if trans_a {
        View::new(a, k, m).t()
    } else {
        View::new(a, m, k)
    };
    let bv = if trans_b {
        View::new(b, n, k).t()
    } else {
        View::new(b, k, n)
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    gemm(F::one(), av, bv, beta, c, n, 1);
}

/// Numerically stable log-softmax of one row, scaled by `1 / temperature`.
pub fn log_softmax<F: Float>(row: &[F], temperature: F, out: &mut [F]) {
    let inv_t = F::one() / temperature;
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x * inv_t));
    let sum: F = row.iter().map(|&x| (x * inv_t - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x * inv_t - log_z;
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of a distribution given by its log-probabilities.
pub fn entropy_from_log_probs<F: Float>(log_probs: &[F]) -> F {
    let mut h = F::zero();
    for &lp in log_probs {
        let p = lp.exp();
        if p > F::zero() {
            h -= p * lp;
        }
    }
    h
}
