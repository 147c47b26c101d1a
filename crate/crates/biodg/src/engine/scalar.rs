//! Scalar abstraction over `f32` and `f64`.
//!
//! The whole engine is generic over [`Scalar`] so the same layer code
//! trains in `f32` (fast) and runs finite-difference gradient checks in
//! `f64` (where a 1e-4 relative tolerance is meaningful). The only
//! per-type specialization is the GEMM kernel dispatch.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    num_traits::Float
    + num_traits::NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)`, row-major via
    /// explicit strides so transposed views need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 -> scalar cast")
    }

    fn to_f64_(self) -> f64 {
        num_traits::cast(self).expect("scalar -> f64 cast")
    }

    fn from_f32_(v: f32) -> Self {
        num_traits::cast(v).expect("f32 -> scalar cast")
    }

    fn to_f32_(self) -> f32 {
        num_traits::cast::<Self, f64>(self).expect("scalar -> f64 cast") as f32
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // Strides validated above; matrixmultiply's contract is
                // otherwise identical to this function's.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

/// Number of elements a (rows x cols) view with the given strides spans.
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    debug_assert!(last >= 0, "negative strides unsupported");
    last as usize + 1
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.11 + 1.0).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(
            m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1,
        );
        let want = matmul_naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_view() {
        // c = a * b^T using strides, against naive on materialized b^T.
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect(); // stored (n x k)
        let mut c = vec![0.0; m * n];
        f64::gemm(
            m, k, n, 1.0, &a, k as isize, 1, &bt, 1, k as isize, 0.0, &mut c, n as isize, 1,
        );
        let mut b = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                b[j * n + i] = bt[i * k + j];
            }
        }
        let want = matmul_naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
