//! Scalar abstraction for the numeric core.
//!
//! All field math (tensors, autodiff, losses, metrics) is generic over
//! [`Scalar`] so the same kernels run in f32 or f64. The shipped pipelines use
//! the f64 aliases exported from the crate root; f32 exists for cheap
//! instantiation tests and for callers that want the smaller footprint.

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from f64 config constants. Infallible for f32/f64.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// General matrix multiply on row-major slices with explicit strides:
    /// `C <- alpha * A(m x k) * B(k x n) + beta * C(m x n)`.
    ///
    /// Strides are in elements; a row-major `m x k` matrix has `rs = k`,
    /// `cs = 1`. Backed by runtime-dispatched SIMD kernels for f32/f64.
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
}

impl Scalar for f32 {
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
    ) {
        debug_assert!(gemm_bounds_ok(m, k, a.len(), rsa, csa));
        debug_assert!(gemm_bounds_ok(k, n, b.len(), rsb, csb));
        debug_assert!(gemm_bounds_ok(m, n, c.len(), rsc, csc));
        unsafe {
            matrixmultiply::sgemm(
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

impl Scalar for f64 {
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
    ) {
        debug_assert!(gemm_bounds_ok(m, k, a.len(), rsa, csa));
        debug_assert!(gemm_bounds_ok(k, n, b.len(), rsb, csb));
        debug_assert!(gemm_bounds_ok(m, n, c.len(), rsc, csc));
        unsafe {
            matrixmultiply::dgemm(
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

/// Largest reachable index must stay inside the slice.
fn gemm_bounds_ok(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    last >= 0 && (last as usize) < len
}
