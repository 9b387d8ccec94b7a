use std::fmt::Debug;
use std::iter::Sum;

/// Scalar type the network engine runs in. Training uses `f32`; gradient
/// checks run the same graph in `f64`.
pub trait Float:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column matrices.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
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

    fn from_f64v(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64")
    }

    fn to_f64v(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix view over a slice, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out` with `out` row-major `m x n`.
pub(crate) fn gemm<T: Float>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the dimension checks above bound every access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v * 2) as f64 - 3.0).collect(); // 3x2
        let mut out = vec![0.0; 4];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2), 0.0, &mut out);
        let naive = |i: usize, j: usize| (0..3).map(|p| a[i * 3 + p] * b[p * 2 + j]).sum::<f64>();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out[i * 2 + j], naive(i, j));
            }
        }
        // (b^T a^T) = (a b)^T
        let mut out_t = vec![0.0; 4];
        gemm(Mat::new(&b, 3, 2).t(), Mat::new(&a, 2, 3).t(), 0.0, &mut out_t);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out_t[j * 2 + i], naive(i, j));
            }
        }
    }
}
