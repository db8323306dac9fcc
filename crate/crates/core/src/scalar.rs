//! Floating-point element types the whole crate is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Runtime tag for the element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("float32"),
            DType::F64 => f.write_str("float64"),
        }
    }
}

/// A real scalar usable as a tensor element.
///
/// Besides the usual float arithmetic this carries a dense matrix-multiply
/// entry point so kernels stay generic while dispatching to the
/// type-specific GEMM.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`, used for constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every addressed element was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operand() {
        // a = [[1,2],[3,4]] read as its transpose through swapped strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn dtype_tags() {
        assert_eq!(f32::DTYPE.to_string(), "float32");
        assert_eq!(<f64 as Scalar>::DTYPE, DType::F64);
    }
}
