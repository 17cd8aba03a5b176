//! Floating-point element types the autodiff engine runs on.
//!
//! Tests and gradient checks run at `f64`; training runs at `f32`.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Layout of one operand handed to [`Scalar::gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Row-major, as stored.
    Normal,
    /// Row-major storage read as its transpose.
    Transposed,
}

/// Strided view of a logical `rows x cols` matrix inside a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn with_layout(rows: usize, cols: usize, layout: Layout) -> Self {
        match layout {
            Layout::Normal => View::row_major(cols),
            Layout::Transposed => View {
                offset: 0,
                row_stride: 1,
                col_stride: rows,
            },
        }
    }

    pub fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(self, rows: usize, cols: usize, len: usize, what: &str) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < len, "gemm: {what} view out of bounds");
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Checkpoint/file tag for this element type.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided views, `a` is `m x k` and
    /// `b` is `k x n`. When `beta` is zero `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        av: View,
        b: &[Self],
        bv: View,
        beta: Self,
        c: &mut [Self],
        cv: View,
    );

    /// Dense row-major convenience wrapper around [`Scalar::gemm_view`].
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_layout: Layout,
        b: &[Self],
        b_layout: Layout,
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_view(
            m,
            k,
            n,
            alpha,
            a,
            View::with_layout(m, k, a_layout),
            b,
            View::with_layout(k, n, b_layout),
            beta,
            c,
            View::row_major(n),
        )
    }

    fn from_f64_lossy(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn erf(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:ident, $erf:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                av: View,
                b: &[Self],
                bv: View,
                beta: Self,
                c: &mut [Self],
                cv: View,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                av.check(m, k, a.len(), "lhs");
                bv.check(k, n, b.len(), "rhs");
                cv.check(m, n, c.len(), "output");
                // SAFETY: every element the kernel touches lies inside the
                // slices, as checked above for the given dims and strides.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr().add(av.offset),
                        av.row_stride as isize,
                        av.col_stride as isize,
                        b.as_ptr().add(bv.offset),
                        bv.row_stride as isize,
                        bv.col_stride as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.row_stride as isize,
                        cv.col_stride as isize,
                    );
                }
            }

            fn from_f64_lossy(x: f64) -> Self {
                x as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_scalar!(f32, "f32", sgemm, libm::erff);
impl_scalar!(f64, "f64", dgemm, libm::erf);

/// Shorthand for literal constants inside generic code.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}
