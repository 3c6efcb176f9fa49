//! Dense tensor arithmetic and hand-differentiated building blocks.
//!
//! Every layer in the crate is generic over [`Scalar`] so the same code runs
//! in `f32` for training and in `f64` for finite-difference gradient checks.

mod adam;
mod layer_norm;
mod linear;
mod loss;
mod rng;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{adam_step, adam_update_slice, AdamParams, AdamState};
pub use layer_norm::{layer_norm, LayerNorm, LayerNormCache, LAYER_NORM_EPS};
pub use linear::Linear;
pub use loss::softmax_cross_entropy;
pub use rng::{derive_seed, rng_from_seed, splitmix64, Rng};
pub use tensor::{check_finite, Tensor};

use crate::error::{Error, Result};

/// Floating-point element type usable by all layers.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn c(v: f64) -> Self;

    /// `tanh`, possibly via a cheaper approximation accurate to the type's precision.
    fn tanh_approx(self) -> Self {
        self.tanh()
    }

    /// `c = beta * c + a * b` on raw strided buffers.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of the three pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Scalar for f32 {
    fn c(v: f64) -> Self {
        v as f32
    }

    /// Branch-free 13/6 rational approximation, within a few ulp of `tanh`.
    fn tanh_approx(self) -> Self {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_671_5e-11,
            2.000_187_9e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        let x = self.max(-CLAMP).min(CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        let mut q = B[3];
        for &b in B[..3].iter().rev() {
            q = q * x2 + b;
        }
        x * p / q
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `c[m×n] = beta·c + op(a)·op(b)`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n` (or
/// `n×k` when `trans_b`). With `beta == 0` the previous contents of `c` are
/// ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above against the strides chosen here.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of a `[m×n]` and a `[n×p]` tensor.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(false, false, m, k, n, a.data(), b.data(), T::zero(), out.data_mut());
    Ok(out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh_approx())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh_approx();
    let dinner = k * (T::one() + T::c(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
