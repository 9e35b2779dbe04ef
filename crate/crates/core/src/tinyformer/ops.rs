//! Dense kernels shared by the training and cached-inference paths.
//!
//! Both paths call exactly these functions in exactly the same order for a
//! given position, which is what makes cache-resumed decoding bit-identical
//! to a full forward pass. Do not add alternative fast paths for one side only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `out = x · W` with `W` row-major `[x.len() × out.len()]`.
#[inline]
pub fn vec_mat<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(T::zero());
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        let xi = *xi;
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + xi * wv;
        }
    }
}

/// Backward of [`vec_mat`]: accumulates `dx += dout · Wᵀ` and `dW += xᵀ · dout`.
#[inline]
pub fn vec_mat_backward<T: Scalar>(x: &[T], w: &[T], dout: &[T], dx: &mut [T], dw: &mut [T]) {
    let n = dout.len();
    for (i, (row, drow)) in w.chunks_exact(n).zip(dw.chunks_exact_mut(n)).enumerate() {
        let xi = x[i];
        let mut acc = T::zero();
        for ((&wv, dwv), &g) in row.iter().zip(drow.iter_mut()).zip(dout) {
            acc = acc + wv * g;
            *dwv = *dwv + xi * g;
        }
        dx[i] = dx[i] + acc;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
pub fn add_assign<T: Scalar>(y: &mut [T], x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + xv;
    }
}

/// In-place numerically stable softmax.
#[inline]
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x = *x * inv;
    }
}

/// `log Σ exp(v)` computed stably.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in v {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
