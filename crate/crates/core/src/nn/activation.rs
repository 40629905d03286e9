use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negative-side slope used throughout the network's conv blocks.
///
/// Written as a slope `y = 0.2 x` for `x < 0`. The divisor form
/// `y = x / alpha` describes the same function with `alpha = 5`.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, negative_slope: T) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            v
        } else {
            v * negative_slope
        }
    })
}

/// Gradient is 1 for `x >= 0` (including exactly 0) and `negative_slope` below.
pub fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    negative_slope: T,
) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v < T::zero() {
            *d *= negative_slope;
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Logistic function. Saturated results are held at the nearest
/// representable values inside the open interval (0, 1).
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    x.map(|v| {
        let s = if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        s.max(lo).min(hi)
    })
}

/// Gradient from the forward output `y`: `dy * y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= s * (T::one() - s);
    }
    dx
}
