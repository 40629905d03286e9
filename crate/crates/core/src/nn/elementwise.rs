//! Elementwise arithmetic, reductions, channel concatenation and the MSE loss.
//!
//! Reductions accumulate sequentially in row-major order in `f64`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    a.ensure_same_shape(b, op)?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, v);
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    a.map(|v| v * k)
}

/// Sums over the channel axis: `(n, c, h, w) -> (n, 1, h, w)`.
pub fn sum_channels<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let p = s.plane();
    let os = s.with_c(1);
    let mut acc = vec![0.0f64; os.numel()];
    for n in 0..s.n {
        for plane in a.sample(n).chunks_exact(p) {
            for (d, v) in acc[n * p..(n + 1) * p].iter_mut().zip(plane) {
                *d += v.as_f64();
            }
        }
    }
    Tensor::from_fn(os, |i| T::lit(acc[i]))
}

/// Broadcasts a `(n, 1, h, w)` gradient back over `c` channels.
pub fn sum_channels_backward<T: Scalar>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let p = input.plane();
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        let g = dy.sample(n);
        let base = n * input.sample();
        for c in 0..input.c {
            dx.data_mut()[base + c * p..base + (c + 1) * p].copy_from_slice(g);
        }
    }
    dx
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::lit(a.sum_f64()))
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::lit(a.sum_f64() / a.len() as f64))
}

/// `sum(a * weights)` with constant weights; the scalar projection used by
/// gradient checks.
pub fn weighted_sum<T: Scalar>(a: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::scalar(T::lit(a.dot(weights)?)))
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let os = sa.with_c(sa.c + sb.c);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::new(os, data)
}

/// Splits a concatenated gradient into its `a` and `b` parts.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = dy.shape();
    if ca == 0 || ca >= s.c {
        return Err(Error::pre(
            "split_channels",
            format!("cannot split {s} at channel {ca}"),
        ));
    }
    let (sa, sb) = (s.with_c(ca), s.with_c(s.c - ca));
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..s.n {
        let (x, y) = dy.sample(n).split_at(sa.sample());
        da.extend_from_slice(x);
        db.extend_from_slice(y);
    }
    Ok((Tensor::new(sa, da)?, Tensor::new(sb, db)?))
}

/// Per-element mean of squared differences.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.ensure_same_shape(target, "mse_loss")?;
    let acc = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(0.0, |acc, (p, t)| {
            let d = p.as_f64() - t.as_f64();
            acc + d * d
        });
    Ok(Tensor::scalar(T::lit(acc / pred.len() as f64)))
}

/// `d mse / d pred = 2 (pred - target) / count`, scaled by the upstream gradient.
pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let k = T::lit(2.0) * g / T::lit(pred.len() as f64);
    let mut d = pred.clone();
    for (v, &t) in d.data_mut().iter_mut().zip(target.data()) {
        *v = (*v - t) * k;
    }
    d
}

pub(crate) fn accumulate<T: Scalar>(into: &mut Tensor<T>, g: &Tensor<T>) {
    debug_assert_eq!(into.shape(), g.shape());
    for (a, &b) in into.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t22(v: [f64; 4]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, 2, 2).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_zero_is_identity() {
        let x = t22([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
    }

    #[test]
    fn mean_of_ones() {
        assert_eq!(mean(&t22([1.0; 4])).item().unwrap(), 1.0);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2).unwrap());
        let msg = add(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("1x1x2x2") && msg.contains("1x2x2x2"), "{msg}");
    }

    #[test]
    fn concat_orders_first_operand_first() {
        let a = Tensor::<f64>::full(Shape::new(2, 1, 1, 2).unwrap(), 1.0);
        let b = Tensor::<f64>::full(Shape::new(2, 2, 1, 2).unwrap(), 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 3, 1, 2).unwrap());
        assert_eq!(
            c.data(),
            &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
        let (da, db) = split_channels(&c, 1).unwrap();
        assert_eq!(da, a);
        assert_eq!(db, b);
        let wrong = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2).unwrap());
        assert!(concat_channels(&a, &wrong).is_err());
    }

    #[test]
    fn mse_values() {
        let p = t22([0.5, 0.6, 0.7, 0.8]);
        assert_eq!(mse(&p, &p).unwrap().item().unwrap(), 0.0);
        let q = p.map(|v| v - 0.1);
        assert!((mse(&p, &q).unwrap().item().unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn sum_channels_round_trip_shapes() {
        let s = Shape::new(2, 3, 2, 2).unwrap();
        let x = Tensor::<f64>::from_fn(s, |i| i as f64);
        let y = sum_channels(&x);
        assert_eq!(y.shape(), s.with_c(1));
        assert_eq!(y.at(0, 0, 0, 0), 0.0 + 4.0 + 8.0);
        assert_eq!(sum_channels_backward(&y, s).shape(), s);
    }
}
