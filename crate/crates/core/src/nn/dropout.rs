use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const TRANSITION_DROPOUT: f64 = 0.3;

/// Inverted-dropout keep mask: survivors are scaled by `1 / (1 - rate)` so
/// the output's expectation equals the input.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    /// Draws one uniform per element, in row-major order; an element is
    /// dropped when its draw falls below `rate`.
    pub fn sample<R: Rng + ?Sized>(shape: Shape, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::pre("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = if rate == 0.0 {
            vec![true; shape.numel()]
        } else {
            (0..shape.numel())
                .map(|_| rng.random::<f64>() >= rate)
                .collect()
        };
        Ok(Self { keep, rate })
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.rate
    }
}

/// Applies a mask; also the backward map (same mask, same scale).
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &DropoutMask) -> Result<Tensor<T>> {
    if mask.keep.len() != x.len() {
        return Err(Error::pre(
            "dropout",
            format!(
                "mask of {} elements for tensor {}",
                mask.keep.len(),
                x.shape()
            ),
        ));
    }
    let scale = T::lit(1.0 / mask.keep_prob());
    let mut y = x.clone();
    for (v, &k) in y.data_mut().iter_mut().zip(&mask.keep) {
        *v = if k { *v * scale } else { T::zero() };
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3).unwrap(), |i| i as f32 - 5.0);
        let m = DropoutMask::sample(x.shape(), 0.0, &mut rng).unwrap();
        assert_eq!(apply_mask(&x, &m).unwrap(), x);
    }

    #[test]
    fn mean_of_ones_within_three_standard_errors() {
        // Each output is 0 or 1/(1-p); its variance is p/(1-p).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Shape::new(1, 4, 128, 128).unwrap();
        let x = Tensor::<f64>::full(s, 1.0);
        let m = DropoutMask::sample(s, 0.3, &mut rng).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        let n = s.numel() as f64;
        let mean = y.sum_f64() / n;
        let se = (0.3f64 / 0.7 / n).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn invalid_rate_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(DropoutMask::sample(Shape::SCALAR, 1.0, &mut rng).is_err());
    }
}
