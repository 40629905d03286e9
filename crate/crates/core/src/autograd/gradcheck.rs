//! Central finite-difference verification of tape gradients.
//!
//! The operation under test is reduced to a scalar by a fixed random
//! projection `sum(y * r)`. For each input element the harness compares the
//! analytic gradient with `(L(x + h) - L(x - h)) / 2h`. Elements whose probe
//! points land on a different branch of a piecewise op (rectifier sign or
//! pooling argmax) than the unperturbed point are excluded as kink-adjacent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.inputs.iter().map(|r| r.excluded).sum()
    }
}

/// Harness settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Seed of the output projection.
    pub seed: u64,
    /// Multiplier applied to analytic gradients before comparison; anything
    /// but 1.0 simulates a broken backward to prove the harness can fail.
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            tolerance: FD_TOLERANCE,
            seed: 0x5eed,
            analytic_scale: 1.0,
        }
    }
}

fn projection(shape: Shape, seed: u64) -> Tensor<f64> {
    if shape == Shape::SCALAR {
        return Tensor::scalar(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

impl GradCheck {
    /// Checks `f` at `inputs` (64-bit evaluation).
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        // analytic pass
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = f(&mut tape, &vars)?;
        let weights = projection(tape.value(y).shape(), self.seed);
        let loss = tape.weighted_sum(y, weights.clone())?;
        let base_pattern = tape.kink_pattern();
        tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();

        let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let y = f(&mut t, &vs)?;
            let pattern = t.kink_pattern();
            let l = t.weighted_sum(y, weights.clone())?;
            Ok((t.value(l).data()[0], pattern))
        };

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut reports = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let mut rep = InputReport {
                max_rel_err: 0.0,
                checked: 0,
                excluded: 0,
            };
            for j in 0..inputs[i].len() {
                let x0 = inputs[i].data()[j];
                work[i].data_mut()[j] = x0 + self.step;
                let (lp, pp) = eval(&work)?;
                work[i].data_mut()[j] = x0 - self.step;
                let (lm, pm) = eval(&work)?;
                work[i].data_mut()[j] = x0;
                if pp != base_pattern || pm != base_pattern {
                    rep.excluded += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * self.step);
                let a = analytic[i].data()[j] * self.analytic_scale;
                rep.max_rel_err = rep.max_rel_err.max(relative_error(a, numeric));
                rep.checked += 1;
            }
            reports.push(rep);
        }
        let passed = reports.iter().all(|r| r.max_rel_err <= self.tolerance);
        Ok(GradReport {
            inputs: reports,
            tolerance: self.tolerance,
            passed,
        })
    }
}

/// Runs the default harness (step 1e-3) at the given tolerance.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck {
        tolerance,
        ..GradCheck::default()
    }
    .run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn add_is_exact() {
        let a = Tensor::from_fn(s(1, 2, 3, 3), |i| i as f64 * 0.1);
        let b = Tensor::from_fn(s(1, 2, 3, 3), |i| 1.0 - i as f64 * 0.05);
        let r = finite_difference_check(|t, v| t.add(v[0], v[1]), &[a, b], 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err() < 1e-6);
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        // |x| >= 0.05 > h
        let x = Tensor::from_fn(s(1, 1, 4, 4), |i| {
            if i % 2 == 0 {
                0.05 + i as f64 * 0.1
            } else {
                -0.05 - i as f64 * 0.1
            }
        });
        let r = finite_difference_check(|t, v| Ok(t.leaky_relu(v[0], 0.2)), &[x], 1e-4).unwrap();
        assert!(r.passed);
        assert_eq!(r.excluded(), 0);
    }

    #[test]
    fn leaky_relu_kink_is_excluded() {
        let x = Tensor::new(s(1, 1, 1, 3), vec![0.0, 1.0, -1.0]).unwrap();
        let r = finite_difference_check(|t, v| Ok(t.leaky_relu(v[0], 0.2)), &[x], 1e-4).unwrap();
        assert!(r.passed);
        assert_eq!(r.inputs[0].excluded, 1);
        assert_eq!(r.inputs[0].checked, 2);
    }

    #[test]
    fn corrupted_analytic_gradient_fails() {
        let x = Tensor::from_fn(s(1, 1, 2, 2), |i| i as f64 + 0.5);
        let gc = GradCheck {
            analytic_scale: 1.01,
            ..GradCheck::default()
        };
        let r = gc.run(|t, v| Ok(t.scale(v[0], 3.0)), &[x]).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
