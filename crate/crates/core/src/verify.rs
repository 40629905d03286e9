//! Gradient verification suite: every differentiable primitive plus a
//! two-stage miniature EraseNet, checked in 64-bit against central finite
//! differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradCheck, GradReport, Tape, Var};
use crate::error::Result;
use crate::model::{ConvBlockSpec, DecoderStage, EraseNet, Mode, ModelSpec};
use crate::nn::{BatchNormState, ConvGeom, DropoutMask, Padding, BN_EPSILON};
use crate::tensor::{Shape, Tensor};

/// One line of the suite.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub op: &'static str,
    pub report: GradReport,
}

impl fmt::Display for SuiteRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let checked: usize = self.report.inputs.iter().map(|r| r.checked).sum();
        write!(
            f,
            "{:<26} {:>11.3e} {:>7} {:>6}  {}",
            self.op,
            self.report.max_rel_err(),
            checked,
            self.report.excluded(),
            if self.report.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Table header matching the [`SuiteRow`] display.
pub const SUITE_HEADER: &str = "op                         max-rel-err checked  excl.  result";

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("non-empty")
}

fn random(s: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_| rng.random_range(lo..hi))
}

/// The miniature network: two down-samplings, two up-samplings.
pub fn mini_spec() -> ModelSpec {
    let b = ConvBlockSpec::new;
    let up = |f, block| DecoderStage {
        up_filters: f,
        up_kernel: 3,
        block,
    };
    ModelSpec {
        input_channels: 1,
        encoder: vec![b(2, 3, 3), b(2, 3, 3)],
        bottleneck: b(2, 4, 3),
        decoder: vec![up(3, b(2, 3, 3)), up(3, b(2, 3, 3))],
        head_kernel: 3,
        dropout: 0.3,
        leaky_slope: 0.2,
    }
}

/// Runs every check with the given harness settings.
pub fn gradient_suite(check: &GradCheck) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut rows = Vec::new();
    let mut run = |op: &'static str,
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
                   inputs: Vec<Tensor<f64>>|
     -> Result<()> {
        let report = check.run(f, &inputs)?;
        rows.push(SuiteRow { op, report });
        Ok(())
    };
    let s = shape(2, 3, 4, 5);
    let a = random(s, &mut rng, -1.0, 1.0);
    let b = random(s, &mut rng, -1.0, 1.0);

    run("add", &|t, v| t.add(v[0], v[1]), vec![a.clone(), b.clone()])?;
    run("sub", &|t, v| t.sub(v[0], v[1]), vec![a.clone(), b.clone()])?;
    run("scale", &|t, v| Ok(t.scale(v[0], -1.7)), vec![a.clone()])?;
    run("sum_channels", &|t, v| Ok(t.sum_channels(v[0])), vec![a.clone()])?;
    run("sum", &|t, v| Ok(t.sum(v[0])), vec![a.clone()])?;
    run("mean", &|t, v| Ok(t.mean(v[0])), vec![a.clone()])?;
    let weights = random(s, &mut rng, -1.0, 1.0);
    run(
        "weighted_sum",
        &|t, v| t.weighted_sum(v[0], weights.clone()),
        vec![a.clone()],
    )?;
    run("mse_loss", &|t, v| t.mse_loss(v[0], v[1]), vec![a.clone(), b.clone()])?;
    run(
        "concat_channels",
        &|t, v| t.concat_channels(v[0], v[1]),
        vec![a.clone(), random(shape(2, 2, 4, 5), &mut rng, -1.0, 1.0)],
    )?;

    run("leaky_relu", &|t, v| Ok(t.leaky_relu(v[0], 0.2)), vec![a.clone()])?;
    run("relu", &|t, v| Ok(t.relu(v[0])), vec![a.clone()])?;
    run("sigmoid", &|t, v| Ok(t.sigmoid(v[0])), vec![random(s, &mut rng, -3.0, 3.0)])?;
    run("max_pool2d", &|t, v| t.max_pool2d(v[0]), vec![random(shape(2, 2, 6, 4), &mut rng, -1.0, 1.0)])?;
    let mask = DropoutMask::sample(s, 0.3, &mut rng)?;
    run("dropout", &|t, v| t.dropout(v[0], mask.clone()), vec![a.clone()])?;

    for (op, k, stride, pad, cin, cout) in [
        ("conv2d 3x3", 3, 1, Padding::Same, 2, 3),
        ("conv2d 5x5", 5, 1, Padding::Same, 2, 2),
        ("conv2d 3x3 valid", 3, 1, Padding::Valid, 2, 3),
        ("conv2d 3x3 stride 2", 3, 2, Padding::Same, 2, 3),
        ("conv2d 3x3 wide", 3, 1, Padding::Same, 10, 9),
    ] {
        let g = ConvGeom::new(k, stride, pad);
        let x = random(shape(2, cin, 6, 5), &mut rng, -1.0, 1.0);
        let w = random(shape(cout, cin, k, k), &mut rng, -0.5, 0.5);
        let bias = random(shape(1, cout, 1, 1), &mut rng, -0.5, 0.5);
        run(op, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), g), vec![x, w, bias])?;
    }
    run(
        "conv_transpose2d",
        &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2])),
        vec![
            random(shape(2, 3, 3, 4), &mut rng, -1.0, 1.0),
            random(shape(3, 2, 3, 3), &mut rng, -0.5, 0.5),
            random(shape(1, 2, 1, 1), &mut rng, -0.5, 0.5),
        ],
    )?;

    let gamma = random(shape(1, 3, 1, 1), &mut rng, 0.5, 1.5);
    let beta = random(shape(1, 3, 1, 1), &mut rng, -0.5, 0.5);
    run(
        "batch_norm (train)",
        &|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?.0),
        vec![a.clone(), gamma.clone(), beta.clone()],
    )?;
    let mut state = BatchNormState::<f64>::new(3);
    state.running_mean = vec![0.1, -0.2, 0.05];
    state.running_var = vec![0.8, 1.3, 0.6];
    state.updates = 1;
    run(
        "batch_norm (inference)",
        &|t, v| t.batch_norm_infer(v[0], v[1], v[2], &state),
        vec![a, gamma, beta],
    )?;

    let mut model = EraseNet::<f64>::from_spec(mini_spec(), 11)?;
    for slot in model.norms_mut() {
        let st = &mut slot.state;
        for (i, (m, v)) in st.running_mean.iter_mut().zip(&mut st.running_var).enumerate() {
            *m = 0.05 * i as f64 - 0.05;
            *v = 0.5 + 0.25 * i as f64;
        }
        st.updates = 1;
    }
    let mut inputs = vec![random(shape(2, 1, 8, 8), &mut rng, 0.0, 1.0)];
    inputs.extend(model.params().iter().map(|p| (*p.value).clone()));
    run(
        "mini EraseNet (train)",
        &|t, v| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
            let out = model.forward_with(t, &v[1..], &v[0], Mode::Train(&mut drop_rng))?;
            Ok(out.output)
        },
        inputs.clone(),
    )?;
    run(
        "mini EraseNet (inference)",
        &|t, v| Ok(model.forward_with(t, &v[1..], &v[0], Mode::Infer)?.output),
        inputs,
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_fault_is_caught() {
        let check = GradCheck {
            analytic_scale: 1.01,
            ..GradCheck::default()
        };
        let rows = gradient_suite(&check).unwrap();
        assert!(rows.iter().all(|r| !r.report.passed), "{rows:#?}");
    }

    #[test]
    fn mini_spec_is_valid() {
        let spec = mini_spec();
        spec.validate().unwrap();
        assert_eq!(spec.required_multiple(), 4);
    }
}
