//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Running statistics of one batch-norm layer. The learnable `gamma`/`beta`
/// live in the model's parameter store next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
    /// Number of train-mode batches folded into the running statistics.
    pub updates: u64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::lit(BN_EPSILON),
            momentum: T::lit(BN_MOMENTUM),
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update from one batch. The variance folded in is
    /// the unbiased (Bessel-corrected) batch variance.
    pub fn update(&mut self, m: &BatchMoments<T>) {
        let mo = self.momentum;
        let corr = if m.count > 1 {
            T::lit(m.count as f64 / (m.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = mo * self.running_mean[c] + (T::one() - mo) * m.mean[c];
            self.running_var[c] = mo * self.running_var[c] + (T::one() - mo) * m.var[c] * corr;
        }
        self.updates += 1;
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        BatchNormState {
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::lit(self.epsilon.as_f64()),
            momentum: U::lit(self.momentum.as_f64()),
            updates: self.updates,
        }
    }
}

/// Batch statistics observed by a train-mode forward (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

/// Saved forward context for the train-mode backward.
#[derive(Clone, Debug)]
pub struct NormContext<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_affine<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    let want = Shape {
        n: 1,
        c: x.shape().c,
        h: 1,
        w: 1,
    };
    for p in [gamma, beta] {
        if p.shape() != want {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: p.shape(),
            });
        }
    }
    Ok(())
}

fn channel_planes(s: Shape, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let p = s.plane();
    (0..s.n).map(move |n| {
        let start = s.offset(n, c, 0, 0);
        start..start + p
    })
}

/// Train-mode normalization with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormContext<T>, BatchMoments<T>)> {
    check_affine("batch_norm", x, gamma, beta)?;
    let s = x.shape();
    let count = s.n * s.plane();
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.c);
    let mut means = Vec::with_capacity(s.c);
    let mut vars = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut sum = 0.0;
        for r in channel_planes(s, c) {
            sum += x.data()[r].iter().fold(0.0, |a, v| a + v.as_f64());
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for r in channel_planes(s, c) {
            sq += x.data()[r].iter().fold(0.0, |a, v| {
                let d = v.as_f64() - mean;
                a + d * d
            });
        }
        let var = sq / count as f64;
        let istd = 1.0 / (var + eps.as_f64()).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
        for r in channel_planes(s, c) {
            for i in r {
                let xh = (x.data()[i] - mean_t) * istd_t;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
        inv_std.push(istd_t);
        means.push(mean_t);
        vars.push(T::lit(var));
    }
    Ok((
        y,
        NormContext { xhat, inv_std },
        BatchMoments {
            mean: means,
            var: vars,
            count,
        },
    ))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm_train`].
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    ctx: &NormContext<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let m = (s.n * s.plane()) as f64;
    let cs = Shape {
        n: 1,
        c: s.c,
        h: 1,
        w: 1,
    };
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(cs);
    let mut dbeta = Tensor::zeros(cs);
    for c in 0..s.c {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for r in channel_planes(s, c) {
            for i in r {
                let g = dy.data()[i].as_f64();
                sdy += g;
                sdyx += g * ctx.xhat.data()[i].as_f64();
            }
        }
        dbeta.data_mut()[c] = T::lit(sdy);
        dgamma.data_mut()[c] = T::lit(sdyx);
        let k = gamma.data()[c].as_f64() * ctx.inv_std[c].as_f64() / m;
        for r in channel_planes(s, c) {
            for i in r {
                let v = m * dy.data()[i].as_f64() - sdy - ctx.xhat.data()[i].as_f64() * sdyx;
                dx.data_mut()[i] = T::lit(k * v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode normalization with fixed statistics; an affine map per
/// channel. Returns the output and the normalized input (for `dgamma`).
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, NormContext<T>)> {
    check_affine("batch_norm", x, gamma, beta)?;
    let s = x.shape();
    if state.channels() != s.c {
        return Err(Error::pre(
            "batch_norm",
            format!(
                "running statistics have {} channels, input {s}",
                state.channels()
            ),
        ));
    }
    if state.updates == 0 {
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| {
            log::warn!("batch_norm: inference with never-updated running statistics (mean 0, var 1)")
        });
    }
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let istd = T::one() / (state.running_var[c] + state.epsilon).sqrt();
        let mean = state.running_mean[c];
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for r in channel_planes(s, c) {
            for i in r {
                let xh = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
        inv_std.push(istd);
    }
    Ok((y, NormContext { xhat, inv_std }))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm_infer`].
pub fn batch_norm_infer_backward<T: Scalar>(
    dy: &Tensor<T>,
    ctx: &NormContext<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let cs = Shape {
        n: 1,
        c: s.c,
        h: 1,
        w: 1,
    };
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(cs);
    let mut dbeta = Tensor::zeros(cs);
    for c in 0..s.c {
        let k = gamma.data()[c] * ctx.inv_std[c];
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for r in channel_planes(s, c) {
            for i in r {
                let g = dy.data()[i];
                sdy += g.as_f64();
                sdyx += (g * ctx.xhat.data()[i]).as_f64();
                dx.data_mut()[i] = g * k;
            }
        }
        dbeta.data_mut()[c] = T::lit(sdy);
        dgamma.data_mut()[c] = T::lit(sdyx);
    }
    (dx, dgamma, dbeta)
}
