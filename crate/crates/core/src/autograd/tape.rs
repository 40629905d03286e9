//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends a node to the tape, so recording order is a
//! topological order and backward is a single reverse sweep. Node values are
//! immutable snapshots behind `Arc`; parameters can be bound without copying
//! and later updated copy-on-write without disturbing a live graph.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{self, BatchMoments, BatchNormState, ConvGeom, DropoutMask, NormContext};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with the forward context its backward needs.
#[derive(Debug)]
enum OpRecord<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    SumChannels(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Tensor<T>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    NormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: NormContext<T>,
    },
    NormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: NormContext<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Dropout {
        x: Var,
        mask: DropoutMask,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

impl<T> OpRecord<T> {
    fn name(&self) -> &'static str {
        match self {
            OpRecord::Add(..) => "add",
            OpRecord::Sub(..) => "sub",
            OpRecord::Scale(..) => "scale",
            OpRecord::SumChannels(..) => "sum_channels",
            OpRecord::Sum(..) => "sum",
            OpRecord::Mean(..) => "mean",
            OpRecord::WeightedSum(..) => "weighted_sum",
            OpRecord::Conv { .. } => "conv2d",
            OpRecord::ConvTranspose { .. } => "conv_transpose2d",
            OpRecord::NormTrain { .. } => "batch_norm_train",
            OpRecord::NormInfer { .. } => "batch_norm_infer",
            OpRecord::LeakyRelu { .. } => "leaky_relu",
            OpRecord::Relu(..) => "relu",
            OpRecord::Sigmoid(..) => "sigmoid",
            OpRecord::MaxPool { .. } => "max_pool2d",
            OpRecord::Dropout { .. } => "dropout",
            OpRecord::Concat { .. } => "concat_channels",
            OpRecord::Mse { .. } => "mse_loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    /// `None` for leaves, for nodes no gradient flows through, and after
    /// backward has consumed the record.
    op: Option<OpRecord<T>>,
}

/// A dynamically recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are only reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|o| o.name())
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        record: impl FnOnce() -> OpRecord<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(record);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<Var> {
        if !self.value(v).all_finite() {
            return Err(Error::NonFinite(format!("output of {op}")));
        }
        Ok(v)
    }

    // ---- elementwise suite ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = nn::add(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || OpRecord::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = nn::sub(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || OpRecord::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let y = nn::scale(self.value(a), k);
        self.push(y, &[a], || OpRecord::Scale(a, k))
    }

    pub fn sum_channels(&mut self, a: Var) -> Var {
        let y = nn::sum_channels(self.value(a));
        self.push(y, &[a], || OpRecord::SumChannels(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = nn::sum(self.value(a));
        self.push(y, &[a], || OpRecord::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let y = nn::mean(self.value(a));
        self.push(y, &[a], || OpRecord::Mean(a))
    }

    /// `sum(a * weights)` with a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let y = nn::weighted_sum(self.value(a), &weights)?;
        Ok(self.push(y, &[a], || OpRecord::WeightedSum(a, weights)))
    }

    // ---- layers ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = nn::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let v = self.push(y, &inputs, || OpRecord::Conv { x, w, b, geom });
        self.check_finite("conv2d", v)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = nn::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let v = self.push(y, &inputs, || OpRecord::ConvTranspose { x, w, b });
        self.check_finite("conv_transpose2d", v)
    }

    /// Train-mode batch norm; returns the batch statistics so the caller can
    /// fold them into its running state.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        let (y, ctx, m) =
            nn::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(y, &[x, gamma, beta], || OpRecord::NormTrain {
            x,
            gamma,
            beta,
            ctx,
        });
        Ok((self.check_finite("batch_norm", v)?, m))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
    ) -> Result<Var> {
        let (y, ctx) =
            nn::batch_norm_infer(self.value(x), self.value(gamma), self.value(beta), state)?;
        let v = self.push(y, &[x, gamma, beta], || OpRecord::NormInfer {
            x,
            gamma,
            beta,
            ctx,
        });
        self.check_finite("batch_norm", v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = nn::leaky_relu(self.value(x), slope);
        self.push(y, &[x], || OpRecord::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = nn::relu(self.value(x));
        self.push(y, &[x], || OpRecord::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = nn::sigmoid(self.value(x));
        self.push(y, &[x], || OpRecord::Sigmoid(x))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = nn::max_pool2d(self.value(x))?;
        Ok(self.push(y, &[x], || OpRecord::MaxPool { x, argmax }))
    }

    pub fn dropout(&mut self, x: Var, mask: DropoutMask) -> Result<Var> {
        let y = nn::apply_mask(self.value(x), &mask)?;
        Ok(self.push(y, &[x], || OpRecord::Dropout { x, mask }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = nn::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || OpRecord::Concat { a, b }))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let y = nn::mse(self.value(pred), self.value(target))?;
        let v = self.push(y, &[pred, target], || OpRecord::Mse { pred, target });
        self.check_finite("mse_loss", v)
    }

    // ---- backward ----

    fn acc(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => nn::accumulate(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a 1x1x1x1 `loss`, seeding its gradient with 1.
    ///
    /// Gradients reaching a tensor along several paths are summed. Every
    /// saved forward context is consumed, so a second call fails with
    /// [`Error::GraphConsumed`]. Afterwards [`Tape::grad`] returns the
    /// gradient of each requires-grad leaf (leaves unreachable from `loss`
    /// have none).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != Shape::SCALAR {
            return Err(Error::NotScalar(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::pre(
                "backward",
                "loss does not depend on any requires-grad tensor",
            ));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.take() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop(Var(i), op, g)?;
        }
        // drop any other saved contexts so the graph cannot be replayed
        for n in &mut self.nodes {
            n.op = None;
        }
        Ok(())
    }

    fn backprop(&mut self, out: Var, op: OpRecord<T>, g: Tensor<T>) -> Result<()> {
        match op {
            OpRecord::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g);
            }
            OpRecord::Sub(a, b) => {
                self.acc(b, nn::scale(&g, -T::one()));
                self.acc(a, g);
            }
            OpRecord::Scale(a, k) => self.acc(a, nn::scale(&g, k)),
            OpRecord::SumChannels(a) => {
                let s = self.value(a).shape();
                self.acc(a, nn::sum_channels_backward(&g, s));
            }
            OpRecord::Sum(a) => {
                let s = self.value(a).shape();
                self.acc(a, Tensor::full(s, g.data()[0]));
            }
            OpRecord::Mean(a) => {
                let s = self.value(a).shape();
                let k = g.data()[0] / T::lit(s.numel() as f64);
                self.acc(a, Tensor::full(s, k));
            }
            OpRecord::WeightedSum(a, w) => {
                self.acc(a, nn::scale(&w, g.data()[0]));
            }
            OpRecord::Conv { x, w, b, geom } => {
                let xv = self.shared_value(x);
                let wv = self.shared_value(w);
                if self.requires_grad(x) {
                    let dx = nn::conv2d_backward_input(&g, &wv, geom, xv.shape().h, xv.shape().w)?;
                    self.acc(x, dx);
                }
                if self.requires_grad(w) {
                    self.acc(w, nn::conv2d_backward_kernel(&xv, &g, geom)?);
                }
                if let Some(b) = b {
                    self.acc(b, nn::bias_grad(&g));
                }
            }
            OpRecord::ConvTranspose { x, w, b } => {
                let xv = self.shared_value(x);
                let wv = self.shared_value(w);
                let geom = ConvGeom::upsample(wv.shape().h);
                if self.requires_grad(x) {
                    self.acc(x, nn::conv2d(&g, &wv, None, geom)?);
                }
                if self.requires_grad(w) {
                    self.acc(w, nn::conv2d_backward_kernel(&g, &xv, geom)?);
                }
                if let Some(b) = b {
                    self.acc(b, nn::bias_grad(&g));
                }
            }
            OpRecord::NormTrain {
                x,
                gamma,
                beta,
                ctx,
            } => {
                let gv = self.shared_value(gamma);
                let (dx, dg, db) = nn::batch_norm_train_backward(&g, &ctx, &gv);
                self.acc(x, dx);
                self.acc(gamma, dg);
                self.acc(beta, db);
            }
            OpRecord::NormInfer {
                x,
                gamma,
                beta,
                ctx,
            } => {
                let gv = self.shared_value(gamma);
                let (dx, dg, db) = nn::batch_norm_infer_backward(&g, &ctx, &gv);
                self.acc(x, dx);
                self.acc(gamma, dg);
                self.acc(beta, db);
            }
            OpRecord::LeakyRelu { x, slope } => {
                let dx = nn::leaky_relu_backward(self.value(x), &g, slope);
                self.acc(x, dx);
            }
            OpRecord::Relu(x) => {
                let dx = nn::relu_backward(self.value(x), &g);
                self.acc(x, dx);
            }
            OpRecord::Sigmoid(x) => {
                let dx = nn::sigmoid_backward(self.value(out), &g);
                self.acc(x, dx);
            }
            OpRecord::MaxPool { x, argmax } => {
                let s = self.value(x).shape();
                self.acc(x, nn::max_pool2d_backward(&g, &argmax, s));
            }
            OpRecord::Dropout { x, mask } => self.acc(x, nn::apply_mask(&g, &mask)?),
            OpRecord::Concat { a, b } => {
                let ca = self.value(a).shape().c;
                let (da, db) = nn::split_channels(&g, ca)?;
                self.acc(a, da);
                self.acc(b, db);
            }
            OpRecord::Mse { pred, target } => {
                let (p, t) = (self.shared_value(pred), self.shared_value(target));
                let k = g.data()[0];
                self.acc(pred, nn::mse_backward(&p, &t, k));
                self.acc(target, nn::mse_backward(&t, &p, k));
            }
        }
        Ok(())
    }

    /// Branch pattern of every piecewise operation on the tape: the sign of
    /// each rectifier input and each pooling argmax. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Some(OpRecord::LeakyRelu { x, .. }) => {
                    out.extend(
                        self.value(*x)
                            .data()
                            .iter()
                            .map(|v| (*v >= T::zero()) as u32),
                    );
                }
                Some(OpRecord::Relu(x)) => {
                    out.extend(
                        self.value(*x)
                            .data()
                            .iter()
                            .map(|v| (*v > T::zero()) as u32),
                    );
                }
                Some(OpRecord::MaxPool { argmax, .. }) => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s22() -> Shape {
        Shape::new(1, 1, 2, 2).unwrap()
    }

    #[test]
    fn mean_gradient_is_quarter() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(s22(), 1.0), true);
        let l = t.mean(x);
        assert_eq!(t.value(l).item().unwrap(), 1.0);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn linearity_of_sum() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(s22(), |i| i as f64), true);
        let y = t.scale(x, 2.0);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(s22(), |i| i as f64), true);
        let y = t.add(x, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(s22(), 1.0), true);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(s22(), 1.0), true);
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient_and_no_record() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(s22(), 1.0), true);
        let c = t.leaf(Tensor::full(s22(), 3.0), false);
        let cc = t.scale(c, 2.0);
        assert!(t.op_name(cc).is_none());
        let y = t.sub(x, cc).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);
    }
}
