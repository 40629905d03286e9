//! One model definition, two execution strategies.
//!
//! Network code is written once against [`Graph`]. Running it on a
//! [`Tape`] records a differentiable graph for training; running it on
//! [`Eager`] computes values only and frees each intermediate as soon as it
//! is no longer referenced, which keeps page-sized inference affordable.

use std::sync::Arc;

use crate::autograd::tape::{Tape, Var};
use crate::error::Result;
use crate::nn::{self, BatchMoments, BatchNormState, ConvGeom, DropoutMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Graph<T: Scalar> {
    type Value: Clone;

    /// Input that never needs a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    /// Trainable tensor (gradients are tracked where the graph supports it).
    fn parameter(&mut self, t: &Arc<Tensor<T>>) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        geom: ConvGeom,
    ) -> Result<Self::Value>;
    fn conv_transpose2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value>;
    fn batch_norm_train(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: T,
    ) -> Result<(Self::Value, BatchMoments<T>)>;
    fn batch_norm_infer(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        state: &BatchNormState<T>,
    ) -> Result<Self::Value>;
    fn leaky_relu(&mut self, x: &Self::Value, slope: T) -> Self::Value;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn max_pool2d(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn dropout(&mut self, x: &Self::Value, mask: DropoutMask) -> Result<Self::Value>;
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn parameter(&mut self, t: &Arc<Tensor<T>>) -> Var {
        self.leaf(t.clone(), true)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.value(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        Tape::conv2d(self, *x, *w, b.copied(), geom)
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        Tape::conv_transpose2d(self, *x, *w, b.copied())
    }

    fn batch_norm_train(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        Tape::batch_norm_train(self, *x, *gamma, *beta, eps)
    }

    fn batch_norm_infer(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        state: &BatchNormState<T>,
    ) -> Result<Var> {
        Tape::batch_norm_infer(self, *x, *gamma, *beta, state)
    }

    fn leaky_relu(&mut self, x: &Var, slope: T) -> Var {
        Tape::leaky_relu(self, *x, slope)
    }

    fn relu(&mut self, x: &Var) -> Var {
        Tape::relu(self, *x)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        Tape::sigmoid(self, *x)
    }

    fn max_pool2d(&mut self, x: &Var) -> Result<Var> {
        Tape::max_pool2d(self, *x)
    }

    fn dropout(&mut self, x: &Var, mask: DropoutMask) -> Result<Var> {
        Tape::dropout(self, *x, mask)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::concat_channels(self, *a, *b)
    }
}

/// Value-only execution: no recording, no gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Value = Arc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Arc::new(t)
    }

    fn parameter(&mut self, t: &Arc<Tensor<T>>) -> Self::Value {
        t.clone()
    }

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(nn::add(a, b)?))
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        geom: ConvGeom,
    ) -> Result<Self::Value> {
        Ok(Arc::new(nn::conv2d(x, w, b.map(|b| &**b), geom)?))
    }

    fn conv_transpose2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value> {
        Ok(Arc::new(nn::conv_transpose2d(x, w, b.map(|b| &**b))?))
    }

    fn batch_norm_train(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: T,
    ) -> Result<(Self::Value, BatchMoments<T>)> {
        let (y, _, m) = nn::batch_norm_train(x, gamma, beta, eps)?;
        Ok((Arc::new(y), m))
    }

    fn batch_norm_infer(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        state: &BatchNormState<T>,
    ) -> Result<Self::Value> {
        Ok(Arc::new(nn::batch_norm_infer(x, gamma, beta, state)?.0))
    }

    fn leaky_relu(&mut self, x: &Self::Value, slope: T) -> Self::Value {
        Arc::new(nn::leaky_relu(x, slope))
    }

    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(nn::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(nn::sigmoid(x))
    }

    fn max_pool2d(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(nn::max_pool2d(x)?.0))
    }

    fn dropout(&mut self, x: &Self::Value, mask: DropoutMask) -> Result<Self::Value> {
        Ok(Arc::new(nn::apply_mask(x, &mask)?))
    }

    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(nn::concat_channels(a, b)?))
    }
}
