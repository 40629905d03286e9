//! Named parameter storage.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Rank-4 convolution kernel.
    Kernel,
    /// Per-channel vector stored as `1 x c x 1 x 1`.
    Vector,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    /// Dimensions as serialized: `[o, c, k, k]` for kernels, `[c]` for vectors.
    pub fn dims(&self) -> Vec<usize> {
        let s = self.value.shape();
        match self.kind {
            ParamKind::Kernel => s.dims().to_vec(),
            ParamKind::Vector => vec![s.c],
        }
    }
}

/// Trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        let id = self.params.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.find(name).map(|i| &*self.params[i].value)
    }

    pub fn set(&mut self, id: usize, value: Tensor<T>) {
        debug_assert_eq!(value.shape(), self.params[id].value.shape());
        self.params[id].value = Arc::new(value);
    }

    /// Mutable access; clones the tensor first if a graph still shares it.
    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id].value)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Glorot-uniform draw for a kernel of the given shape.
pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let rf = shape.h * shape.w;
    let limit = (6.0 / ((shape.n + shape.c) * rf) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..=limit)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(16, 8, 3, 3).unwrap();
        let w: Tensor<f64> = glorot(s, &mut rng);
        let limit = (6.0f64 / (24.0 * 9.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let mean = w.sum_f64() / w.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn store_lookup_and_dims() {
        let mut st = ParamStore::<f32>::new();
        let k = st.push(
            "a.kernel".into(),
            ParamKind::Kernel,
            Tensor::zeros(Shape::new(4, 2, 3, 3).unwrap()),
        );
        let b = st.push(
            "a.bias".into(),
            ParamKind::Vector,
            Tensor::zeros(Shape::new(1, 4, 1, 1).unwrap()),
        );
        assert_eq!(st.find("a.bias"), Some(b));
        assert_eq!(st.get(k).dims(), vec![4, 2, 3, 3]);
        assert_eq!(st.get(b).dims(), vec![4]);
        assert_eq!(st.numel(), 72 + 4);
    }
}
