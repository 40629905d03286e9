//! The EraseNet encoder/decoder graph.

use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Eager, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::model::params::{glorot, ParamKind, ParamStore};
use crate::model::spec::{ConvBlockSpec, ModelSpec, Variant};
use crate::nn::{BatchMoments, BatchNormState, ConvGeom, DropoutMask, Padding};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: usize,
    bias: usize,
    geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    conv: Conv,
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Clone, Debug)]
struct Block {
    number: usize,
    in_channels: usize,
    filters: usize,
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
struct Stage {
    up_kernel: usize,
    up_bias: usize,
    block: Block,
}

/// Running statistics of one batch-norm layer with its parameter prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSlot<T> {
    pub name: String,
    pub state: BatchNormState<T>,
}

/// One row of a forward trace: a named layer and its output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub layer: String,
    pub shape: Shape,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22}{}x{}x{}",
            self.layer, self.shape.h, self.shape.w, self.shape.c
        )
    }
}

/// Whether a forward pass trains (batch statistics, dropout) or infers.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Result of [`EraseNet::forward_with`].
pub struct Forward<V, T> {
    pub output: V,
    /// Batch statistics per norm slot (train mode only).
    pub moments: Vec<Option<BatchMoments<T>>>,
    pub trace: Vec<TraceRow>,
}

/// Result of [`EraseNet::forward_train`].
pub struct TrainForward {
    pub output: Var,
    /// Tape leaves of the parameters, in store order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EraseNet<T> {
    variant: Option<Variant>,
    width_scale: f64,
    spec: ModelSpec,
    params: ParamStore<T>,
    norms: Vec<NormSlot<T>>,
    encoder: Vec<Block>,
    bottleneck: Block,
    decoder: Vec<Stage>,
    head: Conv,
}

struct Builder<'r, T> {
    params: ParamStore<T>,
    norms: Vec<NormSlot<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize, geom: ConvGeom) -> Conv {
        let shape = Shape {
            n: out,
            c: inp,
            h: k,
            w: k,
        };
        let kernel = self.params.push(
            format!("{prefix}.kernel"),
            ParamKind::Kernel,
            glorot(shape, self.rng),
        );
        let bias_len = if geom.stride == 2 { inp } else { out };
        let bias = self.params.push(
            format!("{prefix}.bias"),
            ParamKind::Vector,
            Tensor::zeros(Shape {
                n: 1,
                c: bias_len,
                h: 1,
                w: 1,
            }),
        );
        Conv { kernel, bias, geom }
    }

    fn block(
        &mut self,
        prefix: String,
        number: usize,
        spec: ConvBlockSpec,
        in_channels: usize,
    ) -> Block {
        let mut layers = Vec::with_capacity(spec.depth);
        let geom = ConvGeom::new(spec.kernel, 1, Padding::Same);
        for l in 1..=spec.depth {
            let inp = if l == 1 { in_channels } else { spec.filters };
            let conv = self.conv(
                &format!("{prefix}.conv{l}"),
                spec.filters,
                inp,
                spec.kernel,
                geom,
            );
            let vec = Shape {
                n: 1,
                c: spec.filters,
                h: 1,
                w: 1,
            };
            let bn = format!("{prefix}.bn{l}");
            let gamma = self.params.push(
                format!("{bn}.gamma"),
                ParamKind::Vector,
                Tensor::full(vec, T::one()),
            );
            let beta =
                self.params
                    .push(format!("{bn}.beta"), ParamKind::Vector, Tensor::zeros(vec));
            self.norms.push(NormSlot {
                name: bn,
                state: BatchNormState::new(spec.filters),
            });
            layers.push(Layer {
                conv,
                gamma,
                beta,
                norm: self.norms.len() - 1,
            });
        }
        Block {
            number,
            in_channels,
            filters: spec.filters,
            layers,
        }
    }
}

impl<T: Scalar> EraseNet<T> {
    /// Builds a variant at the given width multiplier with seeded
    /// Glorot-uniform kernels, zero biases, unit gamma and zero beta.
    pub fn new(variant: Variant, width_scale: f64, seed: u64) -> Result<Self> {
        if !(width_scale.is_finite() && width_scale > 0.0) {
            return Err(Error::Config(format!(
                "width scale must be positive, got {width_scale}"
            )));
        }
        let spec = ModelSpec::for_variant(variant).scaled(width_scale);
        let mut net = Self::from_spec(spec, seed)?;
        net.variant = Some(variant);
        net.width_scale = width_scale;
        Ok(net)
    }

    /// Builds an arbitrary schedule (used for miniature test networks).
    pub fn from_spec(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            norms: Vec::new(),
            rng: &mut rng,
        };
        let mut number = 0;
        let mut next = || {
            number += 1;
            number
        };

        let mut channels = spec.input_channels;
        let mut encoder = Vec::new();
        for bs in &spec.encoder {
            let n = next();
            encoder.push(b.block(format!("enc.block{n}"), n, *bs, channels));
            channels = bs.filters;
        }
        let n = next();
        let bottleneck = b.block(format!("mid.block{n}"), n, spec.bottleneck, channels);
        channels = spec.bottleneck.filters;

        let mut decoder = Vec::new();
        for (i, st) in spec.decoder.iter().enumerate() {
            let residual = encoder[encoder.len() - 1 - i].filters;
            // transposed weights are (in, out, k, k)
            let up = b.conv(
                &format!("dec.up{}", i + 1),
                channels,
                st.up_filters,
                st.up_kernel,
                ConvGeom::upsample(st.up_kernel),
            );
            let n = next();
            let block = b.block(
                format!("dec.block{n}"),
                n,
                st.block,
                residual + st.up_filters,
            );
            channels = st.block.filters;
            decoder.push(Stage {
                up_kernel: up.kernel,
                up_bias: up.bias,
                block,
            });
        }
        let head = b.conv(
            "head.conv",
            spec.input_channels,
            channels,
            spec.head_kernel,
            ConvGeom::new(spec.head_kernel, 1, Padding::Same),
        );
        let (params, norms) = (b.params, b.norms);
        Ok(Self {
            variant: None,
            width_scale: 1.0,
            spec,
            params,
            norms,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn variant(&self) -> Option<Variant> {
        self.variant
    }

    pub fn width_scale(&self) -> f64 {
        self.width_scale
    }

    /// Effective (width-scaled) schedule.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormSlot<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormSlot<T>] {
        &mut self.norms
    }

    pub fn required_multiple(&self) -> usize {
        self.spec.required_multiple()
    }

    /// Folds batch statistics from a train-mode forward into the running
    /// averages.
    pub fn apply_moments(&mut self, moments: &[Option<BatchMoments<T>>]) {
        for (slot, m) in self.norms.iter_mut().zip(moments) {
            if let Some(m) = m {
                slot.state.update(m);
            }
        }
    }

    /// Puts every parameter on `g`, in store order.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> Vec<G::Value> {
        self.params.iter().map(|p| g.parameter(&p.value)).collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.required_multiple();
        if shape.c != self.spec.input_channels {
            return Err(Error::pre(
                "forward",
                format!(
                    "expected {} input channel(s), got {}",
                    self.spec.input_channels, shape.c
                ),
            ));
        }
        if shape.h % m != 0 || shape.w % m != 0 {
            return Err(Error::pre(
                "forward",
                format!(
                    "input {}x{} must have height and width divisible by {m}; pad it to a multiple of {m} first",
                    shape.h, shape.w
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network on any graph backend with externally bound
    /// parameters (see [`bind`](Self::bind)).
    pub fn forward_with<G: Graph<T>>(
        &self,
        g: &mut G,
        params: &[G::Value],
        x: &G::Value,
        mut mode: Mode<'_>,
    ) -> Result<Forward<G::Value, T>> {
        if params.len() != self.params.len() {
            return Err(Error::pre(
                "forward",
                format!(
                    "{} bound parameters, model has {}",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        self.check_input(g.tensor(x).shape())?;
        let mut run = Run {
            net: self,
            params,
            moments: vec![None; self.norms.len()],
            trace: Vec::new(),
        };

        let mut h = x.clone();
        let mut residuals = Vec::with_capacity(self.encoder.len());
        for (i, blk) in self.encoder.iter().enumerate() {
            h = run.block(g, blk, &h, &mut mode)?;
            run.row(g, format!("Residual ({})", i + 1), &h);
            residuals.push(h.clone());
            h = g.max_pool2d(&h)?;
            if let Mode::Train(rng) = &mut mode {
                let mask =
                    DropoutMask::sample(g.tensor(&h).shape(), self.spec.dropout, &mut **rng)?;
                h = g.dropout(&h, mask)?;
            }
            run.row(g, format!("Transition Layer ({})", i + 1), &h);
        }
        h = run.block(g, &self.bottleneck, &h, &mut mode)?;
        for (i, st) in self.decoder.iter().enumerate() {
            let up = g.conv_transpose2d(&h, &params[st.up_kernel], Some(&params[st.up_bias]))?;
            let up = g.relu(&up);
            run.row(g, format!("ConvTranspose ({})", i + 1), &up);
            let r = residuals.pop().expect("one residual per decoder stage");
            let cat = g.concat_channels(&r, &up)?;
            drop(r);
            run.row(g, format!("Concatenation ({})", i + 1), &cat);
            h = run.block(g, &st.block, &cat, &mut mode)?;
        }
        let y = g.conv2d(
            &h,
            &params[self.head.kernel],
            Some(&params[self.head.bias]),
            self.head.geom,
        )?;
        run.row(g, "Convolution (1)".into(), &y);
        let y = g.sigmoid(&y);
        run.row(g, "Sigmoid (1)".into(), &y);
        Ok(Forward {
            output: y,
            moments: run.moments,
            trace: run.trace,
        })
    }

    /// Train-mode forward on a tape. Batch statistics are folded into the
    /// running averages immediately.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut dyn RngCore,
    ) -> Result<TrainForward> {
        let params = self.bind(tape);
        let fwd = self.forward_with(tape, &params, &x, Mode::Train(rng))?;
        self.apply_moments(&fwd.moments);
        Ok(TrainForward {
            output: fwd.output,
            params,
        })
    }

    /// Inference forward with running statistics and inert dropout.
    pub fn forward_infer<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let params = self.bind(g);
        Ok(self.forward_with(g, &params, x, Mode::Infer)?.output)
    }

    /// Value-only inference.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.warn_if_untrained();
        let mut g = Eager;
        let x = Arc::new(x.clone());
        let y = self.forward_infer(&mut g, &x)?;
        Ok(Arc::try_unwrap(y).unwrap_or_else(|a| (*a).clone()))
    }

    /// Inference-mode layer/shape trace.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<TraceRow>> {
        let mut g = Eager;
        let params = self.bind(&mut g);
        let x = Arc::new(x.clone());
        Ok(self.forward_with(&mut g, &params, &x, Mode::Infer)?.trace)
    }

    fn warn_if_untrained(&self) {
        if self.norms.iter().any(|n| n.state.updates == 0) {
            log::warn!("inference with batch-norm statistics that were never updated (initial mean 0, variance 1)");
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Copy of the model with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> EraseNet<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.kind, p.value.cast());
        }
        EraseNet {
            variant: self.variant,
            width_scale: self.width_scale,
            spec: self.spec.clone(),
            params,
            norms: self
                .norms
                .iter()
                .map(|n| NormSlot {
                    name: n.name.clone(),
                    state: n.state.cast(),
                })
                .collect(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }
}

struct Run<'a, T: Scalar, V> {
    net: &'a EraseNet<T>,
    params: &'a [V],
    moments: Vec<Option<BatchMoments<T>>>,
    trace: Vec<TraceRow>,
}

impl<T: Scalar, V: Clone> Run<'_, T, V> {
    fn row<G: Graph<T, Value = V>>(&mut self, g: &G, layer: String, v: &V) {
        self.trace.push(TraceRow {
            layer,
            shape: g.tensor(v).shape(),
        });
    }

    /// Layer 1 consumes the block input; every later layer consumes the sum
    /// of all earlier activations (input included) whose channel count
    /// matches the block's filters. The block emits its last activation.
    fn block<G: Graph<T, Value = V>>(
        &mut self,
        g: &mut G,
        blk: &Block,
        x0: &V,
        mode: &mut Mode<'_>,
    ) -> Result<V> {
        let net = self.net;
        let slope = T::lit(net.spec.leaky_slope);
        let mut acts: Vec<V> = Vec::with_capacity(blk.layers.len());
        for (l, layer) in blk.layers.iter().enumerate() {
            let input = if l == 0 {
                x0.clone()
            } else {
                let mut terms = Vec::with_capacity(l + 1);
                if blk.in_channels == blk.filters {
                    terms.push(x0);
                }
                terms.extend(acts.iter());
                let mut s = terms[0].clone();
                for t in &terms[1..] {
                    s = g.add(&s, t)?;
                }
                s
            };
            let p = self.params;
            let c = g.conv2d(
                &input,
                &p[layer.conv.kernel],
                Some(&p[layer.conv.bias]),
                layer.conv.geom,
            )?;
            let n = match mode {
                Mode::Train(_) => {
                    let (n, m) = g.batch_norm_train(
                        &c,
                        &p[layer.gamma],
                        &p[layer.beta],
                        net.norms[layer.norm].state.epsilon,
                    )?;
                    self.moments[layer.norm] = Some(m);
                    n
                }
                Mode::Infer => g.batch_norm_infer(
                    &c,
                    &p[layer.gamma],
                    &p[layer.beta],
                    &net.norms[layer.norm].state,
                )?,
            };
            acts.push(g.leaky_relu(&n, slope));
        }
        let out = acts.pop().expect("block depth is at least 1");
        self.row(g, format!("ConvBlock ({})", blk.number), &out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> ModelSpec {
        let b = ConvBlockSpec::new;
        ModelSpec {
            encoder: vec![b(2, 3, 3), b(2, 4, 3)],
            bottleneck: b(2, 4, 3),
            decoder: vec![
                crate::model::DecoderStage {
                    up_filters: 3,
                    up_kernel: 3,
                    block: b(2, 3, 3),
                },
                crate::model::DecoderStage {
                    up_filters: 2,
                    up_kernel: 3,
                    block: b(2, 3, 3),
                },
            ],
            ..ModelSpec::for_variant(Variant::EraseNet3)
        }
    }

    /// Independent parameter count straight from the schedule.
    fn count_oracle(s: &ModelSpec) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let block = |b: &ConvBlockSpec, i: usize| {
            (0..b.depth)
                .map(|l| {
                    conv(b.filters, if l == 0 { i } else { b.filters }, b.kernel) + 2 * b.filters
                })
                .sum::<usize>()
        };
        let mut total = 0;
        let mut c = s.input_channels;
        for b in &s.encoder {
            total += block(b, c);
            c = b.filters;
        }
        total += block(&s.bottleneck, c);
        c = s.bottleneck.filters;
        for (i, d) in s.decoder.iter().enumerate() {
            total += c * d.up_filters * 9 + d.up_filters;
            let r = s.encoder[s.encoder.len() - 1 - i].filters;
            total += block(&d.block, r + d.up_filters);
            c = d.block.filters;
        }
        total + conv(1, c, 3)
    }

    #[test]
    fn parameter_count_matches_schedule() {
        for v in [Variant::EraseNet3, Variant::EraseNet4] {
            let net = EraseNet::<f32>::new(v, 1.0, 0).unwrap();
            assert_eq!(net.param_count(), count_oracle(net.spec()), "{v}");
        }
        let net = EraseNet::<f64>::from_spec(mini(), 0).unwrap();
        assert_eq!(net.param_count(), count_oracle(&mini()));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let net = EraseNet::<f32>::new(Variant::EraseNet4, 0.125, 0).unwrap();
        let names: Vec<_> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "enc.block1.conv1.kernel");
        assert!(names.contains(&"mid.block5.bn4.gamma"));
        assert!(names.contains(&"dec.up1.kernel"));
        assert_eq!(*names.last().unwrap(), "head.conv.bias");
        assert_eq!(net.norms().len(), 2 + 2 + 3 + 3 + 4 + 4 * 3);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EraseNet::<f32>::new(Variant::EraseNet3, 0.125, 9).unwrap();
        let b = EraseNet::<f32>::new(Variant::EraseNet3, 0.125, 9).unwrap();
        let c = EraseNet::<f32>::new(Variant::EraseNet3, 0.125, 10).unwrap();
        let eq = |x: &EraseNet<f32>, y: &EraseNet<f32>| {
            x.params()
                .iter()
                .zip(y.params().iter())
                .all(|(p, q)| p.value == q.value)
        };
        assert!(eq(&a, &b));
        assert!(!eq(&a, &c));
    }

    #[test]
    fn mini_forward_shapes_and_range() {
        let net = EraseNet::<f64>::from_spec(mini(), 3).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, 8, 8).unwrap(), |i| (i % 7) as f64 / 7.0);
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = EraseNet::<f32>::new(Variant::EraseNet4, 0.0625, 0).unwrap();
        let x = Tensor::zeros(Shape::new(1, 1, 250, 250).unwrap());
        let msg = net.predict(&x).unwrap_err().to_string();
        assert!(msg.contains("250x250") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = EraseNet::<f64>::from_spec(mini(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(Shape::new(2, 1, 8, 8).unwrap(), |i| (i % 5) as f64),
            false,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward_train(&mut tape, x, &mut rng).unwrap();
        assert_eq!(out.params.len(), net.params().len());
        assert!(net.norms().iter().all(|n| n.state.updates == 1));
    }

    #[test]
    fn eager_and_tape_inference_agree() {
        let net = EraseNet::<f64>::from_spec(mini(), 5).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8).unwrap(), |i| {
            ((i * 37) % 11) as f64 / 11.0
        });
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let yt = net.forward_infer(&mut tape, &xv).unwrap();
        assert_eq!(tape.value(yt), &net.predict(&x).unwrap());
    }
}
