//! A small reverse-mode differentiation engine over layer graphs.
//!
//! A [`Network`] is a directed acyclic graph of [`LayerSpec`] nodes stored
//! in topological order. Slot 0 holds the network input; node `i` writes
//! slot `i + 1`. A forward pass records a [`Tape`] holding every slot value
//! plus whatever each primitive needs for its reverse pass, and
//! [`Tape::backward`] replays the nodes in reverse exactly once.

mod checkpoint;
mod gradcheck;
mod loss;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, check_slot_gradients, layer_probes, LayerProbe};
pub use loss::{cross_entropy_loss, soft_jaccard_loss, soft_jaccard_loss_smoothed, JACCARD_SMOOTHING};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState, PlateauSchedule};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a value slot in a network graph.
pub type Slot = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

/// One primitive layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    MaxPool2d {
        window: usize,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Activation {
        kind: Activation,
    },
    /// Concatenates all inputs along the channel axis (skip connections).
    Concat,
    Flatten,
    GlobalAvgPool,
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample {
        factor: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: 1e-5,
            momentum: 0.99,
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation {
            kind: Activation::Relu,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. }
        )
    }

    /// Per-sample output shape for the given per-sample input shapes.
    fn infer_shape(&self, name: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let fail = |detail: String| Error::Shape {
            layer: name.to_string(),
            detail,
        };
        let single = || -> Result<&[usize]> {
            if inputs.len() != 1 {
                return Err(fail(format!("expects 1 input, got {}", inputs.len())));
            }
            Ok(inputs[0])
        };
        let image = || -> Result<(usize, usize, usize)> {
            let s = single()?;
            if s.len() != 3 {
                return Err(fail(format!("expects a [C, H, W] input, got {s:?}")));
            }
            Ok((s[0], s[1], s[2]))
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = image()?;
                if c != in_ch {
                    return Err(fail(format!("expects {in_ch} input channels, got {c}")));
                }
                if kernel == 0 || stride == 0 || out_ch == 0 {
                    return Err(fail("kernel, stride and out_ch must be positive".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(fail(format!("kernel {kernel} larger than padded input {h}x{w}")));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = image()?;
                if c != in_ch {
                    return Err(fail(format!("expects {in_ch} input channels, got {c}")));
                }
                if kernel == 0 || stride == 0 || out_ch == 0 {
                    return Err(fail("kernel, stride and out_ch must be positive".into()));
                }
                let ho = (h - 1) * stride + kernel;
                let wo = (w - 1) * stride + kernel;
                if ho <= 2 * padding || wo <= 2 * padding {
                    return Err(fail("padding consumes the whole output".into()));
                }
                Ok(vec![out_ch, ho - 2 * padding, wo - 2 * padding])
            }
            LayerSpec::MaxPool2d { window } => {
                let (c, h, w) = image()?;
                if window == 0 || h < window || w < window {
                    return Err(fail(format!("window {window} does not fit {h}x{w}")));
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerSpec::BatchNorm {
                channels, epsilon, ..
            } => {
                let s = single()?;
                if s.first() != Some(&channels) {
                    return Err(fail(format!("expects {channels} channels, got {s:?}")));
                }
                if !(epsilon > 0.0) {
                    return Err(fail("epsilon must be positive".into()));
                }
                Ok(s.to_vec())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(fail(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(single()?.to_vec())
            }
            LayerSpec::Dense { inputs: i, outputs } => {
                let s = single()?;
                if s != [i] {
                    return Err(fail(format!("expects [{i}] input, got {s:?}")));
                }
                if outputs == 0 {
                    return Err(fail("outputs must be positive".into()));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Activation { kind } => {
                let s = single()?;
                if kind == Activation::Softmax && s.len() != 1 {
                    return Err(fail(format!("softmax expects a flat input, got {s:?}")));
                }
                Ok(s.to_vec())
            }
            LayerSpec::Concat => {
                if inputs.len() < 2 {
                    return Err(fail("concat needs at least two inputs".into()));
                }
                let first = inputs[0];
                let mut channels = 0;
                for s in inputs {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(fail(format!("incompatible concat inputs {inputs:?}")));
                    }
                    channels += s[0];
                }
                let mut out = first.to_vec();
                out[0] = channels;
                Ok(out)
            }
            LayerSpec::Flatten => Ok(vec![single()?.iter().product()]),
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = image()?;
                Ok(vec![c])
            }
            LayerSpec::Upsample { factor } => {
                let (c, h, w) = image()?;
                if factor == 0 {
                    return Err(fail("factor must be positive".into()));
                }
                Ok(vec![c, h * factor, w * factor])
            }
        }
    }

    /// Parameter tensors this layer owns, in declaration order.
    fn param_specs(&self) -> Vec<(&'static str, ParamKind, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    "weight",
                    ParamKind::Weight,
                    vec![out_ch, in_ch, kernel, kernel],
                )];
                if bias {
                    v.push(("bias", ParamKind::Bias, vec![out_ch]));
                }
                v
            }
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    "weight",
                    ParamKind::Weight,
                    vec![in_ch, out_ch, kernel, kernel],
                )];
                if bias {
                    v.push(("bias", ParamKind::Bias, vec![out_ch]));
                }
                v
            }
            LayerSpec::BatchNorm { channels, .. } => vec![
                ("gamma", ParamKind::Gamma, vec![channels]),
                ("beta", ParamKind::Beta, vec![channels]),
                ("running_mean", ParamKind::RunningMean, vec![channels]),
                ("running_var", ParamKind::RunningVar, vec![channels]),
            ],
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight", ParamKind::Weight, vec![outputs, inputs]),
                ("bias", ParamKind::Bias, vec![outputs]),
            ],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } | LayerSpec::ConvTranspose2d { in_ch, kernel, .. } => {
                in_ch * kernel * kernel
            }
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Non-trainable buffer.
    RunningMean,
    /// Non-trainable buffer.
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<Slot>,
    /// Marks layers whose parameters a warm-up phase may freeze.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub freezable: bool,
}

/// Serializable description of a network graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-sample input shape, `[C, H, W]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
    /// Free-form model metadata (class names, marked slots, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Architecture {
    /// Validates every node and returns the per-sample shape of each slot.
    pub fn slot_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.is_empty() || node.inputs.iter().any(|&s| s > i) {
                return Err(Error::Shape {
                    layer: node.name.clone(),
                    detail: format!("inputs {:?} must reference earlier slots", node.inputs),
                });
            }
            let ins: Vec<&[usize]> = node.inputs.iter().map(|&s| shapes[s].as_slice()).collect();
            shapes.push(node.spec.infer_shape(&node.name, &ins)?);
        }
        Ok(shapes)
    }

    pub fn output_slot(&self) -> Slot {
        self.nodes.len()
    }

    pub fn slot_of(&self, name: &str) -> Option<Slot> {
        self.nodes.iter().position(|n| n.name == name).map(|i| i + 1)
    }
}

/// Incrementally assembles an [`Architecture`], checking shapes as it goes.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    freezable: bool,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        GraphBuilder {
            arch: Architecture {
                input_shape: input_shape.to_vec(),
                nodes: Vec::new(),
                meta: BTreeMap::new(),
            },
            shapes: vec![input_shape.to_vec()],
            freezable: false,
        }
    }

    pub fn input(&self) -> Slot {
        0
    }

    /// Conv layers added while this is set are tagged freezable.
    pub fn set_freezable(&mut self, on: bool) {
        self.freezable = on;
    }

    pub fn add(&mut self, name: impl Into<String>, spec: LayerSpec, inputs: &[Slot]) -> Result<Slot> {
        let name = name.into();
        if let Some(&bad) = inputs.iter().find(|&&s| s >= self.shapes.len()) {
            return Err(Error::Shape {
                layer: name,
                detail: format!("unknown input slot {bad}"),
            });
        }
        let ins: Vec<&[usize]> = inputs.iter().map(|&s| self.shapes[s].as_slice()).collect();
        let shape = spec.infer_shape(&name, &ins)?;
        let freezable = self.freezable && spec.is_conv();
        self.arch.nodes.push(Node {
            name,
            spec,
            inputs: inputs.to_vec(),
            freezable,
        });
        self.shapes.push(shape);
        Ok(self.shapes.len() - 1)
    }

    /// Adds a single-input layer after `from`.
    pub fn then(&mut self, name: impl Into<String>, spec: LayerSpec, from: Slot) -> Result<Slot> {
        self.add(name, spec, &[from])
    }

    pub fn shape(&self, slot: Slot) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn meta(&mut self, key: &str, value: serde_json::Value) {
        self.arch.meta.insert(key.to_string(), value);
    }

    pub fn finish(self) -> Architecture {
        self.arch
    }
}

/// A named parameter or buffer tensor.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub node: usize,
    pub value: Tensor<T>,
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    /// Receives gradients and optimizer updates.
    pub fn is_updated(&self) -> bool {
        self.kind.trainable() && !self.frozen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network: architecture plus parameters.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<Param<T>>,
    /// Parameter indices per node, in `param_specs` order.
    node_params: Vec<Vec<usize>>,
}

impl<T: Real> Network<T> {
    /// Builds a network with He-uniform weights, zero biases and unit
    /// normalization scales.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        for p in &mut net.params {
            match p.kind {
                ParamKind::Weight => {
                    let fan_in = net.arch.nodes[p.node].spec.fan_in().max(1);
                    let limit = (6.0 / fan_in as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = T::lit(rng.random_range(-limit..limit));
                    }
                }
                ParamKind::Gamma | ParamKind::RunningVar => {
                    p.value.data_mut().fill(T::one());
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// Builds a network with every parameter zero (used when loading).
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let shapes = arch.slot_shapes()?;
        let mut params = Vec::new();
        let mut node_params = Vec::with_capacity(arch.nodes.len());
        for (i, node) in arch.nodes.iter().enumerate() {
            let mut ids = Vec::new();
            for (suffix, kind, shape) in node.spec.param_specs() {
                ids.push(params.len());
                params.push(Param {
                    name: format!("{}.{}", node.name, suffix),
                    kind,
                    node: i,
                    value: Tensor::zeros(&shape),
                    frozen: false,
                });
            }
            node_params.push(ids);
        }
        Ok(Network {
            arch,
            shapes,
            params,
            node_params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn architecture_mut_meta(&mut self) -> &mut BTreeMap<String, serde_json::Value> {
        &mut self.arch.meta
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("input slot always present")
    }

    pub fn slot_shape(&self, slot: Slot) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Indices of parameters belonging to freezable layers.
    pub fn freezable_params(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| self.arch.nodes[p.node].freezable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for i in self.freezable_params() {
            self.params[i].frozen = frozen;
        }
    }

    /// Slot written by the last conv-family layer, if any.
    pub fn last_conv_slot(&self) -> Option<Slot> {
        self.arch
            .nodes
            .iter()
            .rposition(|n| n.spec.is_conv())
            .map(|i| i + 1)
    }

    /// Forward pass. In train mode dropout is sampled from `rng` and
    /// batch-norm running statistics are updated.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let (out, tape) = self.run(input, mode, Some(rng), None)?;
        if mode == Mode::Train {
            self.update_running_stats(&tape);
        }
        Ok((out, tape))
    }

    /// Eval-mode forward pass without touching any state; the tape can still
    /// be replayed (used for saliency).
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.run::<rand::rngs::ThreadRng>(input, Mode::Eval, None, None)
    }

    /// Eval-mode forward with the value of `slot` replaced by `value`.
    pub fn forward_eval_with(
        &self,
        input: &Tensor<T>,
        slot: Slot,
        value: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.run::<rand::rngs::ThreadRng>(input, Mode::Eval, None, Some((slot, value)))
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_eval(input)?.0)
    }

    fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (i, saved) in tape.saved.iter().enumerate() {
            if let Saved::BnTrain(bn) = saved {
                let LayerSpec::BatchNorm { momentum, .. } = self.arch.nodes[i].spec else {
                    continue;
                };
                let m = T::lit(momentum);
                let ids = &self.node_params[i];
                let (mean_id, var_id) = (ids[2], ids[3]);
                for (r, &b) in self.params[mean_id].value.data_mut().iter_mut().zip(&bn.batch_mean) {
                    *r = m * *r + (T::one() - m) * b;
                }
                for (r, &b) in self.params[var_id].value.data_mut().iter_mut().zip(&bn.batch_var) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
    }

    fn run<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut R>,
        replace: Option<(Slot, &Tensor<T>)>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        if input.shape().len() != self.arch.input_shape.len() + 1
            || input.shape()[1..] != self.arch.input_shape[..]
        {
            return Err(Error::Shape {
                layer: "input".into(),
                detail: format!(
                    "expected [N, {:?}], got {:?}",
                    self.arch.input_shape,
                    input.shape()
                ),
            });
        }
        if input.batch() == 0 {
            return Err(Error::arg("empty batch"));
        }
        let n = input.batch();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.arch.nodes.len() + 1);
        values.push(match replace {
            Some((0, v)) => v.clone(),
            _ => input.clone(),
        });
        let mut saved = Vec::with_capacity(self.arch.nodes.len());
        for (i, node) in self.arch.nodes.iter().enumerate() {
            let x = &values[node.inputs[0]];
            let p = |j: usize| &self.params[self.node_params[i][j]].value;
            let (out, s) = match node.spec {
                LayerSpec::Conv2d {
                    stride,
                    padding,
                    bias,
                    ..
                } => (
                    ops::conv2d_forward(x, p(0), bias.then(|| p(1)), stride, padding),
                    Saved::None,
                ),
                LayerSpec::ConvTranspose2d {
                    stride,
                    padding,
                    bias,
                    ..
                } => (
                    ops::conv_transpose_forward(x, p(0), bias.then(|| p(1)), stride, padding),
                    Saved::None,
                ),
                LayerSpec::MaxPool2d { window } => {
                    let (y, arg) = ops::maxpool_forward(x, window);
                    (y, Saved::Argmax(arg))
                }
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let eps = T::lit(epsilon);
                    match mode {
                        Mode::Train => {
                            let (y, bn) = ops::batchnorm_train(x, p(0).data(), p(1).data(), eps);
                            (y, Saved::BnTrain(bn))
                        }
                        Mode::Eval => {
                            let (y, inv) = ops::batchnorm_eval(
                                x,
                                p(0).data(),
                                p(1).data(),
                                p(2).data(),
                                p(3).data(),
                                eps,
                            );
                            (y, Saved::BnEval(inv))
                        }
                    }
                }
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Eval || rate == 0.0 {
                        (x.clone(), Saved::None)
                    } else {
                        let rng = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::Usage("train mode needs an rng".into()))?;
                        let keep = T::lit(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| {
                                if rng.random::<f64>() >= rate {
                                    keep
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        let y = Tensor::from_vec(
                            x.shape(),
                            x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
                        );
                        (y, Saved::Mask(mask))
                    }
                }
                LayerSpec::Dense { .. } => (ops::dense_forward(x, p(0), p(1)), Saved::None),
                LayerSpec::Activation { kind } => {
                    let y = match kind {
                        Activation::Relu => x.map(|v| v.max(T::zero())),
                        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
                        Activation::Softmax => ops::softmax_forward(x),
                    };
                    (y, Saved::None)
                }
                LayerSpec::Concat => {
                    let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&s| &values[s]).collect();
                    (ops::concat_forward(&parts), Saved::None)
                }
                LayerSpec::Flatten => {
                    let y = x.clone().reshape(&[n, x.item_len()]);
                    (y, Saved::None)
                }
                LayerSpec::GlobalAvgPool => (ops::global_avg_pool_forward(x), Saved::None),
                LayerSpec::Upsample { factor } => (ops::upsample_forward(x, factor), Saved::None),
            };
            let out = match replace {
                Some((slot, v)) if slot == i + 1 => {
                    if v.shape() != out.shape() {
                        return Err(Error::Shape {
                            layer: node.name.clone(),
                            detail: format!("replacement {:?} vs {:?}", v.shape(), out.shape()),
                        });
                    }
                    v.clone()
                }
                _ => out,
            };
            values.push(out);
            saved.push(s);
        }
        let out = values.last().expect("at least the input").clone();
        Ok((
            out,
            Tape {
                values,
                saved,
                consumed: false,
                node_count: self.arch.nodes.len(),
            },
        ))
    }
}

enum Saved<T: Real> {
    None,
    Argmax(Vec<u32>),
    BnTrain(ops::BnSaved<T>),
    BnEval(Vec<T>),
    Mask(Vec<T>),
}

/// Record of one forward pass: every slot value plus per-node saved state.
pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    consumed: bool,
    node_count: usize,
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    /// One entry per network parameter; `None` for frozen parameters and
    /// non-trainable buffers.
    pub params: Vec<Option<Tensor<T>>>,
    /// Gradient with respect to the network input.
    pub input: Tensor<T>,
    retained: Vec<(Slot, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient at a slot requested via [`Tape::backward_retaining`].
    pub fn slot(&self, slot: Slot) -> Option<&Tensor<T>> {
        self.retained.iter().find(|(s, _)| *s == slot).map(|(_, t)| t)
    }
}

impl<T: Real> Tape<T> {
    /// Value held by a slot during the recorded pass.
    pub fn value(&self, slot: Slot) -> &Tensor<T> {
        &self.values[slot]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("input slot always present")
    }

    pub fn backward(&mut self, net: &Network<T>, output_grad: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_retaining(net, output_grad, &[])
    }

    /// Reverse pass that additionally returns the gradient arriving at each
    /// slot in `retain`.
    pub fn backward_retaining(
        &mut self,
        net: &Network<T>,
        output_grad: &Tensor<T>,
        retain: &[Slot],
    ) -> Result<Gradients<T>> {
        let last = self.values.len() - 1;
        self.backward_from(net, last, output_grad, retain)
    }

    /// Reverse pass seeded with `grad` at an arbitrary slot; layers after
    /// that slot are ignored.
    pub fn backward_from(
        &mut self,
        net: &Network<T>,
        seed: Slot,
        grad: &Tensor<T>,
        retain: &[Slot],
    ) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        if self.node_count != net.arch.nodes.len() {
            return Err(Error::Usage("tape was recorded by a different network".into()));
        }
        if seed >= self.values.len() {
            return Err(Error::arg(format!("slot {seed} does not exist")));
        }
        if grad.shape() != self.values[seed].shape() {
            return Err(Error::arg(format!(
                "gradient shape {:?} does not match slot {seed} value {:?}",
                grad.shape(),
                self.values[seed].shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[seed] = Some(grad.clone());
        let mut param_grads: Vec<Option<Tensor<T>>> = net
            .params
            .iter()
            .map(|p| p.is_updated().then(|| Tensor::zeros(p.value.shape())))
            .collect();
        let mut retained = Vec::new();

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..net.arch.nodes.len()).rev() {
            let slot = i + 1;
            let Some(gout) = grads[slot].take() else {
                continue;
            };
            if retain.contains(&slot) {
                retained.push((slot, gout.clone()));
            }
            let node = &net.arch.nodes[i];
            let ids = &net.node_params[i];
            let x = &self.values[node.inputs[0]];
            let wants = |j: usize| param_grads[ids[j]].is_some();
            let set_param = |j: usize, g: Tensor<T>, pg: &mut Vec<Option<Tensor<T>>>| {
                if let Some(slot) = pg[ids[j]].as_mut() {
                    slot.add_assign(&g);
                }
            };
            let dx = match (&node.spec, &self.saved[i]) {
                (LayerSpec::Conv2d { stride, padding, bias, .. }, _) => {
                    let want = wants(0) || (*bias && wants(1));
                    let g = ops::conv2d_backward(x, &net.params[ids[0]].value, *bias, &gout, *stride, *padding, want);
                    if let Some(dw) = g.dw {
                        set_param(0, dw, &mut param_grads);
                    }
                    if let Some(db) = g.db {
                        set_param(1, db, &mut param_grads);
                    }
                    g.dx
                }
                (LayerSpec::ConvTranspose2d { stride, padding, bias, .. }, _) => {
                    let want = wants(0) || (*bias && wants(1));
                    let g = ops::conv_transpose_backward(x, &net.params[ids[0]].value, *bias, &gout, *stride, *padding, want);
                    if let Some(dw) = g.dw {
                        set_param(0, dw, &mut param_grads);
                    }
                    if let Some(db) = g.db {
                        set_param(1, db, &mut param_grads);
                    }
                    g.dx
                }
                (LayerSpec::MaxPool2d { .. }, Saved::Argmax(arg)) => ops::maxpool_backward(x.shape(), arg, &gout),
                (LayerSpec::BatchNorm { .. }, saved) => {
                    let gamma = net.params[ids[0]].value.data();
                    let (dx, dgamma, dbeta) = match saved {
                        Saved::BnTrain(bn) => ops::batchnorm_train_backward(bn, gamma, &gout),
                        Saved::BnEval(inv) => ops::batchnorm_eval_backward(
                            x,
                            net.params[ids[2]].value.data(),
                            inv,
                            gamma,
                            &gout,
                        ),
                        _ => unreachable!("batch norm always saves statistics"),
                    };
                    let c = dgamma.len();
                    set_param(0, Tensor::from_vec(&[c], dgamma), &mut param_grads);
                    set_param(1, Tensor::from_vec(&[c], dbeta), &mut param_grads);
                    dx
                }
                (LayerSpec::Dropout { .. }, Saved::Mask(mask)) => Tensor::from_vec(
                    gout.shape(),
                    gout.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                ),
                (LayerSpec::Dropout { .. }, _) => gout,
                (LayerSpec::Dense { .. }, _) => {
                    let want = wants(0) || wants(1);
                    let g = ops::dense_backward(x, &net.params[ids[0]].value, &gout, want);
                    if let Some(dw) = g.dw {
                        set_param(0, dw, &mut param_grads);
                    }
                    if let Some(db) = g.db {
                        set_param(1, db, &mut param_grads);
                    }
                    g.dx
                }
                (LayerSpec::Activation { kind }, _) => {
                    let y = &self.values[slot];
                    match kind {
                        Activation::Relu => Tensor::from_vec(
                            gout.shape(),
                            gout.data()
                                .iter()
                                .zip(y.data())
                                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                                .collect(),
                        ),
                        Activation::Sigmoid => Tensor::from_vec(
                            gout.shape(),
                            gout.data()
                                .iter()
                                .zip(y.data())
                                .map(|(&g, &v)| g * v * (T::one() - v))
                                .collect(),
                        ),
                        Activation::Softmax => ops::softmax_backward(y, &gout),
                    }
                }
                (LayerSpec::Concat, _) => {
                    let shapes: Vec<Vec<usize>> =
                        node.inputs.iter().map(|&s| self.values[s].shape().to_vec()).collect();
                    let parts = ops::concat_backward(&shapes, &gout);
                    for (&s, g) in node.inputs.iter().zip(parts) {
                        accumulate(&mut grads[s], g);
                    }
                    continue;
                }
                (LayerSpec::Flatten, _) => gout.reshape(x.shape()),
                (LayerSpec::GlobalAvgPool, _) => ops::global_avg_pool_backward(x.shape(), &gout),
                (LayerSpec::Upsample { factor }, _) => ops::upsample_backward(x.shape(), &gout, *factor),
                (LayerSpec::MaxPool2d { .. }, _) => unreachable!("max pool always saves argmax"),
            };
            accumulate(&mut grads[node.inputs[0]], dx);
        }
        if retain.contains(&0) {
            if let Some(g) = &grads[0] {
                retained.push((0, g.clone()));
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.values[0].shape()));
        Ok(Gradients {
            params: param_grads,
            input,
            retained,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn single_conv(kernel: &[f64], k: usize) -> Network<f64> {
        let mut b = GraphBuilder::new(&[1, 3, 3]);
        b.then(
            "conv",
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: k,
                stride: 1,
                padding: 0,
                bias: false,
            },
            0,
        )
        .unwrap();
        let mut net = Network::zeroed(b.finish()).unwrap();
        net.params_mut()[0].value.data_mut().copy_from_slice(kernel);
        net
    }

    #[test]
    fn conv_forward_examples() {
        let x = Tensor::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let net = single_conv(&[1.0; 4], 2);
        assert_eq!(net.predict(&x).unwrap().data(), &[12.0, 16.0, 24.0, 28.0]);

        let id = single_conv(&[1.0], 1);
        assert_eq!(id.predict(&x).unwrap().data(), x.data());

        let zero = single_conv(&[0.0; 4], 2);
        assert!(zero.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut b = GraphBuilder::new(&[3, 8, 8]);
        let err = b
            .then("stem", LayerSpec::conv(1, 4, 3), 0)
            .unwrap_err();
        match err {
            Error::Shape { layer, .. } => assert_eq!(layer, "stem"),
            other => panic!("unexpected {other:?}"),
        }
        let net = single_conv(&[1.0; 4], 2);
        let bad = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(matches!(net.predict(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut b = GraphBuilder::new(&[4]);
        assert!(b.then("drop", LayerSpec::Dropout { rate: 1.0 }, 0).is_err());
    }

    #[test]
    fn dense_gradient_is_outer_product() {
        let mut b = GraphBuilder::new(&[3]);
        b.then("fc", LayerSpec::Dense { inputs: 3, outputs: 2 }, 0).unwrap();
        let mut net = Network::<f64>::new(b.finish(), &mut rng()).unwrap();
        let x = Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]);
        let (_, mut tape) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let g = Tensor::from_f64(&[1, 2], &[3.0, -1.0]);
        let grads = tape.backward(&net, &g).unwrap();
        let dw = grads.params[0].as_ref().unwrap();
        assert_eq!(dw.data(), &[3.0, -6.0, 1.5, -1.0, 2.0, -0.5]);
        assert_eq!(grads.params[1].as_ref().unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut b = GraphBuilder::new(&[1, 4, 4]);
        let c = b.then("c", LayerSpec::conv(1, 2, 3), 0).unwrap();
        let f = b.then("f", LayerSpec::Flatten, c).unwrap();
        b.then("d", LayerSpec::Dense { inputs: 32, outputs: 2 }, f).unwrap();
        let mut net = Network::<f64>::new(b.finish(), &mut rng()).unwrap();
        let x = Tensor::full(&[2, 1, 4, 4], 0.5);
        let (y, mut tape) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let grads = tape.backward(&net, &Tensor::zeros(y.shape())).unwrap();
        for g in grads.params.iter().flatten() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tape_cannot_be_replayed() {
        let net = single_conv(&[1.0; 4], 2);
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let (y, mut tape) = net.forward_eval(&x).unwrap();
        tape.backward(&net, &y).unwrap();
        assert!(matches!(tape.backward(&net, &y), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_parameters_report_no_gradient() {
        let mut b = GraphBuilder::new(&[1, 4, 4]);
        b.set_freezable(true);
        let c = b.then("c", LayerSpec::conv(1, 2, 3), 0).unwrap();
        b.set_freezable(false);
        let g = b.then("gap", LayerSpec::GlobalAvgPool, c).unwrap();
        b.then("d", LayerSpec::Dense { inputs: 2, outputs: 2 }, g).unwrap();
        let mut net = Network::<f64>::new(b.finish(), &mut rng()).unwrap();
        assert_eq!(net.freezable_params(), vec![0, 1]);
        net.set_frozen(true);
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let (y, mut tape) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let grads = tape.backward(&net, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert!(grads.params[0].is_none() && grads.params[1].is_none());
        assert!(grads.params[2].is_some() && grads.params[3].is_some());
    }

    #[test]
    fn eval_dropout_is_identity_and_train_preserves_mean() {
        let mut b = GraphBuilder::new(&[1000]);
        b.then("drop", LayerSpec::Dropout { rate: 0.3 }, 0).unwrap();
        let mut net = Network::<f64>::new(b.finish(), &mut rng()).unwrap();
        let x = Tensor::full(&[10, 1000], 1.0);
        assert_eq!(net.predict(&x).unwrap(), x);
        let (y, _) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut b = GraphBuilder::new(&[2, 2, 2]);
        b.then("bn", LayerSpec::batch_norm(2), 0).unwrap();
        let mut net = Network::<f64>::new(b.finish(), &mut rng()).unwrap();
        let x = Tensor::from_f64(&[2, 2, 2, 2], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let a = net.predict(&x).unwrap();
        let b2 = net.predict(&x).unwrap();
        assert_eq!(a, b2);
        // f(2x) - f(x) == f(x) - f(0) for an affine map
        let z = Tensor::zeros(x.shape());
        let x2 = x.map(|v| 2.0 * v);
        let (fz, fx, f2x) = (net.predict(&z).unwrap(), a, net.predict(&x2).unwrap());
        for i in 0..16 {
            let lhs = f2x.data()[i] - fx.data()[i];
            let rhs = fx.data()[i] - fz.data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
