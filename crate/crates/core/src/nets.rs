//! Model definitions, initialization, training, inference, and checkpoints.
//!
//! Four presets span the batch-norm / layer-norm / dense / conv layer-type
//! axes on 16x16x1 inputs with 8 classes:
//!
//! - `cnn_bn`: Conv3x3(1-8)-BN-ReLU-Conv3x3(8-16)-BN-ReLU-AvgPool2-Flatten-
//!   Dense(1024-64)-ReLU-Dense(64-8)
//! - `cnn_ln`: the same with LayerNorm in place of BatchNorm
//! - `mlp`: Flatten-Dense(256-128)-ReLU-Dense(128-8)
//! - `cnn_wide`: `cnn_bn` with channel widths doubled
//!
//! Parameter flat-index order is fixed: layers in definition order, within a
//! layer weight, bias, gamma, beta, each row-major. This order defines the
//! global parameter index used by masking and importance analysis.

use crate::container::{self, Header};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_key, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use std::path::Path;

pub const INPUT_SIDE: usize = 16;
pub const NUM_CLASSES: usize = 8;
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the batch statistic when updating running statistics.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerType {
    Conv,
    Norm,
    Dense,
    Activation,
    Pool,
    Reshape,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    BatchNorm {
        features: usize,
    },
    LayerNorm {
        features: usize,
    },
    Relu,
    AvgPool {
        window: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// Number of trainable parameters this layer carries.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features * out_features + out_features,
            LayerSpec::BatchNorm { features } | LayerSpec::LayerNorm { features } => 2 * features,
            _ => 0,
        }
    }

    pub fn layer_type(&self) -> LayerType {
        match self {
            LayerSpec::Conv2d { .. } => LayerType::Conv,
            LayerSpec::BatchNorm { .. } | LayerSpec::LayerNorm { .. } => LayerType::Norm,
            LayerSpec::Relu => LayerType::Activation,
            LayerSpec::AvgPool { .. } => LayerType::Pool,
            LayerSpec::Flatten => LayerType::Reshape,
            LayerSpec::Dense { .. } => LayerType::Dense,
        }
    }

    fn short_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "bn",
            LayerSpec::LayerNorm { .. } => "ln",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    fn encode(&self) -> String {
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
            } => format!("conv2d({in_ch},{out_ch},{kernel})"),
            LayerSpec::BatchNorm { features } => format!("batchnorm({features})"),
            LayerSpec::LayerNorm { features } => format!("layernorm({features})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::AvgPool { window } => format!("avgpool({window})"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => format!("dense({in_features},{out_features})"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unparseable layer spec `{s}`"));
        if let Some(rest) = s.strip_suffix(')') {
            let (name, args) = rest.split_once('(').ok_or_else(bad)?;
            let nums: Vec<usize> = args
                .split(',')
                .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            return match (name, nums.as_slice()) {
                ("conv2d", [i, o, k]) => Ok(LayerSpec::Conv2d {
                    in_ch: *i,
                    out_ch: *o,
                    kernel: *k,
                }),
                ("batchnorm", [f]) => Ok(LayerSpec::BatchNorm { features: *f }),
                ("layernorm", [f]) => Ok(LayerSpec::LayerNorm { features: *f }),
                ("avgpool", [w]) => Ok(LayerSpec::AvgPool { window: *w }),
                ("dense", [i, o]) => Ok(LayerSpec::Dense {
                    in_features: *i,
                    out_features: *o,
                }),
                _ => Err(bad()),
            };
        }
        match s {
            "relu" => Ok(LayerSpec::Relu),
            "flatten" => Ok(LayerSpec::Flatten),
            _ => Err(bad()),
        }
    }
}

/// Architecture request: a named preset or an explicit layer list.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Preset(String),
    Custom(Vec<LayerSpec>),
}

impl Arch {
    pub fn preset(name: &str) -> Self {
        Arch::Preset(name.to_string())
    }

    /// Stable textual descriptor used in checkpoint headers.
    pub fn descriptor(&self) -> String {
        match self {
            Arch::Preset(name) => name.clone(),
            Arch::Custom(layers) => {
                let parts: Vec<String> = layers.iter().map(|l| l.encode()).collect();
                format!("custom:{}", parts.join("|"))
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("custom:") {
            let layers = rest
                .split('|')
                .map(LayerSpec::parse)
                .collect::<Result<Vec<_>>>()?;
            Ok(Arch::Custom(layers))
        } else {
            Ok(Arch::Preset(s.to_string()))
        }
    }
}

fn preset_layers(name: &str) -> Result<Vec<LayerSpec>> {
    use LayerSpec::*;
    let cnn = |c1: usize, c2: usize, hidden: usize, batch_norm: bool| {
        let norm = |f: usize| {
            if batch_norm {
                BatchNorm { features: f }
            } else {
                LayerNorm { features: f }
            }
        };
        vec![
            Conv2d {
                in_ch: 1,
                out_ch: c1,
                kernel: 3,
            },
            norm(c1),
            Relu,
            Conv2d {
                in_ch: c1,
                out_ch: c2,
                kernel: 3,
            },
            norm(c2),
            Relu,
            AvgPool { window: 2 },
            Flatten,
            Dense {
                in_features: c2 * 8 * 8,
                out_features: hidden,
            },
            Relu,
            Dense {
                in_features: hidden,
                out_features: NUM_CLASSES,
            },
        ]
    };
    match name {
        "cnn_bn" => Ok(cnn(8, 16, 64, true)),
        "cnn_ln" => Ok(cnn(8, 16, 64, false)),
        "cnn_wide" => Ok(cnn(16, 32, 128, true)),
        "mlp" => Ok(vec![
            Flatten,
            Dense {
                in_features: INPUT_SIDE * INPUT_SIDE,
                out_features: 128,
            },
            Relu,
            Dense {
                in_features: 128,
                out_features: NUM_CLASSES,
            },
        ]),
        other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
    }
}

pub const PRESETS: [&str; 4] = ["cnn_bn", "cnn_ln", "mlp", "cnn_wide"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeState {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

/// Validated architecture: composes shape-wise from 16x16x1 to 8 logits.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    arch: Arch,
    layers: Vec<LayerSpec>,
    names: Vec<String>,
}

impl ModelGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn descriptor(&self) -> String {
        self.arch.descriptor()
    }
}

/// Builds and shape-checks a model for 16x16x1 inputs and 8 classes.
pub fn build_model(arch: Arch) -> Result<ModelGraph> {
    let layers = match &arch {
        Arch::Preset(name) => preset_layers(name)?,
        Arch::Custom(layers) => layers.clone(),
    };
    let mut state = ShapeState::Spatial {
        c: 1,
        h: INPUT_SIDE,
        w: INPUT_SIDE,
    };
    for (i, layer) in layers.iter().enumerate() {
        let fail = |msg: String| {
            Err(Error::InvalidConfig(format!(
                "layer {i} ({}): {msg}",
                layer.short_name()
            )))
        };
        state = match (layer, state) {
            (
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                },
                ShapeState::Spatial { c, h, w },
            ) => {
                if *in_ch != c {
                    return fail(format!("expects {in_ch} input channels, got {c}"));
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return fail(format!("kernel {kernel} must be odd"));
                }
                // Same-size padding keeps h, w unchanged at stride 1.
                ShapeState::Spatial {
                    c: *out_ch,
                    h,
                    w,
                }
            }
            (LayerSpec::BatchNorm { features }, ShapeState::Spatial { c, h, w })
            | (LayerSpec::LayerNorm { features }, ShapeState::Spatial { c, h, w }) => {
                if *features != c {
                    return fail(format!("expects {features} channels, got {c}"));
                }
                ShapeState::Spatial { c, h, w }
            }
            (LayerSpec::BatchNorm { features }, ShapeState::Flat { f })
            | (LayerSpec::LayerNorm { features }, ShapeState::Flat { f }) => {
                if *features != f {
                    return fail(format!("expects {features} features, got {f}"));
                }
                ShapeState::Flat { f }
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::AvgPool { window }, ShapeState::Spatial { c, h, w }) => {
                if *window == 0 || h % window != 0 || w % window != 0 {
                    return fail(format!("window {window} does not divide {h}x{w}"));
                }
                ShapeState::Spatial {
                    c,
                    h: h / window,
                    w: w / window,
                }
            }
            (LayerSpec::Flatten, ShapeState::Spatial { c, h, w }) => {
                ShapeState::Flat { f: c * h * w }
            }
            (LayerSpec::Flatten, ShapeState::Flat { f }) => ShapeState::Flat { f },
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                ShapeState::Flat { f },
            ) => {
                if *in_features != f {
                    return fail(format!("expects {in_features} inputs, got {f}"));
                }
                ShapeState::Flat { f: *out_features }
            }
            (l, s) => {
                return fail(format!("cannot apply to state {s:?} ({})", l.short_name()));
            }
        };
    }
    match state {
        ShapeState::Flat { f } if f == NUM_CLASSES => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "architecture ends in {other:?}, expected {NUM_CLASSES} logits"
            )))
        }
    }
    let names = layers
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i:02}_{}", l.short_name()))
        .collect();
    Ok(ModelGraph {
        arch,
        layers,
        names,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn suffix(self) -> &'static str {
        match self {
            TensorKind::Weight => "weight",
            TensorKind::Bias => "bias",
            TensorKind::Gamma => "gamma",
            TensorKind::Beta => "beta",
            TensorKind::RunningMean => "running_mean",
            TensorKind::RunningVar => "running_var",
        }
    }

    /// Stable small integer used in RNG substream derivation.
    pub fn tag(self) -> u64 {
        match self {
            TensorKind::Weight => 0,
            TensorKind::Bias => 1,
            TensorKind::Gamma => 2,
            TensorKind::Beta => 3,
            TensorKind::RunningMean => 4,
            TensorKind::RunningVar => 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub layer_index: usize,
    pub layer_type: LayerType,
    pub kind: TensorKind,
    pub trainable: bool,
    pub tensor: Tensor,
}

/// Named parameter arrays in fixed enumeration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Slice of the global flat parameter index covered by one tensor.
#[derive(Debug, Clone)]
pub struct FlatSlice {
    pub entry_index: usize,
    pub layer_index: usize,
    pub layer_type: LayerType,
    pub kind: TensorKind,
    pub start: usize,
    pub len: usize,
}

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry {
        &mut self.entries[index]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn find(&self, layer_index: usize, kind: TensorKind) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.layer_index == layer_index && e.kind == kind)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Trainable tensors laid out by global index.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn set_trainable_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::InvalidConfig(format!(
                "flat vector has {} values, store has {} trainable parameters",
                flat.len(),
                self.trainable_count()
            )));
        }
        let mut off = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Global-index layout of the trainable tensors.
    pub fn flat_layout(&self) -> Vec<FlatSlice> {
        let mut out = Vec::new();
        let mut off = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if !e.trainable {
                continue;
            }
            out.push(FlatSlice {
                entry_index: i,
                layer_index: e.layer_index,
                layer_type: e.layer_type,
                kind: e.kind,
                start: off,
                len: e.tensor.numel(),
            });
            off += e.tensor.numel();
        }
        out
    }

    /// Rounds every tensor through f32, the checkpoint precision. A store
    /// that has been canonicalized compares bit-equal with itself after a
    /// save/load round trip.
    pub fn quantize_f32(&mut self) {
        for e in &mut self.entries {
            e.tensor.quantize_f32();
        }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.data() == b.tensor.data())
    }
}

/// Initializes parameters: fan-in-scaled uniform weights and biases,
/// gamma = 1, beta = 0, running mean 0 / var 1. Deterministic in `seed`.
pub fn init_params(graph: &ModelGraph, seed: u64) -> ParamStore {
    let mut entries = Vec::new();
    let mut push = |layer_index: usize,
                    layer_type: LayerType,
                    kind: TensorKind,
                    trainable: bool,
                    tensor: Tensor,
                    name: &str| {
        entries.push(ParamEntry {
            name: format!("{name}.{}", kind.suffix()),
            layer_index,
            layer_type,
            kind,
            trainable,
            tensor,
        });
    };
    for (i, layer) in graph.layers.iter().enumerate() {
        let name = graph.layer_name(i);
        let ltype = layer.layer_type();
        let uniform = |kind: TensorKind, shape: Vec<usize>, bound: f64| {
            let mut rng = Rng::new(stream_key(&[seed, i as u64, kind.tag()]));
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect();
            Tensor::new(shape, data).expect("shape/data constructed together")
        };
        match layer {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
            } => {
                let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
                let w = uniform(
                    TensorKind::Weight,
                    vec![*out_ch, *in_ch, *kernel, *kernel],
                    bound,
                );
                let b = uniform(TensorKind::Bias, vec![*out_ch], bound);
                push(i, ltype, TensorKind::Weight, true, w, name);
                push(i, ltype, TensorKind::Bias, true, b, name);
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let bound = 1.0 / (*in_features as f64).sqrt();
                let w = uniform(
                    TensorKind::Weight,
                    vec![*in_features, *out_features],
                    bound,
                );
                let b = uniform(TensorKind::Bias, vec![*out_features], bound);
                push(i, ltype, TensorKind::Weight, true, w, name);
                push(i, ltype, TensorKind::Bias, true, b, name);
            }
            LayerSpec::BatchNorm { features } => {
                push(i, ltype, TensorKind::Gamma, true, Tensor::ones(vec![*features]), name);
                push(i, ltype, TensorKind::Beta, true, Tensor::zeros(vec![*features]), name);
                push(
                    i,
                    ltype,
                    TensorKind::RunningMean,
                    false,
                    Tensor::zeros(vec![*features]),
                    name,
                );
                push(
                    i,
                    ltype,
                    TensorKind::RunningVar,
                    false,
                    Tensor::ones(vec![*features]),
                    name,
                );
            }
            LayerSpec::LayerNorm { features } => {
                push(i, ltype, TensorKind::Gamma, true, Tensor::ones(vec![*features]), name);
                push(i, ltype, TensorKind::Beta, true, Tensor::zeros(vec![*features]), name);
            }
            LayerSpec::Relu | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
        }
    }
    ParamStore { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which leaves of the forward pass participate in differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    Input,
    Params,
    InputAndParams,
}

impl GradScope {
    fn input(self) -> bool {
        matches!(self, GradScope::Input | GradScope::InputAndParams)
    }
    fn params(self) -> bool {
        matches!(self, GradScope::Params | GradScope::InputAndParams)
    }
}

/// Hook for substituting parameter tensors as they are materialized into
/// tape leaves (e.g. applying a mask draw without cloning the whole store).
/// Returning None keeps the stored tensor.
pub trait ParamOverride {
    fn materialize(&self, entry: &ParamEntry) -> Option<Tensor>;
}

/// Model wiring recorded onto a caller-owned tape.
pub struct ForwardWiring {
    pub logits: NodeId,
    /// (entry index in the ParamStore, tape node) for every parameter leaf.
    pub param_nodes: Vec<(usize, NodeId)>,
    /// (layer index, batch mean, batch var) for BatchNorm layers in train mode.
    pub bn_batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// A recorded forward pass through a model.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: NodeId,
    pub logits: NodeId,
    pub param_nodes: Vec<(usize, NodeId)>,
    pub bn_batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Records the model onto an existing tape, starting from `input` (already a
/// tape node, possibly the output of input-transform ops). `param_grads`
/// marks trainable parameter leaves as differentiation roots; `overrides`
/// can substitute parameter values (masking) as leaves are materialized.
pub fn forward_on_tape(
    graph: &ModelGraph,
    params: &ParamStore,
    tape: &mut Tape,
    input: NodeId,
    mode: Mode,
    param_grads: bool,
    overrides: Option<&dyn ParamOverride>,
) -> Result<ForwardWiring> {
    let mut param_nodes = Vec::new();
    let mut bn_batch_stats = Vec::new();

    let leaf_for = |tape: &mut Tape,
                        param_nodes: &mut Vec<(usize, NodeId)>,
                        layer_index: usize,
                        kind: TensorKind|
     -> Result<NodeId> {
        let idx = params.find(layer_index, kind).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "parameter store is missing layer {layer_index} {}",
                kind.suffix()
            ))
        })?;
        let entry = params.entry(idx);
        let mut t = match overrides.and_then(|o| o.materialize(entry)) {
            Some(t) => t,
            None => entry.tensor.clone(),
        };
        if param_grads && entry.trainable {
            t = t.with_grad();
        }
        let id = tape.leaf_trusted(t);
        param_nodes.push((idx, id));
        Ok(id)
    };

    let mut cur = input;
    for (i, layer) in graph.layers.iter().enumerate() {
        cur = match layer {
            LayerSpec::Conv2d { kernel, .. } => {
                let w = leaf_for(tape, &mut param_nodes, i, TensorKind::Weight)?;
                let b = leaf_for(tape, &mut param_nodes, i, TensorKind::Bias)?;
                let y = tape.conv2d(cur, w, kernel / 2)?;
                tape.bias_add_channels(y, b)?
            }
            LayerSpec::Dense { .. } => {
                let w = leaf_for(tape, &mut param_nodes, i, TensorKind::Weight)?;
                let b = leaf_for(tape, &mut param_nodes, i, TensorKind::Bias)?;
                let y = tape.matmul(cur, w)?;
                tape.bias_add_rows(y, b)?
            }
            LayerSpec::BatchNorm { .. } => {
                let g = leaf_for(tape, &mut param_nodes, i, TensorKind::Gamma)?;
                let be = leaf_for(tape, &mut param_nodes, i, TensorKind::Beta)?;
                match mode {
                    Mode::Train => {
                        let (y, mean, var) = tape.batch_norm_train(cur, g, be, NORM_EPS)?;
                        bn_batch_stats.push((i, mean, var));
                        y
                    }
                    Mode::Eval => {
                        let rm = params
                            .find(i, TensorKind::RunningMean)
                            .map(|k| params.entry(k).tensor.data().to_vec())
                            .ok_or_else(|| {
                                Error::InvalidConfig(format!("layer {i} missing running mean"))
                            })?;
                        let rv = params
                            .find(i, TensorKind::RunningVar)
                            .map(|k| params.entry(k).tensor.data().to_vec())
                            .ok_or_else(|| {
                                Error::InvalidConfig(format!("layer {i} missing running var"))
                            })?;
                        tape.batch_norm_eval(cur, g, be, &rm, &rv, NORM_EPS)?
                    }
                }
            }
            LayerSpec::LayerNorm { .. } => {
                let g = leaf_for(tape, &mut param_nodes, i, TensorKind::Gamma)?;
                let be = leaf_for(tape, &mut param_nodes, i, TensorKind::Beta)?;
                tape.layer_norm(cur, g, be, NORM_EPS)?
            }
            LayerSpec::Relu => tape.relu(cur)?,
            LayerSpec::AvgPool { window } => tape.avg_pool(cur, *window)?,
            LayerSpec::Flatten => tape.flatten(cur)?,
        };
    }
    Ok(ForwardWiring {
        logits: cur,
        param_nodes,
        bn_batch_stats,
    })
}

/// Runs the model forward on a batch `[n,1,16,16]`, recording a fresh tape.
pub fn forward(
    graph: &ModelGraph,
    params: &ParamStore,
    x: &Tensor,
    mode: Mode,
    scope: GradScope,
) -> Result<ForwardPass> {
    if x.shape().len() != 4 || x.shape()[1] != 1 {
        return Err(Error::shape(
            "forward",
            format!("expected [n,1,h,w] input, got {:?}", x.shape()),
        ));
    }
    let mut tape = Tape::new();
    let mut input_t = x.clone();
    if scope.input() {
        input_t = input_t.with_grad();
    }
    let input = tape.leaf(input_t)?;
    let wiring = forward_on_tape(graph, params, &mut tape, input, mode, scope.params(), None)?;
    Ok(ForwardPass {
        tape,
        input,
        logits: wiring.logits,
        param_nodes: wiring.param_nodes,
        bn_batch_stats: wiring.bn_batch_stats,
    })
}

/// Eval-mode logits for a single image (any of `[256]`, `[1,16,16]`,
/// `[1,1,16,16]`).
pub fn logits(graph: &ModelGraph, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let n = INPUT_SIDE * INPUT_SIDE;
    if x.numel() != n {
        return Err(Error::shape(
            "logits",
            format!("expected {n} pixels, got {}", x.numel()),
        ));
    }
    let batch = Tensor::new(vec![1, 1, INPUT_SIDE, INPUT_SIDE], x.data().to_vec())?;
    let out = logits_batch(graph, params, &batch)?;
    out.reshaped(vec![NUM_CLASSES])
}

/// Eval-mode logits for a batch `[n,1,16,16]` -> `[n,8]`.
pub fn logits_batch(graph: &ModelGraph, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let fp = forward(graph, params, x, Mode::Eval, GradScope::None)?;
    Ok(fp.tape.value(fp.logits).clone())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of eval-mode predictions over a dataset.
pub fn accuracy(graph: &ModelGraph, params: &ParamStore, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for chunk_start in (0..data.len()).step_by(256) {
        let end = (chunk_start + 256).min(data.len());
        let batch = data.image_batch(chunk_start..end);
        let out = logits_batch(graph, params, &batch)?;
        for (row, i) in (chunk_start..end).enumerate() {
            let pred = argmax(&out.data()[row * NUM_CLASSES..(row + 1) * NUM_CLASSES]);
            if pred == data.label(i) as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainMetrics {
    pub epochs_run: usize,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub final_loss: f64,
}

/// Minibatch SGD with cross-entropy. Deterministic given the hyper seed.
/// Returns the trained store and final accuracies (test accuracy computed on
/// `test` when given, otherwise on the training set).
pub fn train(
    graph: &ModelGraph,
    params: &ParamStore,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    hyper: &TrainHyper,
) -> Result<(ParamStore, TrainMetrics)> {
    if train_set.len() == 0 {
        return Err(Error::InvalidConfig("empty training dataset".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut params = params.clone();
    let mut last_loss = f64::NAN;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(stream_key(&[hyper.seed, epoch as u64])).shuffle(&mut order);
        for chunk in order.chunks(hyper.batch_size) {
            let x = train_set.image_batch_indices(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.label(i) as usize).collect();
            let fp = forward(graph, &params, &x, Mode::Train, GradScope::Params)?;
            let mut tape = fp.tape;
            let lsm = tape.log_softmax(fp.logits)?;
            let picked = tape.gather_rows(lsm, &y)?;
            let mean = tape.mean_all(picked)?;
            let loss = tape.scale(mean, -1.0)?;
            last_loss = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            for &(entry_idx, node) in &fp.param_nodes {
                if !params.entry(entry_idx).trainable {
                    continue;
                }
                if let Some(g) = grads.get(node) {
                    let lr = hyper.learning_rate;
                    let dst = params.entry_mut(entry_idx).tensor.data_mut();
                    for (p, gv) in dst.iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            }
            for (layer_index, mean, var) in &fp.bn_batch_stats {
                for (kind, stat) in [
                    (TensorKind::RunningMean, mean),
                    (TensorKind::RunningVar, var),
                ] {
                    let idx = params.find(*layer_index, kind).expect("bn running stat");
                    let dst = params.entry_mut(idx).tensor.data_mut();
                    for (r, &s) in dst.iter_mut().zip(stat.iter()) {
                        *r = (1.0 - RUNNING_STAT_MOMENTUM) * *r + RUNNING_STAT_MOMENTUM * s;
                    }
                }
            }
        }
    }
    let final_train_acc = accuracy(graph, &params, train_set)?;
    let final_test_acc = match test_set {
        Some(t) => accuracy(graph, &params, t)?,
        None => final_train_acc,
    };
    Ok((
        params,
        TrainMetrics {
            epochs_run: hyper.epochs,
            final_train_acc,
            final_test_acc,
            final_loss: last_loss,
        },
    ))
}

#[derive(Debug, Clone, Default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

/// Saves architecture, parameters (as f32), and training metadata.
pub fn save_checkpoint(
    graph: &ModelGraph,
    params: &ParamStore,
    meta: &TrainMeta,
    path: &Path,
) -> Result<()> {
    let mut header = Header::new();
    header.push("arch", graph.descriptor());
    header.push("seed", meta.seed.to_string());
    header.push("epochs", meta.epochs.to_string());
    header.push("final_train_acc", format!("{:.6}", meta.final_train_acc));
    header.push("final_test_acc", format!("{:.6}", meta.final_test_acc));
    let mut payload = Vec::new();
    for e in params.entries() {
        let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push("tensor", format!("{}:{}:f32", e.name, dims.join(",")));
        payload.extend_from_slice(&container::f32_bytes(e.tensor.data()));
    }
    container::write_container(path, b"RPAC", &header, &payload)
}

/// Loads a checkpoint back into a validated graph and parameter store.
/// Values are exactly the stored f32 payload, upcast to f64.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, ParamStore, TrainMeta)> {
    let (header, payload) = container::read_container(path, b"RPAC")?;
    let arch = Arch::parse(header.require("arch")?)?;
    let graph = build_model(arch)?;
    let mut params = init_params(&graph, 0);
    let tensor_lines = header.all("tensor");
    if tensor_lines.len() != params.entries().len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, architecture has {}",
            tensor_lines.len(),
            params.entries().len()
        )));
    }
    let mut offset = 0usize;
    for (i, line) in tensor_lines.iter().enumerate() {
        let parts: Vec<&str> = line.split(':').collect();
        if parts.len() != 3 || parts[2] != "f32" {
            return Err(Error::Format(format!("malformed tensor line `{line}`")));
        }
        let entry = params.entry(i);
        if parts[0] != entry.name {
            return Err(Error::Format(format!(
                "tensor {i} is `{}`, architecture expects `{}`",
                parts[0], entry.name
            )));
        }
        let dims = parts[1]
            .split(',')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad shape in `{line}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        if dims != entry.tensor.shape() {
            return Err(Error::Format(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                entry.name,
                dims,
                entry.tensor.shape()
            )));
        }
        let nbytes = entry.tensor.numel() * 4;
        if offset + nbytes > payload.len() {
            return Err(Error::Format(format!(
                "payload truncated at tensor `{}`",
                entry.name
            )));
        }
        let values = container::f32_values(&payload[offset..offset + nbytes])?;
        let shape = entry.tensor.shape().to_vec();
        params.entry_mut(i).tensor = Tensor::new(shape, values)?;
        offset += nbytes;
    }
    if offset != payload.len() {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes",
            payload.len() - offset
        )));
    }
    let meta = TrainMeta {
        seed: header
            .require("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".into()))?,
        epochs: header
            .require("epochs")?
            .parse()
            .map_err(|_| Error::Format("bad epochs".into()))?,
        final_train_acc: header
            .require("final_train_acc")?
            .parse()
            .map_err(|_| Error::Format("bad final_train_acc".into()))?,
        final_test_acc: header
            .require("final_test_acc")?
            .parse()
            .map_err(|_| Error::Format("bad final_test_acc".into()))?,
    };
    Ok((graph, params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_match_declared_sizes() {
        assert_eq!(
            LayerSpec::Dense {
                in_features: 4,
                out_features: 2
            }
            .param_count(),
            10
        );
        let mlp = init_params(&build_model(Arch::preset("mlp")).unwrap(), 0);
        assert_eq!(mlp.trainable_count(), 256 * 128 + 128 + 128 * 8 + 8);
        assert_eq!(mlp.trainable_count(), 33_928);
    }

    #[test]
    fn presets_build_and_produce_eight_logits() {
        for name in PRESETS {
            let graph = build_model(Arch::preset(name)).unwrap();
            let params = init_params(&graph, 7);
            let x = Tensor::zeros(vec![1, 1, 16, 16]);
            let out = logits_batch(&graph, &params, &x).unwrap();
            assert_eq!(out.shape(), &[1, 8], "{name}");
        }
    }

    #[test]
    fn non_composing_arch_is_rejected_with_layer_index() {
        let err = build_model(Arch::Custom(vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 100,
                out_features: 8,
            },
        ]))
        .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let graph = build_model(Arch::preset("cnn_bn")).unwrap();
        let a = init_params(&graph, 3);
        let b = init_params(&graph, 3);
        let c = init_params(&graph, 4);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn gammas_init_to_one() {
        let graph = build_model(Arch::preset("cnn_bn")).unwrap();
        let p = init_params(&graph, 0);
        for e in p.entries() {
            if e.kind == TensorKind::Gamma {
                assert!(e.tensor.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let graph = build_model(Arch::preset("mlp")).unwrap();
        let mut p = init_params(&graph, 0);
        for i in 0..p.entries().len() {
            let e = p.entry(i);
            if e.layer_index == 3 {
                let n = e.tensor.numel();
                let shape = e.tensor.shape().to_vec();
                p.entry_mut(i).tensor = Tensor::new(shape, vec![0.0; n]).unwrap();
            }
        }
        let x = Tensor::new(
            vec![256],
            (0..256).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let z = logits(&graph, &p, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_layout_covers_trainables_in_order() {
        let graph = build_model(Arch::preset("cnn_bn")).unwrap();
        let p = init_params(&graph, 1);
        let layout = p.flat_layout();
        let mut expect_start = 0;
        for s in &layout {
            assert_eq!(s.start, expect_start);
            expect_start += s.len;
        }
        assert_eq!(expect_start, p.trainable_count());
        // weight precedes bias within a layer; layers ascend.
        for w in layout.windows(2) {
            assert!(w[0].layer_index <= w[1].layer_index);
            if w[0].layer_index == w[1].layer_index {
                assert!(w[0].kind.tag() < w[1].kind.tag());
            }
        }
    }

    #[test]
    fn arch_descriptor_roundtrip() {
        let arch = Arch::Custom(vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 4,
                kernel: 3,
            },
            LayerSpec::LayerNorm { features: 4 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 256,
                out_features: 8,
            },
        ]);
        let parsed = Arch::parse(&arch.descriptor()).unwrap();
        assert_eq!(parsed, arch);
    }
}
