//! Sequential model graphs with plain or overparameterized filtering layers.

mod arch;
mod serialize;
mod transfer;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, ParamClass, ParamId, ParamStore, Tape, Var};
use crate::kflo::{self, collapse_on_tape, feature_filter_oracle, FlopCount, KfloBlock, KfloConfig, KfloError};
use crate::tensor::{self, max_relative_deviation, ConvGeometry, Scalar, Tensor, TensorError};

pub use arch::{build_lenet5, build_smallcnn, Arch};
pub use serialize::{FORMAT_MAGIC, FORMAT_VERSION};
pub use transfer::{tl_init, TlReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x}){}", layer_suffix(.layer))]
    Checksum {
        stored: u32,
        computed: u32,
        layer: Option<String>,
    },
    #[error("expected a {expected} model, found {found}")]
    Mode { expected: Mode, found: Mode },
    #[error("malformed model: {0}")]
    Structure(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kflo(#[from] KfloError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn layer_suffix(layer: &Option<String>) -> String {
    match layer {
        Some(name) => format!(" in layer {name}"),
        None => String::new(),
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Filtering layers may carry an overparameterized block.
    Training,
    /// Every filtering layer holds a single kernel.
    Deployed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Training => "training",
            Mode::Deployed => "deployed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Fc,
    Relu,
    /// Non-overlapping max pooling; the window equals the geometry's stride.
    MaxPool2d,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn is_filtering(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Fc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    None,
    Plain {
        kernel: ParamId,
        bias: ParamId,
    },
    Kflo {
        w1: ParamId,
        cascade: Vec<ParamId>,
        bias: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    name: String,
    kind: LayerKind,
    geom: ConvGeometry,
    params: NodeParams,
}

impl LayerNode {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn is_kflo(&self) -> bool {
        matches!(self.params, NodeParams::Kflo { .. })
    }
}

/// Layer description consumed by [`ModelGraph::build`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
    },
    Fc {
        name: String,
        out_features: usize,
    },
    Relu,
    MaxPool {
        window: (usize, usize),
    },
    GlobalAvgPool,
}

/// Kernels used by inference, computed once from a parameter snapshot.
#[derive(Debug, Clone)]
pub struct EffectiveKernels<T: Scalar = f32> {
    version: u64,
    collapsed: Vec<Option<Tensor<T>>>,
}

/// Output of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    /// Collapsed kernels of the overparameterized layers, in layer order.
    pub collapsed: Vec<Var>,
}

/// Per-layer agreement between the collapsed kernel and the feature-filtering
/// cascade on the same layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeviation {
    pub name: String,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Scalar = f32> {
    input_shape: Option<Vec<usize>>,
    nodes: Vec<LayerNode>,
    params: ParamStore<T>,
    mode: Mode,
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds a training-mode graph for `input_shape = [c, h, w]`, validating
    /// shapes layer by layer. Filtering layers are overparameterized when
    /// `kflo.depth > 1`. Initialization is deterministic in `seed`.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], kflo: KfloConfig, seed: u64) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(ModelError::Config(format!(
                "input shape must be [channels, height, width], got {input_shape:?}"
            )));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut nodes = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        let (mut relus, mut pools) = (0, 0);
        for spec in specs {
            let node = match spec {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel,
                    geom,
                } => {
                    if shape.len() != 3 {
                        return Err(ModelError::Config(format!("{name}: convolution needs a [c, h, w] input, got {shape:?}")));
                    }
                    let (h, w) = geom
                        .output_size((shape[1], shape[2]), *kernel)
                        .map_err(|e| ModelError::Config(format!("{name}: {e}")))?;
                    let block = kflo::expand::<T>(*out_channels, shape[0], *kernel, *geom, kflo.depth, kflo.rho, master.gen())
                        .map_err(|e| ModelError::Config(format!("{name}: {e}")))?;
                    let fan_in = shape[0] / geom.groups * kernel.0 * kernel.1;
                    let bias = kflo::fan_in_uniform_with(&[*out_channels], fan_in, &mut master);
                    shape = vec![*out_channels, h, w];
                    register(&mut params, name, LayerKind::Conv2d, *geom, block, bias)
                }
                LayerSpec::Fc { name, out_features } => {
                    let fan_in: usize = shape.iter().product();
                    let block = kflo::expand_linear::<T>(*out_features, fan_in, kflo.depth, kflo.rho, master.gen())
                        .map_err(|e| ModelError::Config(format!("{name}: {e}")))?;
                    let bias = kflo::fan_in_uniform_with(&[*out_features], fan_in, &mut master);
                    shape = vec![*out_features];
                    register(&mut params, name, LayerKind::Fc, ConvGeometry::trivial(), block, bias)
                }
                LayerSpec::Relu => {
                    relus += 1;
                    parameterless(format!("relu{relus}"), LayerKind::Relu, ConvGeometry::trivial())
                }
                LayerSpec::MaxPool { window } => {
                    pools += 1;
                    if shape.len() != 3 || window.0 > shape[1] || window.1 > shape[2] || window.0 == 0 || window.1 == 0 {
                        return Err(ModelError::Config(format!("pool{pools}: window {window:?} on {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / window.0, shape[2] / window.1];
                    let geom = ConvGeometry::trivial().with_stride(window.0, window.1);
                    parameterless(format!("pool{pools}"), LayerKind::MaxPool2d, geom)
                }
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(ModelError::Config(format!("global_avg_pool on {shape:?}")));
                    }
                    shape = vec![shape[0]];
                    parameterless("gap".to_string(), LayerKind::GlobalAvgPool, ConvGeometry::trivial())
                }
            };
            if nodes.iter().any(|n: &LayerNode| n.name == node.name) {
                return Err(ModelError::Config(format!("duplicate layer name {}", node.name)));
            }
            nodes.push(node);
        }
        if shape.len() != 1 {
            return Err(ModelError::Config(format!("model must end in a vector output, ends at {shape:?}")));
        }
        Ok(Self {
            input_shape: Some(input_shape.to_vec()),
            nodes,
            params,
            mode: Mode::Training,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    /// Declared `[c, h, w]` input shape, when known (files do not record it).
    pub fn input_shape(&self) -> Option<&[usize]> {
        self.input_shape.as_deref()
    }

    pub fn set_input_shape(&mut self, shape: Vec<usize>) {
        self.input_shape = Some(shape);
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same graph with another parameter store of identical layout.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        let same = params.len() == self.params.len()
            && self.params.ids().all(|id| params.value(id).shape() == self.params.value(id).shape());
        if !same {
            return Err(ModelError::Structure("parameter layout differs from the graph".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter count of the deployed form, computed without collapsing.
    pub fn deployed_param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.params {
                NodeParams::None => 0,
                NodeParams::Plain { kernel, bias } => self.params.value(*kernel).numel() + self.params.value(*bias).numel(),
                NodeParams::Kflo { w1, bias, .. } => {
                    let ch_out = self.params.value(*bias).numel();
                    let w1 = self.params.value(*w1);
                    ch_out * (w1.numel() / w1.shape()[0]) + ch_out
                }
            })
            .sum()
    }

    /// Number of scalars in cascade kernels.
    pub fn cascade_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, s)| s.class() == ParamClass::Cascade)
            .map(|(_, s)| s.value().numel())
            .sum()
    }

    pub fn has_kflo(&self) -> bool {
        self.nodes.iter().any(LayerNode::is_kflo)
    }

    /// Snapshot of one layer's overparameterized block.
    pub fn kflo_block(&self, index: usize) -> Option<KfloBlock<T>> {
        let node = &self.nodes[index];
        match &node.params {
            NodeParams::Kflo { w1, cascade, bias } => {
                let cascade = cascade.iter().map(|id| self.params.value(*id).clone()).collect();
                let w1 = self.params.value(*w1).clone();
                let rho = w1.shape()[0] as f64 / self.params.value(*bias).numel() as f64;
                KfloBlock::new(w1, cascade, node.geom, rho).ok()
            }
            _ => None,
        }
    }

    /// Writes the base kernel and cascade of a block back into the store.
    pub fn set_kflo_block(&mut self, index: usize, block: &KfloBlock<T>) -> Result<()> {
        let NodeParams::Kflo { w1, cascade, .. } = &self.nodes[index].params else {
            return Err(ModelError::Structure(format!("{} is not overparameterized", self.nodes[index].name)));
        };
        self.params.set_value(*w1, block.w1().clone())?;
        for (id, k) in cascade.iter().zip(block.cascade()) {
            self.params.set_value(*id, k.clone())?;
        }
        Ok(())
    }

    /// Kernel that filters the layer input, collapsing when needed.
    fn effective_kernel(&self, index: usize) -> Result<Option<Tensor<T>>> {
        Ok(match &self.nodes[index].params {
            NodeParams::None => None,
            NodeParams::Plain { kernel, .. } => Some(self.params.value(*kernel).clone()),
            NodeParams::Kflo { w1, cascade, .. } => {
                let cascade: Vec<_> = cascade.iter().map(|id| self.params.value(*id).clone()).collect();
                Some(kflo::collapse_parts(self.params.value(*w1), &cascade)?)
            }
        })
    }

    /// Collapses every overparameterized layer for the current parameter version.
    pub fn effective_kernels(&self) -> Result<EffectiveKernels<T>> {
        let collapsed = (0..self.nodes.len())
            .map(|i| {
                if self.nodes[i].is_kflo() {
                    self.effective_kernel(i)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(EffectiveKernels {
            version: self.params.version(),
            collapsed,
        })
    }

    /// Inference forward pass. Collapses once per call.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let kernels = self.effective_kernels()?;
        self.forward_with(&kernels, input)
    }

    /// Inference forward pass reusing kernels from [`Self::effective_kernels`].
    pub fn forward_with(&self, kernels: &EffectiveKernels<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        if kernels.version != self.params.version() || kernels.collapsed.len() != self.nodes.len() {
            return Err(ModelError::Structure("collapsed kernels are stale".into()));
        }
        let mut x = input.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            x = match &node.params {
                NodeParams::Kflo { bias, .. } => {
                    let k = kernels.collapsed[i].as_ref().expect("collapsed kernel for block");
                    apply_filter(node, &x, k, self.params.value(*bias))?
                }
                NodeParams::Plain { kernel, bias } => {
                    apply_filter(node, &x, self.params.value(*kernel), self.params.value(*bias))?
                }
                NodeParams::None => apply_parameterless(node, &x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass where every block runs its cascade over the feature maps
    /// instead of over the kernel. Verification only.
    pub fn forward_feature_filtering(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            x = match &node.params {
                NodeParams::Kflo { bias, .. } => {
                    let block = self.kflo_block(i).expect("valid block");
                    let x_in = flatten_for(node, &x)?;
                    let y = feature_filter_oracle(&x_in, &block)?;
                    autodiff::bias_add(&y, self.params.value(*bias))?
                }
                NodeParams::Plain { kernel, bias } => {
                    apply_filter(node, &x, self.params.value(*kernel), self.params.value(*bias))?
                }
                NodeParams::None => apply_parameterless(node, &x)?,
            };
        }
        Ok(x)
    }

    /// Runs the collapsed forward pass and, at every block, compares the
    /// collapsed layer output with the feature-filtering output for the same
    /// layer input.
    pub fn layer_deviations(&self, input: &Tensor<T>) -> Result<Vec<LayerDeviation>> {
        let kernels = self.effective_kernels()?;
        let mut out = Vec::new();
        let mut x = input.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            x = match &node.params {
                NodeParams::Kflo { bias, .. } => {
                    let k = kernels.collapsed[i].as_ref().expect("collapsed kernel for block");
                    let y = apply_filter(node, &x, k, self.params.value(*bias))?;
                    let block = self.kflo_block(i).expect("valid block");
                    let oracle = autodiff::bias_add(&feature_filter_oracle(&flatten_for(node, &x)?, &block)?, self.params.value(*bias))?;
                    out.push(LayerDeviation {
                        name: node.name.clone(),
                        deviation: max_relative_deviation(&y, &oracle),
                    });
                    y
                }
                NodeParams::Plain { kernel, bias } => {
                    apply_filter(node, &x, self.params.value(*kernel), self.params.value(*bias))?
                }
                NodeParams::None => apply_parameterless(node, &x)?,
            };
        }
        Ok(out)
    }

    /// Records the forward pass on `tape` using `params` (which must share
    /// this graph's parameter layout). Blocks are collapsed on the tape.
    pub fn forward_on_tape(&self, params: &ParamStore<T>, tape: &mut Tape<T>, input: Var) -> Result<TapeForward> {
        let mut x = input;
        let mut collapsed = Vec::new();
        for node in &self.nodes {
            x = match &node.params {
                NodeParams::None => match node.kind {
                    LayerKind::Relu => tape.relu(x),
                    LayerKind::MaxPool2d => tape.maxpool2d(x, node.geom.stride, node.geom.stride)?,
                    LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                    _ => unreachable!("filtering layers carry parameters"),
                },
                NodeParams::Plain { kernel, bias } => {
                    let k = tape.param(params, *kernel);
                    let b = tape.param(params, *bias);
                    filter_on_tape(tape, node, x, k, b)?
                }
                NodeParams::Kflo { w1, cascade, bias, .. } => {
                    let w1 = tape.param(params, *w1);
                    let cascade: Vec<Var> = cascade.iter().map(|id| tape.param(params, *id)).collect();
                    let k = collapse_on_tape(tape, w1, &cascade)?;
                    collapsed.push(k);
                    let b = tape.param(params, *bias);
                    filter_on_tape(tape, node, x, k, b)?
                }
            };
        }
        Ok(TapeForward { logits: x, collapsed })
    }

    /// Replaces every block by its collapsed kernel.
    pub fn collapse_model(&self) -> Result<ModelGraph<T>> {
        if self.mode != Mode::Training {
            return Err(ModelError::Mode {
                expected: Mode::Training,
                found: self.mode,
            });
        }
        let mut params = ParamStore::new();
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let new_params = match &node.params {
                NodeParams::None => NodeParams::None,
                NodeParams::Plain { bias, .. } | NodeParams::Kflo { bias, .. } => {
                    let kernel = self.effective_kernel(i)?.expect("filtering layer");
                    NodeParams::Plain {
                        kernel: params.push(format!("{}.weight", node.name), ParamClass::Plain, kernel),
                        bias: params.push(format!("{}.bias", node.name), ParamClass::Bias, self.params.value(*bias).clone()),
                    }
                }
            };
            nodes.push(LayerNode {
                params: new_params,
                ..node.clone()
            });
        }
        Ok(ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes,
            params,
            mode: Mode::Deployed,
        })
    }

    /// MACs of one inference on a single `[c, h, w]` input with deployed kernels.
    pub fn inference_macs(&self, input_shape: &[usize]) -> Result<u64> {
        Ok(self.trace_costs(input_shape, 1)?.iter().map(|(_, c)| c.vanilla).sum())
    }

    /// Forward MAC counts of one training step per filtering layer, for a
    /// batch of `[c, h, w]` inputs.
    pub fn step_costs(&self, input_shape: &[usize], batch: usize) -> Result<Vec<(String, FlopCount)>> {
        self.trace_costs(input_shape, batch)
    }

    fn trace_costs(&self, input_shape: &[usize], batch: usize) -> Result<Vec<(String, FlopCount)>> {
        let mut shape = input_shape.to_vec();
        let mut costs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.kind {
                LayerKind::Conv2d | LayerKind::Fc => {
                    let block = match &node.params {
                        NodeParams::Kflo { .. } => self.kflo_block(i).expect("valid block"),
                        NodeParams::Plain { kernel, .. } => {
                            KfloBlock::new(self.params.value(*kernel).clone(), vec![], node.geom, 1.0)?
                        }
                        NodeParams::None => unreachable!(),
                    };
                    let spatial = if node.kind == LayerKind::Conv2d {
                        if shape.len() != 3 {
                            return Err(ModelError::Structure(format!("{}: input {shape:?}", node.name)));
                        }
                        let s = block.w1().shape();
                        let (h, w) = node.geom.output_size((shape[1], shape[2]), (s[2], s[3]))?;
                        let input = (shape[1], shape[2]);
                        shape = vec![block.out_channels(), h, w];
                        input
                    } else {
                        shape = vec![block.out_channels()];
                        (1, 1)
                    };
                    costs.push((node.name.clone(), kflo::flop_count(&block, spatial, batch)?));
                }
                LayerKind::Relu => {}
                LayerKind::MaxPool2d => {
                    shape = vec![shape[0], shape[1] / node.geom.stride.0, shape[2] / node.geom.stride.1];
                }
                LayerKind::GlobalAvgPool => shape = vec![shape[0]],
            }
        }
        Ok(costs)
    }

    /// Same graph with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            params: self.params.cast(),
            mode: self.mode,
        }
    }

    /// Short architecture summary, one line per layer.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for node in &self.nodes {
            let detail = match &node.params {
                NodeParams::None => String::new(),
                NodeParams::Plain { kernel, .. } => format!(" kernel {:?}", self.params.value(*kernel).shape()),
                NodeParams::Kflo { w1, cascade, .. } => {
                    let widths: Vec<_> = cascade.iter().map(|c| self.params.value(*c).shape()[0]).collect();
                    format!(" base {:?} cascade widths {widths:?}", self.params.value(*w1).shape())
                }
            };
            s.push_str(&format!("{:<6} {:?}{detail}\n", node.name, node.kind));
        }
        s
    }
}

fn register<T: Scalar>(
    params: &mut ParamStore<T>,
    name: &str,
    kind: LayerKind,
    geom: ConvGeometry,
    block: KfloBlock<T>,
    bias: Tensor<T>,
) -> LayerNode {
    let depth = block.depth();
    let (w1, cascade) = block.into_parts();
    let node_params = if depth == 1 {
        NodeParams::Plain {
            kernel: params.push(format!("{name}.weight"), ParamClass::Plain, w1),
            bias: params.push(format!("{name}.bias"), ParamClass::Bias, bias),
        }
    } else {
        let w1 = params.push(format!("{name}.w1"), ParamClass::BaseKernel, w1);
        let cascade = cascade
            .into_iter()
            .enumerate()
            .map(|(i, k)| params.push(format!("{name}.cascade{}", i + 2), ParamClass::Cascade, k))
            .collect();
        let bias = params.push(format!("{name}.bias"), ParamClass::Bias, bias);
        NodeParams::Kflo { w1, cascade, bias }
    };
    LayerNode {
        name: name.to_string(),
        kind,
        geom,
        params: node_params,
    }
}

fn parameterless(name: String, kind: LayerKind, geom: ConvGeometry) -> LayerNode {
    LayerNode {
        name,
        kind,
        geom,
        params: NodeParams::None,
    }
}

fn flatten_for<T: Scalar>(node: &LayerNode, x: &Tensor<T>) -> Result<Tensor<T>> {
    if node.kind == LayerKind::Fc && x.rank() != 2 {
        let b = x.shape()[0];
        Ok(x.reshape(&[b, x.numel() / b.max(1)])?)
    } else {
        Ok(x.clone())
    }
}

fn apply_filter<T: Scalar>(node: &LayerNode, x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let y = match node.kind {
        LayerKind::Conv2d => tensor::conv2d(x, kernel, &node.geom)?,
        LayerKind::Fc => tensor::fc_forward(&flatten_for(node, x)?, kernel)?,
        _ => unreachable!("only filtering layers carry kernels"),
    };
    Ok(autodiff::bias_add(&y, bias)?)
}

fn apply_parameterless<T: Scalar>(node: &LayerNode, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(match node.kind {
        LayerKind::Relu => tensor::relu(x),
        LayerKind::MaxPool2d => tensor::maxpool2d(x, node.geom.stride, node.geom.stride)?.output,
        LayerKind::GlobalAvgPool => tensor::global_avg_pool(x)?,
        _ => unreachable!("filtering layers carry parameters"),
    })
}

fn filter_on_tape<T: Scalar>(tape: &mut Tape<T>, node: &LayerNode, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = match node.kind {
        LayerKind::Conv2d => tape.conv2d(x, kernel, node.geom)?,
        LayerKind::Fc => {
            let shape = tape.value(x).shape().to_vec();
            let x = if shape.len() == 2 {
                x
            } else {
                tape.reshape(x, &[shape[0], shape[1..].iter().product()])?
            };
            tape.fc(x, kernel)?
        }
        _ => unreachable!("only filtering layers carry kernels"),
    };
    Ok(tape.bias_add(y, bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kflo: KfloConfig) -> ModelGraph<f32> {
        let specs = vec![
            LayerSpec::Conv {
                name: "c".into(),
                out_channels: 4,
                kernel: (3, 3),
                geom: ConvGeometry::trivial().with_padding(1, 1),
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: (2, 2) },
            LayerSpec::Fc {
                name: "f".into(),
                out_features: 3,
            },
        ];
        ModelGraph::build(&[2, 6, 6], &specs, kflo, 5).unwrap()
    }

    #[test]
    fn tape_and_inference_paths_agree_bitwise() {
        let m = tiny(KfloConfig::new(3, 2.0).unwrap());
        let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 7919) % 23) as f32 / 11.0 - 1.0);
        let y = m.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = m.forward_on_tape(m.params(), &mut tape, xv).unwrap();
        assert_eq!(tape.value(out.logits), &y);
        assert_eq!(out.collapsed.len(), 2);
    }

    #[test]
    fn collapse_model_keeps_outputs_and_shapes() {
        let m = tiny(KfloConfig::new(2, 4.0).unwrap());
        let vanilla = tiny(KfloConfig::VANILLA);
        let d = m.collapse_model().unwrap();
        assert_eq!(d.mode(), Mode::Deployed);
        assert!(!d.has_kflo());
        assert_eq!(d.param_count(), vanilla.param_count());
        assert_eq!(m.deployed_param_count(), vanilla.param_count());
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f32 * 0.3).sin());
        assert_eq!(m.forward(&x).unwrap(), d.forward(&x).unwrap());
        assert!(matches!(d.collapse_model(), Err(ModelError::Mode { .. })));
    }

    #[test]
    fn stale_kernels_are_rejected() {
        let mut m = tiny(KfloConfig::new(2, 1.0).unwrap());
        let k = m.effective_kernels().unwrap();
        m.params_mut().value_data_mut(ParamId(0))[0] = 0.5;
        let x = Tensor::zeros(&[1, 2, 6, 6]);
        assert!(m.forward_with(&k, &x).is_err());
    }

    #[test]
    fn build_rejects_bad_shapes() {
        let specs = vec![LayerSpec::Conv {
            name: "c".into(),
            out_channels: 4,
            kernel: (7, 7),
            geom: ConvGeometry::trivial(),
        }];
        assert!(ModelGraph::<f32>::build(&[1, 5, 5], &specs, KfloConfig::VANILLA, 0).is_err());
    }
}
