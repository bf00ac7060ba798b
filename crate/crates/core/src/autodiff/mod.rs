//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks the tape once in
//! reverse and accumulates parameter gradients into a [`ParamStore`].

mod gradcheck;
mod params;

use thiserror::Error;

use crate::tensor::{self, grad, ConvGeometry, Reduction, Scalar, Tensor, TensorError};

pub use gradcheck::{finite_diff_check, FdOptions, GradCheckReport, ParamCheck};
pub use params::{ParamClass, ParamId, ParamSlot, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite-difference step must lie in (0, 0.1], got {0}")]
    InvalidStep(f64),
    #[error("loss is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Constant,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    PointwiseConv1d { input: Var, kernel: Var },
    Fc { input: Var, weights: Var },
    BiasAdd { input: Var, bias: Var },
    Reshape { input: Var },
    Relu { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
        reduction: Reduction,
    },
    Sum { input: Var },
    SumSquares { input: Var },
    Scale { input: Var, factor: f64 },
    Add { lhs: Var, rhs: Var },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// First element of a value, widened. Intended for scalar losses.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0].widen()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records the current value of a parameter. Gradients flow back into
    /// `store` (or any store sharing its ids) on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), &geom)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    pub fn pointwise_conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let out = tensor::pointwise_conv1d(self.value(input), self.value(kernel))?;
        Ok(self.push(out, Op::PointwiseConv1d { input, kernel }, &[input, kernel]))
    }

    pub fn fc(&mut self, input: Var, weights: Var) -> Result<Var> {
        let out = tensor::fc_forward(self.value(input), self.value(weights))?;
        Ok(self.push(out, Op::Fc { input, weights }, &[input, weights]))
    }

    /// Adds a per-channel bias to a `[b, c, ...]` value.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = tensor::relu(self.value(input));
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let pooled = tensor::maxpool2d(self.value(input), window, stride)?;
        Ok(self.push(
            pooled.output,
            Op::MaxPool2d {
                input,
                argmax: pooled.argmax,
            },
            &[input],
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = tensor::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }, &[input]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let ce = tensor::softmax_cross_entropy(self.value(logits), labels, reduction)?;
        Ok(self.push(
            Tensor::scalar(T::narrow(ce.loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: ce.probs,
                reduction,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(T::narrow(s)), Op::Sum { input }, &[input])
    }

    /// `sum(x^2)` as a scalar.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|v| v.widen() * v.widen()).sum();
        self.push(Tensor::scalar(T::narrow(s)), Op::SumSquares { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = self.value(lhs).axpy(1.0, self.value(rhs))?;
        Ok(self.push(out, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter on the
    /// tape. Existing gradients are added to, not replaced.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                Op::Conv2d { input, kernel, geom } => {
                    if self.needs(*input) {
                        let x = self.value(*input);
                        let d = grad::conv2d_input(&g, self.value(*kernel), x.shape(), geom)?;
                        accumulate(&mut grads, *input, d)?;
                    }
                    if self.needs(*kernel) {
                        let k = self.value(*kernel);
                        let d = grad::conv2d_kernel(&g, self.value(*input), k.shape(), geom)?;
                        accumulate(&mut grads, *kernel, d)?;
                    }
                }
                Op::PointwiseConv1d { input, kernel } => {
                    let (dx, dk) = grad::pointwise_conv1d(&g, self.value(*input), self.value(*kernel))?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *kernel, dk)?;
                }
                Op::Fc { input, weights } => {
                    let (dx, dw) = grad::fc(&g, self.value(*input), self.value(*weights))?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weights, dw)?;
                }
                Op::BiasAdd { input, bias } => {
                    let db = channel_sums(&g, self.value(*bias).numel());
                    accumulate(&mut grads, *bias, db)?;
                    accumulate(&mut grads, *input, g)?;
                }
                Op::Reshape { input } => {
                    let d = g.into_reshaped(self.value(*input).shape())?;
                    accumulate(&mut grads, *input, d)?;
                }
                Op::Relu { input } => {
                    let d = grad::relu(&g, self.value(*input))?;
                    accumulate(&mut grads, *input, d)?;
                }
                Op::MaxPool2d { input, argmax } => {
                    let d = grad::maxpool2d(&g, argmax, self.value(*input).shape())?;
                    accumulate(&mut grads, *input, d)?;
                }
                Op::GlobalAvgPool { input } => {
                    let d = grad::global_avg_pool(&g, self.value(*input).shape())?;
                    accumulate(&mut grads, *input, d)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    let upstream = g.data()[0].widen();
                    let scale = match reduction {
                        Reduction::Mean => upstream / labels.len().max(1) as f64,
                        Reduction::Sum => upstream,
                    };
                    let d = grad::softmax_cross_entropy(probs, labels, scale)?;
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::Sum { input } => {
                    let d = Tensor::full(self.value(*input).shape(), g.data()[0]);
                    accumulate(&mut grads, *input, d)?;
                }
                Op::SumSquares { input } => {
                    let upstream = 2.0 * g.data()[0].widen();
                    let d = self.value(*input).scale(upstream);
                    accumulate(&mut grads, *input, d)?;
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, g.scale(*factor))?;
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, g.clone())?;
                    accumulate(&mut grads, *rhs, g)?;
                }
            }
        }
        Ok(())
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    let slot = &mut grads[var.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.axpy(1.0, &g)?,
        None => g,
    });
    Ok(())
}

fn add_channel_bias<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "bias_add";
    bias.expect_rank(OP, 1)?;
    if input.rank() < 2 || input.shape()[1] != bias.numel() {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "channels",
            expected: bias.numel(),
            actual: input.shape().get(1).copied().unwrap_or(0),
        });
    }
    let channels = bias.numel();
    let inner: usize = input.shape()[2..].iter().product();
    let b = bias.data();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| T::narrow(x.widen() + b[(i / inner) % channels].widen()))
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn channel_sums<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let inner: usize = g.shape()[2..].iter().product();
    let mut acc = vec![0.0f64; channels];
    for (i, v) in g.data().iter().enumerate() {
        acc[(i / inner) % channels] += v.widen();
    }
    Tensor::from_fn(&[channels], |c| T::narrow(acc[c]))
}

/// Non-differentiable channel-bias add used by inference paths; identical
/// values to [`Tape::bias_add`].
pub fn bias_add<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    add_channel_bias(input, bias)
}
