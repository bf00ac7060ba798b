//! Kernel-filtering overparameterization of a single filtering layer.
//!
//! A [`KfloBlock`] holds a base kernel `W1` of shape `[ch2, rest..]` and a
//! cascade of pointwise kernels `[ch_{i+1}, ch_i, 1]`. The effective kernel is
//! obtained by viewing `W1` as a one-sample signal `[1, ch2, prod(rest)]`,
//! running it through the cascade with [`pointwise_conv1d`], and viewing the
//! result as `[ch_out, rest..]` again. The same computation applied to the
//! layer's feature maps (the vanilla cascade) gives identical outputs; that
//! path is [`feature_filter_oracle`] and exists for verification only.
//!
//! `rest` is `[ch_in / groups, M, N]` for convolutions and `[ch_in]` for fully
//! connected layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::tensor::{conv2d, fc_forward, pointwise_conv1d, ConvGeometry, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KfloError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = KfloError> = std::result::Result<T, E>;

/// `Round(rho * ch_out)`, rounding halves away from zero.
pub fn cascade_width(rho: f64, ch_out: usize) -> usize {
    (rho * ch_out as f64).round() as usize
}

/// Views a kernel `[ch2, rest..]` as the signal `[1, ch2, prod(rest)]`.
///
/// For a 4D kernel the flat position is `t = (M*N)*c + N*m + n`, which is the
/// row-major order already used by [`Tensor`].
pub fn reshape_kernel_to_signal<T: Scalar>(kernel: &Tensor<T>) -> Tensor<T> {
    let filters = kernel.shape()[0];
    let len = kernel.numel() / filters.max(1);
    kernel
        .reshape(&[1, filters, len])
        .expect("kernel element count is preserved")
}

/// Inverse of [`reshape_kernel_to_signal`]: `[1, ch, L]` back to `[ch, tail..]`.
pub fn reshape_signal_to_kernel<T: Scalar>(signal: &Tensor<T>, tail: &[usize]) -> Result<Tensor<T>> {
    if signal.rank() != 3 || signal.shape()[0] != 1 {
        return Err(KfloError::Structure(format!(
            "expected a [1, ch, L] signal, got {:?}",
            signal.shape()
        )));
    }
    let mut shape = vec![signal.shape()[1]];
    shape.extend_from_slice(tail);
    Ok(signal.reshape(&shape)?)
}

/// Identity channel map of shape `[out, in, 1]`.
///
/// When `out != in` the map is a partial identity: output `o` copies input
/// `o mod in`.
pub fn dirac_kernel<T: Scalar>(out: usize, input: usize) -> Tensor<T> {
    Tensor::from_fn(&[out, input, 1], |i| {
        if i % input == (i / input) % input {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the product of every axis
/// after the first.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    fan_in_uniform_with(shape, fan_in, rng)
}

pub(crate) fn fan_in_uniform_with<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::narrow(rng.gen_range(-bound..bound)))
}

/// Linear depth multiplier `B` and width multiplier `rho`, written `BxR`
/// (for example `2x4`, `3x0.5`). `1xR` means a plain layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfloConfig {
    pub depth: usize,
    pub rho: f64,
}

impl KfloConfig {
    pub const VANILLA: Self = Self { depth: 1, rho: 1.0 };

    pub fn new(depth: usize, rho: f64) -> Result<Self> {
        if depth == 0 {
            return Err(KfloError::Config("linear depth multiplier must be at least 1".into()));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(KfloError::Config(format!("width multiplier must be positive, got {rho}")));
        }
        Ok(Self { depth, rho })
    }

    pub fn is_vanilla(&self) -> bool {
        self.depth == 1
    }
}

impl std::fmt::Display for KfloConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.depth, self.rho)
    }
}

impl std::str::FromStr for KfloConfig {
    type Err = KfloError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || KfloError::Config(format!("expected BxR such as 2x4, got {s:?}"));
        let (b, r) = s.split_once('x').ok_or_else(bad)?;
        let depth = b.parse::<usize>().map_err(|_| bad())?;
        let rho = r.parse::<f64>().map_err(|_| bad())?;
        Self::new(depth, rho)
    }
}

/// The single kernel that replaces a block at deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedKernel<T: Scalar = f32>(pub Tensor<T>);

impl<T: Scalar> CollapsedKernel<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// One overparameterized filtering layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KfloBlock<T: Scalar = f32> {
    w1: Tensor<T>,
    cascade: Vec<Tensor<T>>,
    geom: ConvGeometry,
    rho: f64,
}

impl<T: Scalar> KfloBlock<T> {
    /// Assembles a block from existing tensors, checking the width chain.
    pub fn new(w1: Tensor<T>, cascade: Vec<Tensor<T>>, geom: ConvGeometry, rho: f64) -> Result<Self> {
        if w1.rank() != 2 && w1.rank() != 4 {
            return Err(KfloError::Structure(format!(
                "base kernel must be [ch, in] or [ch, in/groups, M, N], got {:?}",
                w1.shape()
            )));
        }
        check_chain(w1.shape()[0], &cascade)?;
        if !cascade.is_empty() {
            let ch_out = cascade.last().unwrap().shape()[0];
            let expected = cascade_width(rho, ch_out);
            let widths = std::iter::once(w1.shape()[0]).chain(cascade[..cascade.len() - 1].iter().map(|k| k.shape()[0]));
            for (i, w) in widths.enumerate() {
                if w != expected {
                    return Err(KfloError::Structure(format!(
                        "width ch{} = {w} differs from Round({rho} * {ch_out}) = {expected}",
                        i + 2
                    )));
                }
            }
        }
        Ok(Self { w1, cascade, geom, rho })
    }

    pub fn w1(&self) -> &Tensor<T> {
        &self.w1
    }

    pub fn cascade(&self) -> &[Tensor<T>] {
        &self.cascade
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Linear depth multiplier `B`: the base kernel plus the cascade.
    pub fn depth(&self) -> usize {
        self.cascade.len() + 1
    }

    pub fn out_channels(&self) -> usize {
        self.cascade.last().map_or(self.w1.shape()[0], |k| k.shape()[0])
    }

    /// Width of the base kernel, `ch2`.
    pub fn base_width(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Shape of the deployed kernel.
    pub fn deployed_shape(&self) -> Vec<usize> {
        let mut s = self.w1.shape().to_vec();
        s[0] = self.out_channels();
        s
    }

    pub fn is_linear(&self) -> bool {
        self.w1.rank() == 2
    }

    /// Replaces the base kernel, keeping its shape.
    pub fn set_w1(&mut self, w1: Tensor<T>) -> Result<()> {
        self.w1.expect_same_shape("set_w1", &w1)?;
        self.w1 = w1;
        Ok(())
    }

    pub fn set_cascade(&mut self, index: usize, kernel: Tensor<T>) -> Result<()> {
        self.cascade[index].expect_same_shape("set_cascade", &kernel)?;
        self.cascade[index] = kernel;
        Ok(())
    }

    pub fn into_parts(self) -> (Tensor<T>, Vec<Tensor<T>>) {
        (self.w1, self.cascade)
    }

    /// Folds the cascade into the base kernel.
    pub fn collapse(&self) -> Result<CollapsedKernel<T>> {
        collapse_parts(&self.w1, &self.cascade).map(CollapsedKernel)
    }

    /// Initializes from `rho` pretrained kernels of the deployed shape: they
    /// are stacked along the filter axis into `W1` and the cascade is reset to
    /// dirac, so the block collapses to `pretrained[0]` exactly.
    pub fn tl_stack_init(&mut self, pretrained: &[Tensor<T>]) -> Result<()> {
        let count = pretrained.len();
        if count == 0 || self.rho.fract() != 0.0 || self.rho as usize != count {
            return Err(KfloError::Config(format!(
                "width multiplier {} must be an integer equal to the number of pretrained kernels ({count})",
                self.rho
            )));
        }
        let deployed = self.deployed_shape();
        let ch_out = deployed[0];
        if self.base_width() != count * ch_out {
            return Err(KfloError::Config(format!(
                "base kernel has {} filters, cannot hold {count} x {ch_out} pretrained filters",
                self.base_width()
            )));
        }
        let mut data = Vec::with_capacity(self.w1.numel());
        for (k, kernel) in pretrained.iter().enumerate() {
            if kernel.shape() != deployed.as_slice() {
                return Err(KfloError::Config(format!(
                    "pretrained kernel {k} has shape {:?}, expected {deployed:?}",
                    kernel.shape()
                )));
            }
            data.extend_from_slice(kernel.data());
        }
        self.w1 = Tensor::new(self.w1.shape().to_vec(), data)?;
        for k in &mut self.cascade {
            *k = dirac_kernel(k.shape()[0], k.shape()[1]);
        }
        Ok(())
    }
}

fn check_chain<T: Scalar>(base_width: usize, cascade: &[Tensor<T>]) -> Result<()> {
    let mut width = base_width;
    for (i, k) in cascade.iter().enumerate() {
        if k.rank() != 3 || k.shape()[2] != 1 {
            return Err(KfloError::Structure(format!(
                "cascade kernel {} must be [out, in, 1], got {:?}",
                i + 2,
                k.shape()
            )));
        }
        if k.shape()[1] != width {
            return Err(KfloError::Structure(format!(
                "cascade kernel {} expects {} input channels but receives {width}",
                i + 2,
                k.shape()[1]
            )));
        }
        width = k.shape()[0];
    }
    Ok(())
}

/// Collapses a base kernel through a cascade of `[out, in, 1]` kernels.
pub fn collapse_parts<T: Scalar>(w1: &Tensor<T>, cascade: &[Tensor<T>]) -> Result<Tensor<T>> {
    check_chain(w1.shape()[0], cascade)?;
    let mut signal = reshape_kernel_to_signal(w1);
    for k in cascade {
        signal = pointwise_conv1d(&signal, k)?;
    }
    reshape_signal_to_kernel(&signal, &w1.shape()[1..])
}

/// Records the collapse on a tape so gradients reach `W1` and the cascade.
/// Produces the same values as [`collapse_parts`].
pub fn collapse_on_tape<T: Scalar>(tape: &mut Tape<T>, w1: Var, cascade: &[Var]) -> Result<Var> {
    let kernel_shape = tape.value(w1).shape().to_vec();
    let len = kernel_shape[1..].iter().product::<usize>();
    let mut signal = tape.reshape(w1, &[1, kernel_shape[0], len])?;
    for &k in cascade {
        signal = tape.pointwise_conv1d(signal, k)?;
    }
    let mut out_shape = kernel_shape;
    out_shape[0] = tape.value(signal).shape()[1];
    Ok(tape.reshape(signal, &out_shape)?)
}

/// Applies the block the slow way: `W1` filters the input features, then each
/// cascade kernel filters the resulting feature maps.
///
/// With `groups > 1` each group's input slice goes through the full `W1` and
/// cascade, and only that group's output channels are kept.
pub fn feature_filter_oracle<T: Scalar>(input: &Tensor<T>, block: &KfloBlock<T>) -> Result<Tensor<T>> {
    if block.is_linear() {
        let mut y = fc_forward(input, block.w1())?;
        for k in block.cascade() {
            let w = k.reshape(&k.shape()[..2])?;
            y = fc_forward(&y, &w)?;
        }
        return Ok(y);
    }

    let geom = *block.geometry();
    let groups = geom.groups;
    let filter = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut y = conv2d(x, block.w1(), &geom.with_groups(1))?;
        for k in block.cascade() {
            let pw = k.reshape(&[k.shape()[0], k.shape()[1], 1, 1])?;
            y = conv2d(&y, &pw, &ConvGeometry::trivial())?;
        }
        Ok(y)
    };
    if groups == 1 {
        return filter(input);
    }

    let ch_in = input.shape().get(1).copied().unwrap_or(0);
    let ch_out = block.out_channels();
    if ch_in % groups != 0 || !ch_out.is_multiple_of(groups) {
        return Err(TensorError::Geometry {
            op: "feature_filter_oracle",
            reason: format!("groups {groups} must divide {ch_in} input and {ch_out} output channels"),
        }
        .into());
    }
    let (gi, go) = (ch_in / groups, ch_out / groups);
    let mut parts = Vec::with_capacity(groups);
    for g in 0..groups {
        let x = input.slice_channels(g * gi, (g + 1) * gi)?;
        parts.push(filter(&x)?.slice_channels(g * go, (g + 1) * go)?);
    }
    Ok(Tensor::concat_channels(&parts)?)
}

fn build_block<T: Scalar>(
    ch_out: usize,
    tail: Vec<usize>,
    geom: ConvGeometry,
    depth: usize,
    rho: f64,
    seed: u64,
) -> Result<KfloBlock<T>> {
    if depth == 0 {
        return Err(KfloError::Config("linear depth multiplier must be at least 1".into()));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(KfloError::Config(format!("width multiplier must be positive, got {rho}")));
    }
    if ch_out == 0 {
        return Err(KfloError::Config("layer has no output channels".into()));
    }
    let mid = if depth == 1 { ch_out } else { cascade_width(rho, ch_out) };
    if mid == 0 {
        return Err(KfloError::Config(format!(
            "Round({rho} * {ch_out}) = 0 leaves the cascade without channels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![mid];
    shape.extend_from_slice(&tail);
    let w1 = fan_in_uniform(&shape, &mut rng);
    let cascade = (2..=depth)
        .map(|i| dirac_kernel(if i == depth { ch_out } else { mid }, mid))
        .collect();
    KfloBlock::new(w1, cascade, geom, rho)
}

/// Creates a convolution block with base kernel `[Round(rho*ch_out), ch_in/groups, M, N]`
/// and `depth - 1` dirac cascade kernels. Deterministic in `seed`.
pub fn expand<T: Scalar>(
    ch_out: usize,
    ch_in: usize,
    spatial: (usize, usize),
    geom: ConvGeometry,
    depth: usize,
    rho: f64,
    seed: u64,
) -> Result<KfloBlock<T>> {
    let g = geom.groups;
    if g == 0 || !ch_in.is_multiple_of(g) || !ch_out.is_multiple_of(g) {
        return Err(KfloError::Config(format!(
            "groups {g} must divide {ch_in} input and {ch_out} output channels"
        )));
    }
    build_block(ch_out, vec![ch_in / g, spatial.0, spatial.1], geom, depth, rho, seed)
}

/// Fully connected counterpart of [`expand`]: base kernel `[Round(rho*ch_out), ch_in]`.
pub fn expand_linear<T: Scalar>(ch_out: usize, ch_in: usize, depth: usize, rho: f64, seed: u64) -> Result<KfloBlock<T>> {
    build_block(ch_out, vec![ch_in], ConvGeometry::trivial(), depth, rho, seed)
}

/// Multiply-accumulate counts for one training step of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Collapse the cascade over the kernel, then filter with the collapsed kernel.
    pub kernel_filtering: u64,
    /// Filter with `W1`, then run the cascade over the feature maps.
    pub feature_filtering: u64,
    /// The deployed layer alone.
    pub vanilla: u64,
    /// Cascade share of `kernel_filtering`; independent of the batch.
    pub cascade_kernel_filtering: u64,
    /// Cascade share of `feature_filtering`.
    pub cascade_feature_filtering: u64,
}

/// Forward MAC counts for a batch of `batch` inputs of spatial size `input`.
/// Linear blocks ignore `input` (their spatial extent is 1).
pub fn flop_count<T: Scalar>(block: &KfloBlock<T>, input: (usize, usize), batch: usize) -> Result<FlopCount> {
    let positions = if block.is_linear() {
        1
    } else {
        let s = block.w1().shape();
        let (h, w) = block.geometry().output_size(input, (s[2], s[3]))?;
        (h * w) as u64
    };
    let batch = batch as u64;
    let per_filter = (block.w1().numel() / block.base_width()) as u64;
    let vanilla = batch * positions * block.out_channels() as u64 * per_filter;
    let w1_conv = batch * positions * block.w1().numel() as u64;
    let mixing: u64 = block
        .cascade()
        .iter()
        .map(|k| (k.shape()[0] * k.shape()[1]) as u64)
        .sum();
    let cascade_kernel_filtering = mixing * per_filter;
    let cascade_feature_filtering = mixing * positions * batch;
    Ok(FlopCount {
        kernel_filtering: vanilla + cascade_kernel_filtering,
        feature_filtering: w1_conv + cascade_feature_filtering,
        vanilla,
        cascade_kernel_filtering,
        cascade_feature_filtering,
    })
}
