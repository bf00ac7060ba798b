use super::{ConvGeometry, Result, Scalar, Tensor, TensorError};

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input channels seen by each filter (`in_channels / groups`).
    pub group_in: usize,
    /// Output channels per group.
    pub group_out: usize,
    pub input: (usize, usize),
    pub kernel: (usize, usize),
    pub output: (usize, usize),
}

pub(crate) fn conv_dims(input: &[usize], kernel: &[usize], geom: &ConvGeometry) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    if input.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            shape: input.to_vec(),
        });
    }
    if kernel.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            shape: kernel.to_vec(),
        });
    }
    let g = geom.groups;
    if g == 0 || !input[1].is_multiple_of(g) {
        return Err(TensorError::Geometry {
            op: OP,
            reason: format!("groups {g} does not divide input channels {}", input[1]),
        });
    }
    if !kernel[0].is_multiple_of(g) {
        return Err(TensorError::Geometry {
            op: OP,
            reason: format!("groups {g} does not divide output channels {}", kernel[0]),
        });
    }
    if kernel[1] != input[1] / g {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "kernel input channels (in_channels / groups)",
            expected: input[1] / g,
            actual: kernel[1],
        });
    }
    let output = geom.output_size((input[2], input[3]), (kernel[2], kernel[3]))?;
    Ok(ConvDims {
        batch: input[0],
        in_channels: input[1],
        out_channels: kernel[0],
        group_in: kernel[1],
        group_out: kernel[0] / g,
        input: (input[2], input[3]),
        kernel: (kernel[2], kernel[3]),
        output,
    })
}

/// 2D cross-correlation with zero padding.
///
/// `input` is `[b, ch_in, H, W]`, `kernel` is `[ch_out, ch_in / groups, M, N]`.
/// Each output element is a single `f64` sum over input channels, then kernel
/// rows, then kernel columns.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), kernel.shape(), geom)?;
    let (h, w) = d.input;
    let (km, kn) = d.kernel;
    let (oh, ow) = d.output;
    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(d.batch * d.out_channels * oh * ow);
    for b in 0..d.batch {
        for oc in 0..d.out_channels {
            let c0 = (oc / d.group_out) * d.group_in;
            let kbase = oc * d.group_in * km * kn;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..d.group_in {
                        let xbase = (b * d.in_channels + c0 + c) * h * w;
                        let kc = kbase + c * km * kn;
                        for m in 0..km {
                            let r = geom.input_row(y, m);
                            if r < 0 || r as usize >= h {
                                continue;
                            }
                            let row = xbase + r as usize * w;
                            for n in 0..kn {
                                let col = geom.input_col(xo, n);
                                if col < 0 || col as usize >= w {
                                    continue;
                                }
                                acc += k[kc + m * kn + n].widen() * x[row + col as usize].widen();
                            }
                        }
                    }
                    out.push(T::narrow(acc));
                }
            }
        }
    }
    Tensor::new(vec![d.batch, d.out_channels, oh, ow], out)
}

/// Applies a `[ch_out, ch_in, 1]` kernel as a channel-mixing matrix at every
/// position of a `[b, ch_in, L]` signal.
pub fn pointwise_conv1d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "pointwise_conv1d";
    input.expect_rank(OP, 3)?;
    kernel.expect_rank(OP, 3)?;
    let (b, ci, len) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, width) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if width != 1 {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "kernel spatial size",
            expected: 1,
            actual: width,
        });
    }
    if kci != ci {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "input channels",
            expected: kci,
            actual: ci,
        });
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(b * co * len);
    let mut acc = vec![0.0f64; len];
    for bi in 0..b {
        for o in 0..co {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in 0..ci {
                let kv = k[o * ci + c].widen();
                let row = &x[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += kv * v.widen();
                }
            }
            out.extend(acc.iter().map(|&a| T::narrow(a)));
        }
    }
    Tensor::new(vec![b, co, len], out)
}

/// Fully connected map `[b, ch_in] x [ch_out, ch_in]^T -> [b, ch_out]`, no bias.
///
/// Summation order matches [`conv2d`] on `[b, ch_in, 1, 1]` inputs, so the two
/// agree bit for bit.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "fc_forward";
    input.expect_rank(OP, 2)?;
    weights.expect_rank(OP, 2)?;
    let (b, ci) = (input.shape()[0], input.shape()[1]);
    let (co, wci) = (weights.shape()[0], weights.shape()[1]);
    if wci != ci {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "input features",
            expected: wci,
            actual: ci,
        });
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(b * co);
    for bi in 0..b {
        let row = &x[bi * ci..(bi + 1) * ci];
        for o in 0..co {
            let wrow = &wt[o * ci..(o + 1) * ci];
            let mut acc = 0.0f64;
            for (a, v) in wrow.iter().zip(row) {
                acc += a.widen() * v.widen();
            }
            out.push(T::narrow(acc));
        }
    }
    Tensor::new(vec![b, co], out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    /// Flat input offset of the element selected for each output.
    pub argmax: Vec<usize>,
}

/// Max pooling without padding. Ties resolve to the first maximal element in
/// row-major order within the window.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<MaxPoolOutput<T>> {
    const OP: &str = "maxpool2d";
    input.expect_rank(OP, 4)?;
    let s = input.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 || window.0 > h || window.1 > w {
        return Err(TensorError::Geometry {
            op: OP,
            reason: format!("window {window:?} stride {stride:?} on input {h}x{w}"),
        });
    }
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = base + y * stride.0 * w + xo * stride.1;
                let mut best = x[best_idx];
                for m in 0..window.0 {
                    for n in 0..window.1 {
                        let idx = base + (y * stride.0 + m) * w + xo * stride.1 + n;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![b, c, oh, ow], out)?,
        argmax,
    })
}

/// `[b, c, H, W] -> [b, c]` spatial mean.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank("global_avg_pool", 4)?;
    let s = input.shape();
    let area = s[2] * s[3];
    let out = input
        .data()
        .chunks(area)
        .map(|plane| T::narrow(plane.iter().map(|v| v.widen()).sum::<f64>() / area as f64))
        .collect();
    Tensor::new(vec![s[0], s[1]], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<T: Scalar> {
    pub loss: f64,
    /// Softmax probabilities, same shape as the logits.
    pub probs: Tensor<T>,
}

/// Softmax cross-entropy over `[b, classes]` logits using the max-subtracted
/// log-sum-exp.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<CrossEntropy<T>> {
    const OP: &str = "softmax_cross_entropy";
    logits.expect_rank(OP, 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "batch (labels)",
            expected: b,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Input {
            op: OP,
            reason: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut total = 0.0f64;
    let mut probs = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.widen() - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[label].widen();
        probs.extend(row.iter().map(|v| T::narrow((v.widen() - lse).exp())));
    }
    let loss = match reduction {
        Reduction::Mean => total / b.max(1) as f64,
        Reduction::Sum => total,
    };
    Ok(CrossEntropy {
        loss,
        probs: Tensor::new(vec![b, k], probs)?,
    })
}
