//! Backward kernels for the operations in the parent module.

use super::ops::conv_dims;
use super::{ConvGeometry, Result, Scalar, Tensor, TensorError};

/// Gradient of [`conv2d`](super::conv2d) with respect to its input.
pub fn conv2d_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input_shape, kernel.shape(), geom)?;
    let (h, w) = d.input;
    let (km, kn) = d.kernel;
    let (oh, ow) = d.output;
    let g = grad_out.data();
    let k = kernel.data();
    let mut acc = vec![0.0f64; d.batch * d.in_channels * h * w];
    for b in 0..d.batch {
        for oc in 0..d.out_channels {
            let c0 = (oc / d.group_out) * d.group_in;
            let kbase = oc * d.group_in * km * kn;
            let gbase = (b * d.out_channels + oc) * oh * ow;
            for y in 0..oh {
                for xo in 0..ow {
                    let gv = g[gbase + y * ow + xo].widen();
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..d.group_in {
                        let xbase = (b * d.in_channels + c0 + c) * h * w;
                        for m in 0..km {
                            let r = geom.input_row(y, m);
                            if r < 0 || r as usize >= h {
                                continue;
                            }
                            for n in 0..kn {
                                let col = geom.input_col(xo, n);
                                if col < 0 || col as usize >= w {
                                    continue;
                                }
                                acc[xbase + r as usize * w + col as usize] +=
                                    gv * k[kbase + (c * km + m) * kn + n].widen();
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(T::narrow).collect())
}

/// Gradient of [`conv2d`](super::conv2d) with respect to its kernel.
pub fn conv2d_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), kernel_shape, geom)?;
    let (h, w) = d.input;
    let (km, kn) = d.kernel;
    let (oh, ow) = d.output;
    let g = grad_out.data();
    let x = input.data();
    let mut acc = vec![0.0f64; d.out_channels * d.group_in * km * kn];
    for oc in 0..d.out_channels {
        let c0 = (oc / d.group_out) * d.group_in;
        let kbase = oc * d.group_in * km * kn;
        for c in 0..d.group_in {
            for m in 0..km {
                for n in 0..kn {
                    let mut s = 0.0f64;
                    for b in 0..d.batch {
                        let xbase = (b * d.in_channels + c0 + c) * h * w;
                        let gbase = (b * d.out_channels + oc) * oh * ow;
                        for y in 0..oh {
                            let r = geom.input_row(y, m);
                            if r < 0 || r as usize >= h {
                                continue;
                            }
                            let row = xbase + r as usize * w;
                            for xo in 0..ow {
                                let col = geom.input_col(xo, n);
                                if col < 0 || col as usize >= w {
                                    continue;
                                }
                                s += g[gbase + y * ow + xo].widen() * x[row + col as usize].widen();
                            }
                        }
                    }
                    acc[kbase + (c * km + m) * kn + n] = s;
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), acc.into_iter().map(T::narrow).collect())
}

/// Gradients of [`pointwise_conv1d`](super::pointwise_conv1d): `(d input, d kernel)`.
pub fn pointwise_conv1d<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, ci, len) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = kernel.shape()[0];
    if grad_out.shape() != [b, co, len] {
        return Err(TensorError::Input {
            op: "pointwise_conv1d backward",
            reason: format!("gradient shape {:?}", grad_out.shape()),
        });
    }
    let g = grad_out.data();
    let x = input.data();
    let k = kernel.data();

    let mut dx = Vec::with_capacity(b * ci * len);
    let mut acc = vec![0.0f64; len];
    for bi in 0..b {
        for c in 0..ci {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for o in 0..co {
                let kv = k[o * ci + c].widen();
                let grow = &g[(bi * co + o) * len..(bi * co + o + 1) * len];
                for (a, gv) in acc.iter_mut().zip(grow) {
                    *a += kv * gv.widen();
                }
            }
            dx.extend(acc.iter().map(|&a| T::narrow(a)));
        }
    }

    let mut dk = Vec::with_capacity(co * ci);
    for o in 0..co {
        for c in 0..ci {
            let mut s = 0.0f64;
            for bi in 0..b {
                let grow = &g[(bi * co + o) * len..(bi * co + o + 1) * len];
                let xrow = &x[(bi * ci + c) * len..(bi * ci + c + 1) * len];
                for (gv, xv) in grow.iter().zip(xrow) {
                    s += gv.widen() * xv.widen();
                }
            }
            dk.push(T::narrow(s));
        }
    }
    Ok((
        Tensor::new(vec![b, ci, len], dx)?,
        Tensor::new(vec![co, ci, 1], dk)?,
    ))
}

/// Gradients of [`fc_forward`](super::fc_forward): `(d input, d weights)`.
pub fn fc<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, ci) = (input.shape()[0], input.shape()[1]);
    let co = weights.shape()[0];
    if grad_out.shape() != [b, co] {
        return Err(TensorError::Input {
            op: "fc backward",
            reason: format!("gradient shape {:?}", grad_out.shape()),
        });
    }
    let g = grad_out.data();
    let x = input.data();
    let wt = weights.data();

    let mut dx = Vec::with_capacity(b * ci);
    let mut acc = vec![0.0f64; ci];
    for bi in 0..b {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for o in 0..co {
            let gv = g[bi * co + o].widen();
            if gv == 0.0 {
                continue;
            }
            for (a, wv) in acc.iter_mut().zip(&wt[o * ci..(o + 1) * ci]) {
                *a += gv * wv.widen();
            }
        }
        dx.extend(acc.iter().map(|&a| T::narrow(a)));
    }

    let mut dw = vec![0.0f64; co * ci];
    for bi in 0..b {
        let xrow = &x[bi * ci..(bi + 1) * ci];
        for o in 0..co {
            let gv = g[bi * co + o].widen();
            if gv == 0.0 {
                continue;
            }
            for (a, xv) in dw[o * ci..(o + 1) * ci].iter_mut().zip(xrow) {
                *a += gv * xv.widen();
            }
        }
    }
    Ok((
        Tensor::new(vec![b, ci], dx)?,
        Tensor::new(vec![co, ci], dw.into_iter().map(T::narrow).collect())?,
    ))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_same_shape("relu backward", input)?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Routes each output gradient to the input element recorded in `argmax`.
pub fn maxpool2d<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.numel() != argmax.len() {
        return Err(TensorError::Input {
            op: "maxpool2d backward",
            reason: format!("{} gradients for {} pooled outputs", grad_out.numel(), argmax.len()),
        });
    }
    let mut acc = vec![0.0f64; input_shape.iter().product()];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        acc[idx] += g.widen();
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(T::narrow).collect())
}

pub fn global_avg_pool<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let area = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(grad_out.numel() * area);
    for &g in grad_out.data() {
        let v = T::narrow(g.widen() / area as f64);
        data.extend(std::iter::repeat_n(v, area));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Gradient of the reduced cross-entropy with respect to the logits, scaled by
/// the upstream scalar gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    per_sample_scale: f64,
) -> Result<Tensor<T>> {
    let k = probs.shape()[1];
    let mut data = Vec::with_capacity(probs.numel());
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        for (j, p) in row.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            data.push(T::narrow((p.widen() - target) * per_sample_scale));
        }
    }
    Tensor::new(probs.shape().to_vec(), data)
}
