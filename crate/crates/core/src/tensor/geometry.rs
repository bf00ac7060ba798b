use super::{Result, TensorError};

/// Sliding-window properties of a 2D filtering layer.
///
/// Maps output position `(h', w')` and kernel tap `(m, n)` to an input
/// coordinate `h' * stride + m * dilation - padding` (and likewise for the
/// width axis). Coordinates outside the input read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::trivial()
    }
}

impl ConvGeometry {
    /// Stride 1, no padding, no dilation, one group.
    pub const fn trivial() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    pub const fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub const fn with_stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub const fn with_dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn is_trivial(&self) -> bool {
        *self == Self::trivial()
    }

    /// Output spatial size for an `input` of `(H, W)` and a `kernel` of `(M, N)`.
    pub fn output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: format!("stride and dilation must be positive, got {self:?}"),
            });
        }
        if self.groups == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: "groups must be positive".into(),
            });
        }
        let h = axis_output(input.0, kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let w = axis_output(input.1, kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (h, w) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(TensorError::Geometry {
                op: "conv2d",
                reason: format!(
                    "kernel {kernel:?} does not fit input {input:?} under {self:?}"
                ),
            }),
        }
    }

    /// Input row read by output row `out` through kernel row `tap` (may be out of range).
    #[inline(always)]
    pub fn input_row(&self, out: usize, tap: usize) -> isize {
        (out * self.stride.0 + tap * self.dilation.0) as isize - self.padding.0 as isize
    }

    /// Input column read by output column `out` through kernel column `tap`.
    #[inline(always)]
    pub fn input_col(&self, out: usize, tap: usize) -> isize {
        (out * self.stride.1 + tap * self.dilation.1) as isize - self.padding.1 as isize
    }
}

fn axis_output(size: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    if kernel == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}
