use std::fmt;
use std::str::FromStr;

use super::{LayerSpec, ModelError, ModelGraph, Result};
use crate::kflo::KfloConfig;
use crate::tensor::{ConvGeometry, Scalar};

/// Built-in architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Lenet5,
    SmallCnn,
}

impl Arch {
    /// Builds the architecture for `[in_channels, h, w]` inputs.
    pub fn build<T: Scalar>(
        self,
        kflo: KfloConfig,
        num_classes: usize,
        input: [usize; 3],
        seed: u64,
    ) -> Result<ModelGraph<T>> {
        let specs = match self {
            Arch::Lenet5 => lenet5_specs(num_classes),
            Arch::SmallCnn => smallcnn_specs(num_classes),
        };
        ModelGraph::build(&input, &specs, kflo, seed)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Lenet5 => "lenet5",
            Arch::SmallCnn => "smallcnn",
        })
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Arch::Lenet5),
            "smallcnn" => Ok(Arch::SmallCnn),
            other => Err(ModelError::Config(format!("unknown architecture {other:?} (lenet5, smallcnn)"))),
        }
    }
}

fn conv(name: &str, out_channels: usize, k: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.to_string(),
        out_channels,
        kernel: (k, k),
        geom: ConvGeometry::trivial().with_padding(pad, pad),
    }
}

fn fc(name: &str, out_features: usize) -> LayerSpec {
    LayerSpec::Fc {
        name: name.to_string(),
        out_features,
    }
}

fn lenet5_specs(num_classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::{MaxPool, Relu};
    vec![
        conv("conv1", 6, 5, 2),
        Relu,
        MaxPool { window: (2, 2) },
        conv("conv2", 16, 5, 0),
        Relu,
        MaxPool { window: (2, 2) },
        fc("fc1", 120),
        Relu,
        fc("fc2", 84),
        Relu,
        fc("fc3", num_classes),
    ]
}

fn smallcnn_specs(num_classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::{GlobalAvgPool, MaxPool, Relu};
    let mut specs = Vec::new();
    for (i, ch) in [32, 64, 128].into_iter().enumerate() {
        specs.push(conv(&format!("conv{}", i + 1), ch, 3, 1));
        specs.push(Relu);
        specs.push(MaxPool { window: (2, 2) });
    }
    specs.push(GlobalAvgPool);
    specs.push(fc("fc", num_classes));
    specs
}

/// LeNet-5 for 28×28 inputs: two 5×5 convolutions (the first padded by 2),
/// each followed by ReLU and 2×2 max pooling, then fully connected layers of
/// 120, 84 and `num_classes` units.
pub fn build_lenet5<T: Scalar>(kflo: KfloConfig, num_classes: usize, in_channels: usize, seed: u64) -> Result<ModelGraph<T>> {
    Arch::Lenet5.build(kflo, num_classes, [in_channels, 28, 28], seed)
}

/// Three 3×3 conv-ReLU-pool stages of 32, 64 and 128 channels, global
/// average pooling and a linear classifier. Input is `[in_channels, 32, 32]`.
pub fn build_smallcnn<T: Scalar>(kflo: KfloConfig, num_classes: usize, in_channels: usize, seed: u64) -> Result<ModelGraph<T>> {
    Arch::SmallCnn.build(kflo, num_classes, [in_channels, 32, 32], seed)
}
