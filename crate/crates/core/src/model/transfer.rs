use super::{ModelError, ModelGraph, NodeParams, Result};
use crate::tensor::Scalar;

/// Outcome of [`tl_init`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TlReport {
    /// Layers initialized from the stacked pretrained kernels.
    pub stacked: Vec<String>,
    /// Layers whose pretrained kernels did not fit (for example a classifier
    /// head with a different class count) and kept their fresh initialization.
    pub reinitialized: Vec<String>,
}

/// Initializes `target` from pretrained networks of the same architecture.
///
/// For every filtering layer the deployed kernels of all pretrained networks
/// are stacked into the base kernel and the cascade is reset to dirac, so the
/// layer starts out equal to the first network's layer. Biases come from the
/// first network. The number of pretrained networks must equal the width
/// multiplier of the target's blocks.
pub fn tl_init<T: Scalar>(target: &mut ModelGraph<T>, pretrained: &[ModelGraph<T>]) -> Result<TlReport> {
    if pretrained.is_empty() {
        return Err(ModelError::Config("transfer initialization needs at least one pretrained model".into()));
    }
    for (k, p) in pretrained.iter().enumerate() {
        let same = p.nodes.len() == target.nodes.len()
            && p.nodes.iter().zip(&target.nodes).all(|(a, b)| a.name == b.name && a.kind == b.kind && a.geom == b.geom);
        if !same {
            return Err(ModelError::Config(format!(
                "pretrained model {k} does not have the target's architecture"
            )));
        }
    }
    let kernels: Vec<_> = pretrained.iter().map(|p| p.effective_kernels()).collect::<Result<_>>()?;

    let mut report = TlReport::default();
    for i in 0..target.nodes.len() {
        let name = target.nodes[i].name.clone();
        let target_bias = match &target.nodes[i].params {
            NodeParams::None => continue,
            NodeParams::Plain { bias, .. } | NodeParams::Kflo { bias, .. } => *bias,
        };
        let layer_kernels: Vec<_> = pretrained
            .iter()
            .zip(&kernels)
            .map(|(p, k)| p.layer_kernel(i, k))
            .collect();
        let biases: Vec<_> = pretrained.iter().map(|p| p.layer_bias(i)).collect();
        for (k, (kernel, b)) in layer_kernels.iter().zip(&biases).enumerate().skip(1) {
            if kernel.shape() != layer_kernels[0].shape() || b.shape() != biases[0].shape() {
                return Err(ModelError::Config(format!(
                    "{name}: pretrained model {k} has kernel {:?}, model 0 has {:?}",
                    kernel.shape(),
                    layer_kernels[0].shape()
                )));
            }
        }
        let bias_fits = biases[0].shape() == target.params.value(target_bias).shape();

        match target.nodes[i].params.clone() {
            NodeParams::Plain { kernel, bias } => {
                if pretrained.len() != 1 {
                    return Err(ModelError::Config(format!(
                        "{name}: {} pretrained models but the layer is not widened",
                        pretrained.len()
                    )));
                }
                if layer_kernels[0].shape() == target.params.value(kernel).shape() && bias_fits {
                    target.params.set_value(kernel, layer_kernels[0].clone())?;
                    target.params.set_value(bias, biases[0].clone())?;
                    report.stacked.push(name);
                } else {
                    report.reinitialized.push(name);
                }
            }
            NodeParams::Kflo { bias, .. } => {
                let mut block = target.kflo_block(i).expect("valid block");
                let fits = bias_fits && layer_kernels.iter().all(|k| k.shape() == block.deployed_shape().as_slice());
                if !fits {
                    report.reinitialized.push(name);
                    continue;
                }
                block
                    .tl_stack_init(&layer_kernels)
                    .map_err(|e| ModelError::Config(format!("{name}: {e}")))?;
                target.set_kflo_block(i, &block)?;
                target.params.set_value(bias, biases[0].clone())?;
                report.stacked.push(name);
            }
            NodeParams::None => unreachable!(),
        }
    }
    Ok(report)
}

impl<T: Scalar> ModelGraph<T> {
    fn layer_kernel(&self, index: usize, kernels: &super::EffectiveKernels<T>) -> crate::tensor::Tensor<T> {
        match &self.nodes[index].params {
            NodeParams::Plain { kernel, .. } => self.params.value(*kernel).clone(),
            NodeParams::Kflo { .. } => kernels.collapsed[index].clone().expect("collapsed kernel for block"),
            NodeParams::None => unreachable!("filtering layer expected"),
        }
    }

    fn layer_bias(&self, index: usize) -> &crate::tensor::Tensor<T> {
        match &self.nodes[index].params {
            NodeParams::Plain { bias, .. } | NodeParams::Kflo { bias, .. } => self.params.value(*bias),
            NodeParams::None => unreachable!("filtering layer expected"),
        }
    }
}
