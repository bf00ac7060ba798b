use crate::tensor::{Scalar, Tensor, TensorError};

/// Role of a parameter. Decides which weight-decay coefficient applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    /// Base kernel of an overparameterized layer (the filtered kernel).
    BaseKernel,
    /// Pointwise kernel in the cascade that filters the base kernel.
    Cascade,
    /// Ordinary kernel of a non-expanded layer.
    Plain,
    Bias,
}

impl ParamClass {
    pub fn label(self) -> &'static str {
        match self {
            Self::BaseKernel => "base_kernel",
            Self::Cascade => "cascade",
            Self::Plain => "plain",
            Self::Bias => "bias",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot<T: Scalar = f32> {
    name: String,
    class: ParamClass,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class(&self) -> ParamClass {
        self.class
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
}

/// Owns every trainable tensor of a model together with its gradient.
///
/// `version` increases on every mutation of a value, so derived quantities
/// (collapsed kernels) can tell whether they are stale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    slots: Vec<ParamSlot<T>>,
    version: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            version: 0,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, class: ParamClass, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.slots.push(ParamSlot {
            name: name.into(),
            class,
            value,
            grad,
        });
        self.version += 1;
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot<T>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        self.slots[id.0].value.expect_same_shape("set_value", &value)?;
        self.slots[id.0].value = value;
        self.version += 1;
        Ok(())
    }

    /// Mutable view of a value's payload paired with its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &Tensor<T>) {
        self.version += 1;
        let slot = &mut self.slots[id.0];
        (slot.value.data_mut(), &slot.grad)
    }

    pub fn value_data_mut(&mut self, id: ParamId) -> &mut [T] {
        self.value_and_grad_mut(id).0
    }

    pub fn grad_data_mut(&mut self, id: ParamId) -> &mut [T] {
        self.slots[id.0].grad.data_mut()
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<(), TensorError> {
        let slot = &mut self.slots[id.0];
        slot.grad.expect_same_shape("accumulate_grad", g)?;
        for (acc, v) in slot.grad.data_mut().iter_mut().zip(g.data()) {
            *acc = T::narrow(acc.widen() + v.widen());
        }
        Ok(())
    }

    /// Same parameters in another element type; gradients reset to zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| ParamSlot {
                    name: s.name.clone(),
                    class: s.class,
                    value: s.value.cast(),
                    grad: Tensor::zeros(s.value.shape()),
                })
                .collect(),
            version: self.version,
        }
    }
}
