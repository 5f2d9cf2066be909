//! A small layer library with hand-written backward passes, sufficient for
//! encoder + ASPP segmentation networks.
//!
//! Modules cache what they need during a [`Mode::Train`] forward pass and
//! consume it in `backward`, which accumulates parameter gradients in place
//! and returns the gradient with respect to the module input.

mod aspp;
mod backbone;
mod layers;
mod model;
pub mod weights;

pub use aspp::{Aspp, AsppConfig};
pub use backbone::{MobileNetV2, ResNet, ResNetDepth, ToyEncoder};
pub use layers::{
    upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvSpec, FrozenBatchNorm2d, GlobalAvgPool, MaxPool2d, Relu,
    Sequential,
};
pub use model::{build_model, build_model_with_seed, BackboneFamily, BackboneSpec, ModelError, PretrainSource, SegModel};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Cache activations for a later backward pass.
    Train,
    /// Inference only.
    Eval,
}

/// A tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Buffers such as running statistics are stored but never updated.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            grad: Tensor::zeros(&[0]),
            value,
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(T::zero());
        }
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;
pub type ParamVisitorMut<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

pub trait Module<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T>;

    /// Panics when the preceding forward pass did not run in train mode.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T>;

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>);

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total scalar count of all stored tensors (parameters and buffers).
pub fn count_values<T: Scalar, M: Module<T> + ?Sized>(m: &M, trainable_only: bool) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if !trainable_only || p.trainable {
            n += p.value.len();
        }
    });
    n
}
