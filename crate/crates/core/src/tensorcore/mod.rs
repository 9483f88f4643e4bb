//! Tensor primitives, reverse-mode differentiation and gradient checking.
//!
//! The free functions here are the plain tensor-in, tensor-out forms of the
//! primitives. The same kernels back the recorded versions on [`Tape`].

mod conv;
mod gradcheck;
pub(crate) mod ops;
mod param;
mod resample;
mod tape;

use serde::{Deserialize, Serialize};

pub use conv::{conv_out_extent, ConvSpec, Padding};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use ops::{channel_softmax, concat_channels, cross_entropy, dense, eltwise_add, global_avg_pool, soft_dice, softmax};
pub use param::{ConvParams, DenseParams, Gradients, Param, ParamId, ParamInit, Parameterized};
pub use resample::ResampleMode;
pub use tape::{Tape, Var};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => ops::sigmoid(v),
        }
    }
}

/// `f(w_j (*) x + b_j)` for every output channel `j`.
pub fn conv<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, act: Activation) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = tape.conv(xv, p, act)?;
    Ok(tape.into_value(y))
}

/// Dense layer with activation, `act(W^T v + B)`.
pub fn dense_act<T: Scalar>(
    v: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    Ok(dense(v, w, b)?.map(|x| act.apply(x)))
}

/// Interpolates every channel of `x` onto the spatial grid `target`.
pub fn resample<T: Scalar>(x: &Tensor<T>, target: &[usize], mode: ResampleMode) -> Result<Tensor<T>> {
    let plan = resample::ResamplePlan::new(x.shape(), target, mode)?;
    Ok(plan.forward(x))
}
