//! Trainable parameters, their gradients and seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity of a parameter tensor. Ids are handed out in construction
/// order, which is also the serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

/// Anything that owns parameters in a fixed enumeration order.
pub trait Parameterized<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Total number of scalar parameters.
    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.visit_params(&mut |p| ids.push(p.id));
        ids
    }
}

impl<T, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in self {
            p.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in self {
            p.visit_params_mut(f);
        }
    }
}

impl<T, P: Parameterized<T>> Parameterized<T> for Option<P> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(p) = self {
            p.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(p) = self {
            p.visit_params_mut(f);
        }
    }
}

impl<T, P: Parameterized<T>, const N: usize> Parameterized<T> for [P; N] {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in self {
            p.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in self {
            p.visit_params_mut(f);
        }
    }
}

impl<T> Parameterized<T> for Param<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(self)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

/// Convolution weights `[K, C_in, m, m(, m)]`, bias `[K]` and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvParams<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }
}

impl<T> Parameterized<T> for ConvParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer, `out = W^T v + B` with `W: [n, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<T> Parameterized<T> for DenseParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-parameter gradient accumulator.
///
/// Starts empty (all zeros); `Tape::backward` adds into it, so repeated
/// backward passes accumulate until `clear` is called.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            grads: BTreeMap::new(),
        }
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    /// Gradient for `p`, zeros if it never received one.
    pub fn for_param(&self, p: &Param<T>) -> Tensor<T> {
        self.grads
            .get(&p.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

/// Seeded Glorot-uniform initializer that also assigns parameter ids.
#[derive(Clone, Debug)]
pub struct ParamInit {
    rng: ChaCha8Rng,
    next: usize,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next: 0,
        }
    }

    fn id(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }

    pub fn issued(&self) -> usize {
        self.next
    }

    /// Wraps an explicit tensor as a new parameter.
    pub fn param<T: Scalar>(&mut self, value: Tensor<T>) -> Param<T> {
        Param { id: self.id(), value }
    }

    /// Convolution from explicit weights `[K, C_in, m...]` and bias `[K]`.
    pub fn conv_from<T: Scalar>(&mut self, weight: Tensor<T>, bias: Tensor<T>, spec: ConvSpec) -> ConvParams<T> {
        ConvParams {
            weight: self.param(weight),
            bias: self.param(bias),
            spec,
        }
    }

    pub fn dense_from<T: Scalar>(&mut self, weight: Tensor<T>, bias: Tensor<T>) -> DenseParams<T> {
        DenseParams {
            weight: self.param(weight),
            bias: self.param(bias),
        }
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Param<T> {
        Param {
            id: self.id(),
            value: Tensor::zeros(shape),
        }
    }

    pub fn glorot<T: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Param<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let id = self.id();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        Param { id, value }
    }

    /// Convolution with odd cubic (or square in 2-D) kernel of extent `m`.
    pub fn conv<T: Scalar>(
        &mut self,
        c_in: usize,
        k_out: usize,
        m: usize,
        spatial_rank: usize,
        spec: ConvSpec,
    ) -> ConvParams<T> {
        let taps = m.pow(spatial_rank as u32);
        let mut shape = vec![k_out, c_in];
        shape.extend(std::iter::repeat_n(m, spatial_rank));
        let weight = self.glorot(&shape, c_in * taps, k_out * taps);
        let bias = self.zeros(&[k_out]);
        ConvParams { weight, bias, spec }
    }

    pub fn dense<T: Scalar>(&mut self, n_in: usize, n_out: usize) -> DenseParams<T> {
        let weight = self.glorot(&[n_in, n_out], n_in, n_out);
        let bias = self.zeros(&[n_out]);
        DenseParams { weight, bias }
    }
}
