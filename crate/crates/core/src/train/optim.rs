//! First-order optimizers over any [`Parameterized`] model.
//!
//! Moment buffers are kept in parameter enumeration order so they can be
//! written to and restored from a checkpoint without id bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensorcore::{Gradients, Parameterized};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[default]
    Adam,
}

impl OptimizerKind {
    /// Number of per-parameter moment buffers the optimizer keeps.
    pub fn slots(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Sgd),
            1 => Some(OptimizerKind::SgdMomentum),
            2 => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with its running state.
///
/// * `sgd`: `θ ← θ − lr·g`
/// * `sgd_momentum`: `v ← μ·v + g`, `θ ← θ − lr·v`
/// * `adam`: bias-corrected first and second moments,
///   `θ ← θ − lr·m̂ / (√v̂ + ε)`
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    hyper: Hyper,
    steps: u64,
    /// `slots[s][i]` is moment buffer `s` of the `i`-th enumerated parameter.
    slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Self {
        Optimizer {
            kind,
            hyper,
            steps: 0,
            slots: vec![Vec::new(); kind.slots()],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn slots(&self) -> &[Vec<Tensor<T>>] {
        &self.slots
    }

    /// Reinstates a saved state. Buffer shapes are checked against the model
    /// on the next update.
    pub fn restore(&mut self, steps: u64, slots: Vec<Vec<Tensor<T>>>) -> Result<()> {
        if slots.len() != self.kind.slots() {
            return Err(Error::InvalidArgument(format!(
                "{:?} keeps {} moment buffers, got {}",
                self.kind,
                self.kind.slots(),
                slots.len()
            )));
        }
        self.steps = steps;
        self.slots = slots;
        Ok(())
    }

    fn ensure_slots<M: Parameterized<T>>(&mut self, model: &M) -> Result<()> {
        let mut shapes = Vec::new();
        model.visit_params(&mut |p| shapes.push(p.value.shape().to_vec()));
        for slot in &mut self.slots {
            if slot.is_empty() {
                *slot = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            }
            let matches = slot.len() == shapes.len() && slot.iter().zip(&shapes).all(|(t, s)| t.shape() == s.as_slice());
            if !matches {
                return Err(Error::InvalidArgument(
                    "optimizer state does not match the model's parameters".into(),
                ));
            }
        }
        Ok(())
    }

    /// Applies one update from `grads`. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &Gradients<T>) -> Result<()> {
        self.ensure_slots(model)?;
        self.steps += 1;
        let h = self.hyper;
        let lr = T::lit(h.learning_rate);
        let kind = self.kind;
        let t = self.steps as i32;
        let bc1 = T::lit(1.0 - h.beta1.powi(t));
        let bc2 = T::lit(1.0 - h.beta2.powi(t));
        let (b1, b2, eps, mu) = (T::lit(h.beta1), T::lit(h.beta2), T::lit(h.eps), T::lit(h.momentum));
        let one = T::one();
        let mut index = 0;
        let slots = &mut self.slots;
        model.visit_params_mut(&mut |p| {
            let g = grads.get(p.id);
            let grad = |k: usize| g.map_or(T::zero(), |g| g.data()[k]);
            let theta = p.value.data_mut();
            match kind {
                OptimizerKind::Sgd => {
                    for (k, th) in theta.iter_mut().enumerate() {
                        *th = *th - lr * grad(k);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let v = slots[0][index].data_mut();
                    for (k, th) in theta.iter_mut().enumerate() {
                        v[k] = mu * v[k] + grad(k);
                        *th = *th - lr * v[k];
                    }
                }
                OptimizerKind::Adam => {
                    let (first, rest) = slots.split_at_mut(1);
                    let m = first[0][index].data_mut();
                    let v = rest[0][index].data_mut();
                    for (k, th) in theta.iter_mut().enumerate() {
                        let gk = grad(k);
                        m[k] = b1 * m[k] + (one - b1) * gk;
                        v[k] = b2 * v[k] + (one - b2) * gk * gk;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            index += 1;
        });
        Ok(())
    }
}
