//! Reverse-mode differentiation over a recorded operation list.

use std::collections::HashMap;

use super::conv::{self, ConvGeometry};
use super::ops;
use super::param::{ConvParams, DenseParams, Gradients, Param, ParamId};
use super::resample::{ResampleMode, ResamplePlan};
use super::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Resample { x: Var, plan: ResamplePlan },
    Gap(Var),
    Dense { v: Var, w: Var, b: Var },
    Softmax(Var),
    ChannelSoftmax(Var),
    ChannelScale { x: Var, gate: Var },
    Pick { v: Var, index: usize },
    MulScalar { x: Var, s: Var },
    Sum(Var),
    SoftDice { probs: Var, labels: Vec<u8>, eps: f64 },
    CrossEntropy { probs: Var, labels: Vec<u8> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation graph recorded during a forward pass.
///
/// Every method evaluates its operation eagerly and records it;
/// [`Tape::backward`] then replays the list in reverse. Parameters enter
/// through [`Tape::param`], which deduplicates by [`ParamId`] so a
/// parameter used several times gets one leaf.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Zeroes entries below the square root of the smallest normal number
/// (about 1e-19 in `f32`, 1e-154 in `f64`). Once a softmax saturates, the
/// products of such values inside later kernels are subnormal, and
/// subnormal arithmetic is orders of magnitude slower on common CPUs.
fn flush_negligible<T: Scalar>(t: &mut Tensor<T>) {
    let tiny = T::min_positive_value().sqrt();
    for v in t.data_mut() {
        if v.abs() < tiny {
            *v = T::zero();
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, mut g: Tensor<T>) {
    flush_negligible(&mut g);
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        flush_negligible(&mut value);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Which side of each non-differentiable point the recorded forward pass
    /// took: one entry per relu input element and per clamped
    /// cross-entropy term. Two passes with equal patterns lie on the same
    /// smooth piece of the loss.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| v > T::zero())),
                Op::CrossEntropy { probs, labels } => {
                    let p = self.value(*probs).data();
                    let n = labels.len();
                    out.extend(
                        labels
                            .iter()
                            .enumerate()
                            .map(|(s, &l)| p[l as usize * n + s].as_f64() > ops::CE_CLAMP),
                    );
                }
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Consumes the tape and returns the value of `v`.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Param(p.id));
        self.params.insert(p.id, v);
        v
    }

    pub fn conv(&mut self, x: Var, p: &ConvParams<T>, act: Activation) -> Result<Var> {
        let w = self.param(&p.weight);
        let b = self.param(&p.bias);
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), &p.spec)?;
        if self.shape(b) != [geom.k_out] {
            return Err(Error::shape("conv bias", self.shape(b), &[geom.k_out]));
        }
        let y = conv::forward(self.value(x), self.value(w), self.value(b), &geom);
        let y = self.push(y, Op::Conv { x, w, b, geom });
        Ok(self.activate(y, act))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::None => x,
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::eltwise_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).scale(factor);
        self.push(y, Op::Scale(x, factor))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&ts)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn resample(&mut self, x: Var, target: &[usize], mode: ResampleMode) -> Result<Var> {
        if self.value(x).spatial_shape() == target {
            return Ok(x);
        }
        let plan = ResamplePlan::new(self.shape(x), target, mode)?;
        let y = plan.forward(self.value(x));
        Ok(self.push(y, Op::Resample { x, plan }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap(x)))
    }

    pub fn dense(&mut self, v: Var, p: &DenseParams<T>, act: Activation) -> Result<Var> {
        let w = self.param(&p.weight);
        let b = self.param(&p.bias);
        let y = ops::dense(self.value(v), self.value(w), self.value(b))?;
        let y = self.push(y, Op::Dense { v, w, b });
        Ok(self.activate(y, act))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let y = ops::softmax(self.value(v))?;
        Ok(self.push(y, Op::Softmax(v)))
    }

    /// Softmax across channels at every spatial position.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::channel_softmax(self.value(x))?;
        Ok(self.push(y, Op::ChannelSoftmax(x)))
    }

    /// `out[j] = gate[j] * x[j]` per channel.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let y = ops::channel_scale(self.value(x), self.value(gate))?;
        Ok(self.push(y, Op::ChannelScale { x, gate }))
    }

    /// Element `index` of a vector as a scalar.
    pub fn pick(&mut self, v: Var, index: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 || index >= t.len() {
            return Err(Error::InvalidArgument(format!(
                "pick {index} from shape {:?}",
                t.shape()
            )));
        }
        let y = Tensor::scalar(t.data()[index]);
        Ok(self.push(y, Op::Pick { v, index }))
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let y = self.value(x).scale(sv);
        Ok(self.push(y, Op::MulScalar { x, s }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(y, Op::Sum(x))
    }

    /// `1 - mean_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)` over
    /// foreground classes `c >= 1`.
    pub fn soft_dice_loss(&mut self, probs: Var, labels: &[u8], eps: f64) -> Result<Var> {
        let y = ops::soft_dice(self.value(probs), labels, eps)?;
        Ok(self.push(
            Tensor::scalar(y),
            Op::SoftDice {
                probs,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Mean over voxels of `-ln max(p[label], 1e-12)`.
    pub fn cross_entropy_loss(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        let y = ops::cross_entropy(self.value(probs), labels)?;
        Ok(self.push(
            Tensor::scalar(y),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Propagates `d loss / d node` back to every parameter leaf and adds the
    /// result into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidShape {
                shape: lv.shape().to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let req = self.requires_grad(loss.0);
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !req[i] {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Conv { x, w, b, geom } => {
                    let need_dx = req[x.0];
                    let cg = conv::backward(self.value(*x), self.value(*w), &g, geom, need_dx);
                    if need_dx {
                        add_into(&mut adj[x.0], cg.dx);
                    }
                    add_into(&mut adj[w.0], cg.dw);
                    add_into(&mut adj[b.0], cg.db);
                }
                Op::Relu(x) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| if y > T::zero() { d } else { T::zero() })
                        .collect();
                    add_into(&mut adj[x.0], Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Sigmoid(x) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| d * y * (T::one() - y))
                        .collect();
                    add_into(&mut adj[x.0], Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    add_into(&mut adj[b.0], g.clone());
                    add_into(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(tb.data()).map(|(&d, &y)| d * y).collect();
                    let db = g.data().iter().zip(ta.data()).map(|(&d, &x)| d * x).collect();
                    add_into(&mut adj[a.0], Tensor::from_parts(g.shape().to_vec(), da));
                    add_into(&mut adj[b.0], Tensor::from_parts(g.shape().to_vec(), db));
                }
                Op::Scale(x, f) => add_into(&mut adj[x.0], g.scale(*f)),
                Op::Concat(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let c = self.value(*x).channels();
                        add_into(&mut adj[x.0], g.slice_channels(start, start + c)?);
                        start += c;
                    }
                }
                Op::Resample { x, plan } => {
                    add_into(&mut adj[x.0], plan.backward(self.shape(*x), &g));
                }
                Op::Gap(x) => add_into(&mut adj[x.0], ops::global_avg_pool_backward(self.value(*x), &g)),
                Op::Dense { v, w, b } => {
                    let (dv, dw) = ops::dense_backward(self.value(*v), self.value(*w), &g);
                    add_into(&mut adj[v.0], dv);
                    add_into(&mut adj[w.0], dw);
                    add_into(&mut adj[b.0], g);
                }
                Op::Softmax(v) => add_into(&mut adj[v.0], ops::softmax_backward(&node.value, &g)),
                Op::ChannelSoftmax(x) => {
                    add_into(&mut adj[x.0], ops::channel_softmax_backward(&node.value, &g))
                }
                Op::ChannelScale { x, gate } => {
                    let (dx, dgate) = ops::channel_scale_backward(self.value(*x), self.value(*gate), &g);
                    add_into(&mut adj[x.0], dx);
                    add_into(&mut adj[gate.0], dgate);
                }
                Op::Pick { v, index } => {
                    let mut dv = Tensor::zeros(self.shape(*v));
                    dv.data_mut()[*index] = g.data()[0];
                    add_into(&mut adj[v.0], dv);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).data()[0];
                    let ds: T = g.data().iter().zip(self.value(*x).data()).map(|(&d, &v)| d * v).sum();
                    add_into(&mut adj[x.0], g.scale(sv));
                    add_into(&mut adj[s.0], Tensor::from_parts(self.shape(*s).to_vec(), vec![ds]));
                }
                Op::Sum(x) => add_into(&mut adj[x.0], Tensor::full(self.shape(*x), g.data()[0])),
                Op::SoftDice { probs, labels, eps } => {
                    let dp = ops::soft_dice_backward(self.value(*probs), labels, *eps, g.data()[0]);
                    add_into(&mut adj[probs.0], dp);
                }
                Op::CrossEntropy { probs, labels } => {
                    let dp = ops::cross_entropy_backward(self.value(*probs), labels, g.data()[0]);
                    add_into(&mut adj[probs.0], dp);
                }
            }
        }
        Ok(())
    }

    /// Marks nodes with a parameter upstream. Inputs that do not depend on
    /// parameters skip the data-gradient of convolutions.
    fn requires_grad(&self, upto: usize) -> Vec<bool> {
        let mut req = vec![false; upto + 1];
        for i in 0..=upto {
            req[i] = match &self.nodes[i].op {
                Op::Input => false,
                Op::Param(_) => true,
                op => op_inputs(op).iter().any(|v| req[v.0]),
            };
        }
        req
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => Vec::new(),
        Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Scale(x, _)
        | Op::Gap(x)
        | Op::Softmax(x)
        | Op::ChannelSoftmax(x)
        | Op::Sum(x)
        | Op::Resample { x, .. }
        | Op::Pick { v: x, .. } => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Concat(xs) => xs.clone(),
        Op::Dense { v, w, b } => vec![*v, *w, *b],
        Op::ChannelScale { x, gate } => vec![*x, *gate],
        Op::MulScalar { x, s } => vec![*x, *s],
        Op::SoftDice { probs, .. } | Op::CrossEntropy { probs, .. } => vec![*probs],
    }
}
