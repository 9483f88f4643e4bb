//! Forward and adjoint kernels for the non-convolution primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn eltwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("eltwise_add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of zero tensors".into()))?;
    if first.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: "concat_channels needs [C, S...] tensors".into(),
        });
    }
    let spatial = first.spatial_shape();
    let mut channels = 0;
    for x in xs {
        if x.rank() < 2 || x.spatial_shape() != spatial {
            return Err(Error::shape("concat_channels", first.shape(), x.shape()));
        }
        channels += x.channels();
    }
    let mut data = Vec::with_capacity(channels * first.spatial_len());
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(spatial);
    Ok(Tensor::from_parts(shape, data))
}

/// Mean of every channel over all spatial positions.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "global_avg_pool needs at least one spatial axis".into(),
        });
    }
    let n = x.spatial_len();
    let inv = T::one() / T::lit(n as f64);
    let data = (0..x.channels())
        .map(|c| x.channel(c).iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::vector(data))
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = x.spatial_len();
    let inv = T::one() / T::lit(n as f64);
    let mut data = Vec::with_capacity(x.len());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, n));
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `W^T v + B` for `v: [n]`, `W: [n, k]`, `B: [k]`.
pub fn dense<T: Scalar>(v: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 1 || w.rank() != 2 || w.shape()[0] != v.len() {
        return Err(Error::shape("dense", v.shape(), w.shape()));
    }
    let k = w.shape()[1];
    if b.shape() != [k] {
        return Err(Error::shape("dense bias", w.shape(), b.shape()));
    }
    let mut out = b.data().to_vec();
    for (i, &vi) in v.data().iter().enumerate() {
        let row = &w.data()[i * k..(i + 1) * k];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o = *o + wij * vi;
        }
    }
    Ok(Tensor::vector(out))
}

pub(crate) fn dense_backward<T: Scalar>(
    v: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let k = w.shape()[1];
    let dv = (0..v.len())
        .map(|i| {
            w.data()[i * k..(i + 1) * k]
                .iter()
                .zip(dy.data())
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    let mut dw = Vec::with_capacity(w.len());
    for &vi in v.data() {
        dw.extend(dy.data().iter().map(|&g| vi * g));
    }
    (Tensor::vector(dv), Tensor::from_parts(w.shape().to_vec(), dw))
}

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 1 {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "softmax expects a vector".into(),
        });
    }
    let m = v.data().iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.data().iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    Ok(Tensor::vector(e.into_iter().map(|x| x / z).collect()))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let dot: T = y.data().iter().zip(dy.data()).map(|(&a, &b)| a * b).sum();
    let data = y.data().iter().zip(dy.data()).map(|(&p, &g)| p * (g - dot)).collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

pub fn channel_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "channel_softmax needs [C, S...]".into(),
        });
    }
    let (c, n) = (x.channels(), x.spatial_len());
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for s in 0..n {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(d[k * n + s]);
        }
        let mut z = T::zero();
        for k in 0..c {
            let e = (d[k * n + s] - m).exp();
            out[k * n + s] = e;
            z = z + e;
        }
        for k in 0..c {
            out[k * n + s] = out[k * n + s] / z;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn channel_softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, n) = (y.channels(), y.spatial_len());
    let (p, g) = (y.data(), dy.data());
    let mut out = vec![T::zero(); p.len()];
    for s in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot = dot + p[k * n + s] * g[k * n + s];
        }
        for k in 0..c {
            out[k * n + s] = p[k * n + s] * (g[k * n + s] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(crate) fn channel_scale<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 || gate.shape() != [x.channels()] {
        return Err(Error::shape("channel_scale", x.shape(), gate.shape()));
    }
    let n = x.spatial_len();
    let mut data = Vec::with_capacity(x.len());
    for (c, &e) in gate.data().iter().enumerate() {
        data.extend(x.channel(c).iter().map(|&v| e * v));
    }
    debug_assert_eq!(data.len(), n * x.channels());
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let n = x.spatial_len();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgate = Vec::with_capacity(gate.len());
    for (c, &e) in gate.data().iter().enumerate() {
        let g = &dy.data()[c * n..(c + 1) * n];
        dx.extend(g.iter().map(|&d| d * e));
        dgate.push(g.iter().zip(x.channel(c)).map(|(&d, &v)| d * v).sum());
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(gate.shape().to_vec(), dgate),
    )
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<()> {
    if probs.rank() < 2 || probs.spatial_len() != labels.len() {
        return Err(Error::shape("loss", probs.shape(), &[labels.len()]));
    }
    if let Some(index) = labels.iter().position(|&l| l as usize >= probs.channels()) {
        return Err(Error::LabelOutOfRange {
            value: labels[index],
            index,
        });
    }
    Ok(())
}

struct DiceTerms {
    inter: f64,
    denom: f64,
}

fn dice_terms<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Vec<DiceTerms> {
    (1..probs.channels())
        .map(|c| {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for (&p, &l) in probs.channel(c).iter().zip(labels) {
                let p = p.as_f64();
                psum += p;
                if l as usize == c {
                    inter += p;
                    gsum += 1.0;
                }
            }
            DiceTerms {
                inter,
                denom: psum + gsum,
            }
        })
        .collect()
}

/// Soft Dice loss `1 - mean_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)`
/// over the foreground classes `c >= 1`.
pub fn soft_dice<T: Scalar>(probs: &Tensor<T>, labels: &[u8], eps: f64) -> Result<T> {
    check_labels(probs, labels)?;
    let terms = dice_terms(probs, labels);
    if terms.is_empty() {
        return Ok(T::zero());
    }
    let mean = terms
        .iter()
        .map(|t| (2.0 * t.inter + eps) / (t.denom + eps))
        .sum::<f64>()
        / terms.len() as f64;
    Ok(T::lit(1.0 - mean))
}

pub(crate) fn soft_dice_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    eps: f64,
    upstream: T,
) -> Tensor<T> {
    let n = probs.spatial_len();
    let terms = dice_terms(probs, labels);
    let mut out = vec![T::zero(); probs.len()];
    if terms.is_empty() {
        return Tensor::from_parts(probs.shape().to_vec(), out);
    }
    let scale = upstream.as_f64() / terms.len() as f64;
    for (i, t) in terms.iter().enumerate() {
        let c = i + 1;
        let d = t.denom + eps;
        let num = 2.0 * t.inter + eps;
        // d/dp of -(2I + eps)/(P + G + eps)
        let on = T::lit(-scale * (2.0 * d - num) / (d * d));
        let off = T::lit(scale * num / (d * d));
        for (s, &l) in labels.iter().enumerate() {
            out[c * n + s] = if l as usize == c { on } else { off };
        }
    }
    Tensor::from_parts(probs.shape().to_vec(), out)
}

pub(crate) const CE_CLAMP: f64 = 1e-12;

/// Mean over voxels of `-ln max(p[label], 1e-12)`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    check_labels(probs, labels)?;
    let n = probs.spatial_len();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(s, &l)| -probs.data()[l as usize * n + s].as_f64().max(CE_CLAMP).ln())
        .sum();
    Ok(T::lit(total / n as f64))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    upstream: T,
) -> Tensor<T> {
    let n = probs.spatial_len();
    let mut out = vec![T::zero(); probs.len()];
    let scale = upstream.as_f64() / n as f64;
    for (s, &l) in labels.iter().enumerate() {
        let i = l as usize * n + s;
        let p = probs.data()[i].as_f64();
        if p > CE_CLAMP {
            out[i] = T::lit(-scale / p);
        }
    }
    Tensor::from_parts(probs.shape().to_vec(), out)
}
