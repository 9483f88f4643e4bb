//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's kernels: every routine is a
//! direct loop over the defining formula.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slca_core::Tensor64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n: usize = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct convolution: one loop per output channel, output coordinate,
/// input channel and kernel tap. 2-D inputs are `[C, H, W]`.
pub fn conv_oracle(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    b: &[f64],
    stride: usize,
    dilation: usize,
    same: bool,
) -> (Vec<usize>, Vec<f64>) {
    let three = x_shape.len() == 4;
    let (c_in, d, h, wd) = if three {
        (x_shape[0], x_shape[1], x_shape[2], x_shape[3])
    } else {
        (x_shape[0], 1, x_shape[1], x_shape[2])
    };
    let k_out = w_shape[0];
    let m = w_shape[2];
    let md = if three { m } else { 1 };
    let out_ext = |n: usize, kk: usize| -> (usize, isize) {
        if same {
            ((n + stride - 1) / stride, (((kk - 1) * dilation) / 2) as isize)
        } else {
            let sp = (kk - 1) * dilation + 1;
            ((n - sp) / stride + 1, 0)
        }
    };
    let (od, pd) = if three { out_ext(d, m) } else { (1, 0) };
    let (oh, ph) = out_ext(h, m);
    let (ow, pw) = out_ext(wd, m);
    let mut out = vec![0.0; k_out * od * oh * ow];
    for k in 0..k_out {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[k];
                    for c in 0..c_in {
                        for kz in 0..md {
                            for ky in 0..m {
                                for kx in 0..m {
                                    let iz = (oz * stride + kz * dilation) as isize - pd;
                                    let iy = (oy * stride + ky * dilation) as isize - ph;
                                    let ix = (ox * stride + kx * dilation) as isize - pw;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((c * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((k * c_in + c) * md + kz) * m + ky) * m + kx;
                                    acc += w[wi] * x[xi];
                                }
                            }
                        }
                    }
                    out[((k * od + oz) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    let shape = if three {
        vec![k_out, od, oh, ow]
    } else {
        vec![k_out, oh, ow]
    };
    (shape, out)
}

pub fn gap_oracle(x: &[f64], channels: usize) -> Vec<f64> {
    let n = x.len() / channels;
    (0..channels)
        .map(|c| {
            let mut s = 0.0;
            for i in 0..n {
                s += x[c * n + i];
            }
            s / n as f64
        })
        .collect()
}

/// `act(W^T v + B)` with `W` stored `[n, k]`.
pub fn dense_oracle(v: &[f64], w: &[f64], b: &[f64], relu: bool) -> Vec<f64> {
    let k = b.len();
    (0..k)
        .map(|j| {
            let mut s = b[j];
            for (i, vi) in v.iter().enumerate() {
                s += w[i * k + j] * vi;
            }
            if relu {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

pub fn softmax_oracle(v: &[f64]) -> Vec<f64> {
    let z: f64 = v.iter().map(|x| x.exp()).sum();
    v.iter().map(|x| x.exp() / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn add_oracle(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len()).map(|i| a[i] + b[i]).collect()
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Nearest-neighbor resample of one axis by index arithmetic.
pub fn nearest_1d(src: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|o| src[o * src.len() / len]).collect()
}

/// Nearest-neighbor resample of a `[C, spatial...]` buffer to `target`,
/// mapping output index `o` on each axis to source index `o * src / dst`.
pub fn nearest_oracle(x: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let c = shape[0];
    let src = &shape[1..];
    let src_len: usize = src.iter().product();
    let dst_len: usize = target.iter().product();
    let mut out = Vec::with_capacity(c * dst_len);
    for ch in 0..c {
        for flat in 0..dst_len {
            let mut rem = flat;
            let mut coords = vec![0; target.len()];
            for a in (0..target.len()).rev() {
                coords[a] = rem % target[a];
                rem /= target[a];
            }
            let mut si = 0;
            for a in 0..target.len() {
                si = si * src[a] + coords[a] * src[a] / target[a];
            }
            out.push(x[ch * src_len + si]);
        }
    }
    out
}

/// Squeeze-and-excitation gates from explicit dense weights.
pub fn se_gates_oracle(x: &[f64], channels: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let pooled = gap_oracle(x, channels);
    let h = dense_oracle(&pooled, w1, b1, true);
    dense_oracle(&h, w2, b2, false).into_iter().map(sigmoid).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
    }
}

/// Voxel-loop confusion counts `(tp, fp, fn, tn)`.
pub fn confusion_oracle(pred: &[bool], gt: &[bool]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            tp += 1;
        } else if pred[i] {
            fp += 1;
        } else if gt[i] {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

/// Membership by explicit label sets: WT {1,2,3}, TC {1,3}, ET {3}.
pub fn region_oracle(label: u8, region: usize) -> bool {
    match region {
        0 => label == 1 || label == 2 || label == 3,
        1 => label == 1 || label == 3,
        _ => label == 3,
    }
}

/// Surface voxels found by probing all six (or four) face neighbors with
/// signed coordinates. Works for 2-D and 3-D grids.
pub fn surface_oracle(mask: &[bool], shape: &[usize], spacing: &[f64]) -> Vec<[f64; 3]> {
    let dims: Vec<i64> = {
        let mut d = vec![1i64; 3 - shape.len()];
        d.extend(shape.iter().map(|&s| s as i64));
        d
    };
    let sp: Vec<f64> = {
        let mut s = vec![0.0; 3 - shape.len()];
        s.extend_from_slice(spacing);
        s
    };
    let at = |z: i64, y: i64, x: i64| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= dims[0] || y >= dims[1] || x >= dims[2] {
            return false;
        }
        mask[((z * dims[1] + y) * dims[2] + x) as usize]
    };
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !at(z, y, x) {
                    continue;
                }
                let mut nb = vec![(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                    .into_iter()
                    .map(|(yy, xx)| at(z, yy, xx))
                    .collect::<Vec<_>>();
                if shape.len() == 3 {
                    nb.push(at(z - 1, y, x));
                    nb.push(at(z + 1, y, x));
                }
                if nb.iter().any(|&n| !n) {
                    let c = [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]];
                    // Put 2-D points in the library's (y, x, 0) layout.
                    if shape.len() == 2 {
                        out.push([c[1], c[2], 0.0]);
                    } else {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

pub fn percentile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let i = rank as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (rank - i as f64)) + v[i + 1] * (rank - i as f64)
}

/// O(|T| |P|) pairwise percentile Hausdorff distance.
pub fn hausdorff_oracle(t: &[[f64; 3]], p: &[[f64; 3]], q: f64) -> f64 {
    let directed = |a: &[[f64; 3]], b: &[[f64; 3]]| -> Vec<f64> {
        a.iter()
            .map(|x| {
                b.iter()
                    .map(|y| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    percentile_oracle(directed(t, p), q).max(percentile_oracle(directed(p, t), q))
}
