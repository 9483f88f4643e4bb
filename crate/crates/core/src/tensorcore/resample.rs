//! Channel-wise spatial interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    #[default]
    Nearest,
    /// Linear along every axis (bilinear in 2-D, trilinear in 3-D), with
    /// half-pixel centers and edge clamping.
    Trilinear,
}

/// Source taps `(index, weight)` for each output index along one axis.
fn axis_taps(src: usize, dst: usize, mode: ResampleMode) -> Vec<[(usize, f64); 2]> {
    (0..dst)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (o * src) / dst;
                [(i, 1.0), (i, 0.0)]
            }
            ResampleMode::Trilinear => {
                let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                let f = pos - lo as f64;
                [(lo, 1.0 - f), (hi, f)]
            }
        })
        .collect()
}

/// Precomputed interpolation plan between two spatial shapes.
#[derive(Clone, Debug)]
pub(crate) struct ResamplePlan {
    channels: usize,
    src: [usize; 3],
    dst: [usize; 3],
    taps: [Vec<[(usize, f64); 2]>; 3],
    out_shape: Vec<usize>,
    identity: bool,
}

fn lift(s: &[usize]) -> [usize; 3] {
    match s.len() {
        1 => [1, 1, s[0]],
        2 => [1, s[0], s[1]],
        _ => [s[0], s[1], s[2]],
    }
}

impl ResamplePlan {
    pub fn new(x_shape: &[usize], target: &[usize], mode: ResampleMode) -> Result<Self> {
        let sr = x_shape.len().saturating_sub(1);
        if !(1..=3).contains(&sr) || target.len() != sr {
            return Err(Error::shape("resample", x_shape, target));
        }
        if target.iter().any(|&t| t == 0) {
            return Err(Error::InvalidArgument(format!("resample target {target:?} has a zero extent")));
        }
        let src = lift(&x_shape[1..]);
        let dst = lift(target);
        let taps = [0, 1, 2].map(|a| axis_taps(src[a], dst[a], mode));
        let mut out_shape = vec![x_shape[0]];
        out_shape.extend_from_slice(target);
        Ok(ResamplePlan {
            channels: x_shape[0],
            src,
            dst,
            taps,
            out_shape,
            identity: x_shape[1..] == *target,
        })
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        if self.identity {
            return x.clone();
        }
        let [sd, sh, sw] = self.src;
        let [dd, dh, dw] = self.dst;
        let in_vol = sd * sh * sw;
        let mut out = Vec::with_capacity(self.channels * dd * dh * dw);
        for c in 0..self.channels {
            let xc = &x.data()[c * in_vol..(c + 1) * in_vol];
            for tz in &self.taps[0] {
                for ty in &self.taps[1] {
                    for tx in &self.taps[2] {
                        let mut acc = T::zero();
                        for &(iz, wz) in tz {
                            if wz == 0.0 {
                                continue;
                            }
                            for &(iy, wy) in ty {
                                if wy == 0.0 {
                                    continue;
                                }
                                for &(ix, wx) in tx {
                                    if wx == 0.0 {
                                        continue;
                                    }
                                    let v = xc[(iz * sh + iy) * sw + ix];
                                    acc = acc + T::lit(wz * wy * wx) * v;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::from_parts(self.out_shape.clone(), out)
    }

    /// Adjoint of `forward`.
    pub fn backward<T: Scalar>(&self, x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
        if self.identity {
            return dy.clone();
        }
        let [sd, sh, sw] = self.src;
        let [dd, dh, dw] = self.dst;
        let in_vol = sd * sh * sw;
        let out_vol = dd * dh * dw;
        let mut dx = vec![T::zero(); self.channels * in_vol];
        for c in 0..self.channels {
            let dxc = &mut dx[c * in_vol..(c + 1) * in_vol];
            let dyc = &dy.data()[c * out_vol..(c + 1) * out_vol];
            let mut p = 0;
            for tz in &self.taps[0] {
                for ty in &self.taps[1] {
                    for tx in &self.taps[2] {
                        let g = dyc[p];
                        p += 1;
                        for &(iz, wz) in tz {
                            if wz == 0.0 {
                                continue;
                            }
                            for &(iy, wy) in ty {
                                if wy == 0.0 {
                                    continue;
                                }
                                for &(ix, wx) in tx {
                                    if wx == 0.0 {
                                        continue;
                                    }
                                    let i = (iz * sh + iy) * sw + ix;
                                    dxc[i] = dxc[i] + T::lit(wz * wy * wx) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(x_shape.to_vec(), dx)
    }
}
