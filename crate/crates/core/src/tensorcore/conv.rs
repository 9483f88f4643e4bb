//! Strided, dilated convolution over 2-D and 3-D channel-first maps.
//!
//! Both ranks run through one 3-D code path: a 2-D map `[C, H, W]` is
//! treated as `[C, 1, H, W]` with a depth-1 kernel. The product itself is
//! an im2col + GEMM, chunked over output planes to bound scratch memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding with margin `floor((m - 1) * r / 2)` on both sides.
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvSpec {
    pub fn strided(stride: usize) -> Self {
        ConvSpec {
            stride,
            ..Default::default()
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            dilation,
            ..Default::default()
        }
    }
}

/// Output extent of one spatial axis.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    spec: &ConvSpec,
) -> Result<usize> {
    let span = (kernel - 1) * spec.dilation + 1;
    match spec.padding {
        Padding::Same => Ok(input.div_ceil(spec.stride)),
        Padding::Valid => {
            if input < span {
                return Err(Error::InvalidArgument(format!(
                    "VALID convolution needs extent >= {span}, got {input}"
                )));
            }
            Ok((input - span) / spec.stride + 1)
        }
    }
}

/// Fully resolved index arithmetic for one convolution call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub k_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
    pub stride: usize,
    pub dilation: usize,
    pub spatial_rank: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        let spatial_rank = x_shape.len().saturating_sub(1);
        if !(2..=3).contains(&spatial_rank) {
            return Err(Error::InvalidShape {
                shape: x_shape.to_vec(),
                reason: "conv input must be [C, S...] with spatial rank 2 or 3".into(),
            });
        }
        if w_shape.len() != spatial_rank + 2 {
            return Err(Error::shape("conv", x_shape, w_shape));
        }
        if w_shape[1] != x_shape[0] {
            return Err(Error::shape("conv", x_shape, w_shape));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidKernel(format!(
                "stride and dilation must be >= 1 (stride {}, dilation {})",
                spec.stride, spec.dilation
            )));
        }
        let ksp = &w_shape[2..];
        if let Some(&m) = ksp.iter().find(|&&m| m % 2 == 0) {
            return Err(Error::InvalidKernel(format!("kernel extent {m} is even")));
        }
        let lift = |s: &[usize]| -> [usize; 3] {
            if s.len() == 2 {
                [1, s[0], s[1]]
            } else {
                [s[0], s[1], s[2]]
            }
        };
        let input = lift(&x_shape[1..]);
        let kernel = lift(ksp);
        let mut output = [1; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            if spatial_rank == 2 && a == 0 {
                continue;
            }
            output[a] = conv_out_extent(input[a], kernel[a], spec)?;
            if spec.padding == Padding::Same {
                pad[a] = (kernel[a] - 1) * spec.dilation / 2;
            }
        }
        Ok(ConvGeometry {
            c_in: x_shape[0],
            k_out: w_shape[0],
            input,
            kernel,
            output,
            pad,
            stride: spec.stride,
            dilation: spec.dilation,
            spatial_rank,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.k_out];
        s.extend_from_slice(&self.output[3 - self.spatial_rank..]);
        s
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Pointwise kernels with no stride read the input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        const TARGET_COLS: usize = 1024;
        let per = (TARGET_COLS / self.plane()).max(1);
        let depth = self.output[0];
        (0..depth).step_by(per).map(move |z0| (z0, (z0 + per).min(depth)))
    }

    /// Valid output range `[lo, hi)` along axis `a` for kernel tap `k`.
    fn valid_range(&self, a: usize, k: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = (k * self.dilation) as isize - self.pad[a] as isize;
        let n_in = self.input[a] as isize;
        let n_out = self.output[a] as isize;
        // o * s + off in [0, n_in)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - 1 - off < 0 {
            0
        } else {
            ((n_in - 1 - off) / s + 1).min(n_out)
        };
        (lo.min(n_out) as usize, hi.max(lo.min(n_out)) as usize)
    }

    fn input_index(&self, a: usize, o: usize, k: usize) -> usize {
        (o * self.stride + k * self.dilation) - self.pad[a]
    }
}

/// Gathers input patches for output planes `[z0, z1)` into a
/// `rows x cols` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, z0: usize, z1: usize, col: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let ncols = (z1 - z0) * oh * ow;
    let in_vol = g.in_vol();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            let (zlo, zhi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (ylo, yhi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, kx);
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let mut p = 0;
                    for oz in z0..z1 {
                        if oz < zlo || oz >= zhi {
                            dst[p..p + oh * ow].fill(T::zero());
                            p += oh * ow;
                            continue;
                        }
                        let iz = g.input_index(0, oz, kz);
                        for oy in 0..oh {
                            let line = &mut dst[p..p + ow];
                            p += ow;
                            if oy < ylo || oy >= yhi || xlo >= xhi {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = g.input_index(1, oy, ky);
                            let base = (iz * ih + iy) * iw;
                            line[..xlo].fill(T::zero());
                            line[xhi..].fill(T::zero());
                            let ix0 = g.input_index(2, xlo, kx);
                            if g.stride == 1 {
                                line[xlo..xhi]
                                    .copy_from_slice(&xc[base + ix0..base + ix0 + (xhi - xlo)]);
                            } else {
                                for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                    *v = xc[base + ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input grid (adjoint of
/// `im2col`).
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, z0: usize, z1: usize, dx: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let ncols = (z1 - z0) * oh * ow;
    let in_vol = g.in_vol();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            let (zlo, zhi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (ylo, yhi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, kx);
                    let src = &col[row * ncols..(row + 1) * ncols];
                    row += 1;
                    if xlo >= xhi {
                        continue;
                    }
                    let ix0 = g.input_index(2, xlo, kx);
                    for oz in z0.max(zlo)..z1.min(zhi) {
                        let iz = g.input_index(0, oz, kz);
                        for oy in ylo..yhi {
                            let iy = g.input_index(1, oy, ky);
                            let base = (iz * ih + iy) * iw + ix0;
                            let p = ((oz - z0) * oh + oy) * ow;
                            let line = &src[p + xlo..p + xhi];
                            for (j, &v) in line.iter().enumerate() {
                                dxc[base + j * g.stride] = dxc[base + j * g.stride] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[k] = w[k] (*) x + b[k]` without activation.
pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let rows = g.rows();
    let out_vol = g.out_vol();
    let mut y = vec![T::zero(); g.k_out * out_vol];
    if g.is_pointwise() {
        gemm(
            g.k_out,
            rows,
            out_vol,
            T::one(),
            w.data(),
            MatView::row_major(rows),
            x.data(),
            MatView::row_major(out_vol),
            T::zero(),
            &mut y,
            MatView::row_major(out_vol),
        );
    } else {
        let mut col = Vec::new();
        for (z0, z1) in g.chunks() {
            let ncols = (z1 - z0) * g.plane();
            col.resize(rows * ncols, T::zero());
            im2col(x.data(), g, z0, z1, &mut col);
            gemm(
                g.k_out,
                rows,
                ncols,
                T::one(),
                w.data(),
                MatView::row_major(rows),
                &col,
                MatView::row_major(ncols),
                T::zero(),
                &mut y,
                MatView::row_major(out_vol).at(z0 * g.plane()),
            );
        }
    }
    for (k, yk) in y.chunks_mut(out_vol).enumerate() {
        let bk = b.data()[k];
        for v in yk {
            *v = *v + bk;
        }
    }
    Tensor::from_parts(g.output_shape(), y)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeometry,
    need_dx: bool,
) -> ConvGrads<T> {
    let rows = g.rows();
    let out_vol = g.out_vol();
    let db: Vec<T> = dy.data().chunks(out_vol).map(|c| c.iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); g.k_out * rows];
    let mut dx = vec![T::zero(); x.len()];
    if g.is_pointwise() {
        // dw = dy * x^T
        gemm(
            g.k_out,
            out_vol,
            rows,
            T::one(),
            dy.data(),
            MatView::row_major(out_vol),
            x.data(),
            MatView::transposed(out_vol),
            T::zero(),
            &mut dw,
            MatView::row_major(rows),
        );
        if need_dx {
            gemm(
                rows,
                g.k_out,
                out_vol,
                T::one(),
                w.data(),
                MatView::transposed(rows),
                dy.data(),
                MatView::row_major(out_vol),
                T::zero(),
                &mut dx,
                MatView::row_major(out_vol),
            );
        }
    } else {
        let mut col = Vec::new();
        for (z0, z1) in g.chunks() {
            let ncols = (z1 - z0) * g.plane();
            let dy_view = MatView::row_major(out_vol).at(z0 * g.plane());
            col.resize(rows * ncols, T::zero());
            im2col(x.data(), g, z0, z1, &mut col);
            gemm(
                g.k_out,
                ncols,
                rows,
                T::one(),
                dy.data(),
                dy_view,
                &col,
                MatView::transposed(ncols),
                T::one(),
                &mut dw,
                MatView::row_major(rows),
            );
            if need_dx {
                gemm(
                    rows,
                    g.k_out,
                    ncols,
                    T::one(),
                    w.data(),
                    MatView::transposed(rows),
                    dy.data(),
                    dy_view,
                    T::zero(),
                    &mut col,
                    MatView::row_major(ncols),
                );
                col2im(&col, g, z0, z1, &mut dx);
            }
        }
    }
    ConvGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db: Tensor::from_parts(vec![g.k_out], db),
    }
}
