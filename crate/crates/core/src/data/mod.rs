//! Volumes, labels, the SVOL file format, synthetic phantoms,
//! intensity normalization and dataset splitting.

mod phantom;
mod svol;

pub use phantom::{generate_phantom, IntensityTable, PhantomSpec, Tissue};
pub use svol::{
    decode_svol, encode_svol, read_image, read_labels, read_svol, write_svol, SvolData, SvolError, SVOL_MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Largest label value: 0 background, 1 necrosis / non-enhancing core,
/// 2 edema, 3 enhancing tumor.
pub const MAX_LABEL: u8 = 3;

/// Modality order of the image channels.
pub const MODALITIES: [&str; 4] = ["FLAIR", "T1", "T1ce", "T2"];

fn check_spacing(spacing: &[f32], rank: usize) -> Result<()> {
    if spacing.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "spacing has {} entries for spatial rank {rank}",
            spacing.len()
        )));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn check_spatial_rank(shape: &[usize]) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "spatial rank must be 2 or 3".into(),
        });
    }
    Ok(())
}

/// Multi-channel image `[C, spatial...]` with per-axis voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    image: Tensor<f32>,
    spacing: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(image: Tensor<f32>, spacing: Vec<f32>) -> Result<Self> {
        if image.rank() < 1 {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "image needs a channel axis".into(),
            });
        }
        check_spatial_rank(image.spatial_shape())?;
        check_spacing(&spacing, image.rank() - 1)?;
        Ok(MultiModalVolume { image, spacing })
    }

    pub fn image(&self) -> &Tensor<f32> {
        &self.image
    }

    pub fn into_image(self) -> Tensor<f32> {
        self.image
    }

    pub fn spacing(&self) -> &[f32] {
        &self.spacing
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.image.spatial_shape()
    }

    /// The image converted to the network scalar type.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.image.cast()
    }
}

/// Per-voxel class labels over a spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    shape: Vec<usize>,
    labels: Vec<u8>,
    spacing: Vec<f32>,
}

impl LabelVolume {
    /// Checks the shape, the spacing and that every label is at most
    /// [`MAX_LABEL`].
    pub fn new(shape: Vec<usize>, labels: Vec<u8>, spacing: Vec<f32>) -> Result<Self> {
        check_spatial_rank(&shape)?;
        if shape.contains(&0) || numel(&shape) != labels.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("label buffer holds {} values", labels.len()),
            });
        }
        check_spacing(&spacing, shape.len())?;
        check_label_range(&labels)?;
        Ok(LabelVolume { shape, labels, spacing })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spacing(&self) -> &[f32] {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn check_label_range(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l > MAX_LABEL) {
        Some(index) => Err(Error::LabelOutOfRange {
            value: labels[index],
            index,
        }),
        None => Ok(()),
    }
}

/// Maps the BraTS file convention (0, 1, 2, 4) onto the internal labels
/// (0, 1, 2, 3). Any other value is rejected.
pub fn remap_brats_labels(labels: &[u8]) -> Result<Vec<u8>> {
    labels
        .iter()
        .enumerate()
        .map(|(index, &l)| match l {
            0..=2 => Ok(l),
            4 => Ok(3),
            value => Err(Error::LabelOutOfRange { value, index }),
        })
        .collect()
}

/// Per-channel standardization over each channel's nonzero voxels.
///
/// Voxels that are exactly zero (background) stay zero. A channel with
/// no nonzero voxels or zero variance over them becomes all zeros.
pub fn normalize_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.spatial_len();
    let mut out = Tensor::zeros(x.shape());
    for c in 0..x.channels() {
        let src = x.channel(c);
        let (mut count, mut sum) = (0usize, 0.0f64);
        for v in src.iter().filter(|v| !v.is_zero()) {
            count += 1;
            sum += v.as_f64();
        }
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        let var = src
            .iter()
            .filter(|v| !v.is_zero())
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        if !(std > 0.0) || std <= mean.abs() * 1e-12 {
            continue;
        }
        let dst = &mut out.data_mut()[c * n..(c + 1) * n];
        for (d, s) in dst.iter_mut().zip(src) {
            if !s.is_zero() {
                *d = T::lit((s.as_f64() - mean) / std);
            }
        }
    }
    out
}

pub fn normalize(v: &MultiModalVolume) -> MultiModalVolume {
    MultiModalVolume {
        image: normalize_tensor(&v.image),
        spacing: v.spacing.clone(),
    }
}

/// A three-way partition of case identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<I> {
    pub train: Vec<I>,
    pub val: Vec<I>,
    pub test: Vec<I>,
}

/// Seeded shuffle-and-partition into train / validation / test.
///
/// Identifiers are sorted before shuffling, so the result depends only on
/// the set of ids and the seed. Validation and test sizes are
/// `floor(n * ratio)`; the remainder goes to train.
pub fn split<I: Clone + Ord>(ids: &[I], ratios: [f64; 3], seed: u64) -> Result<Split<I>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must lie in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let count = |r: f64| (((n as f64) * r + 1e-9).floor() as usize).min(n);
    let n_val = count(ratios[1]);
    let n_test = count(ratios[2]).min(n - n_val);
    let test = order.split_off(n - n_test);
    let val = order.split_off(n - n_test - n_val);
    Ok(Split {
        train: order,
        val,
        test,
    })
}
