//! Deterministic synthetic tumor phantoms.
//!
//! A phantom is an ellipsoidal "brain" of healthy tissue in a zero
//! background containing one or more tumors. Each tumor is three nested
//! axis-aligned ellipsoids sharing a center: a necrotic core (label 1)
//! inside an enhancing shell (label 3) inside edema (label 2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tissue {
    Background,
    Healthy,
    Edema,
    Enhancing,
    Necrosis,
}

impl Tissue {
    pub fn label(self) -> u8 {
        match self {
            Tissue::Background | Tissue::Healthy => 0,
            Tissue::Necrosis => 1,
            Tissue::Edema => 2,
            Tissue::Enhancing => 3,
        }
    }
}

/// Mean intensity per tissue, in modality order FLAIR, T1, T1ce, T2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityTable {
    pub healthy: [f32; 4],
    pub necrosis: [f32; 4],
    pub edema: [f32; 4],
    pub enhancing: [f32; 4],
}

impl Default for IntensityTable {
    fn default() -> Self {
        IntensityTable {
            healthy: [0.5, 0.6, 0.5, 0.4],
            necrosis: [0.4, 0.3, 0.2, 0.8],
            edema: [0.9, 0.45, 0.45, 0.7],
            enhancing: [0.7, 0.5, 1.0, 0.6],
        }
    }
}

impl IntensityTable {
    pub fn get(&self, tissue: Tissue) -> [f32; 4] {
        match tissue {
            Tissue::Background => [0.0; 4],
            Tissue::Healthy => self.healthy,
            Tissue::Necrosis => self.necrosis,
            Tissue::Edema => self.edema,
            Tissue::Enhancing => self.enhancing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Extent `D` of every spatial axis.
    pub extent: usize,
    pub spatial_rank: usize,
    pub tumor_count: usize,
    /// Range of the edema semi-axes, in voxels.
    pub radius_range: [f64; 2],
    /// Necrotic core semi-axes as a fraction of the edema semi-axes.
    pub core_fraction: f64,
    /// Outer enhancing-shell semi-axes as a fraction of the edema semi-axes.
    pub enhancing_fraction: f64,
    /// Brain semi-axes as a fraction of `D`.
    pub brain_fraction: f64,
    pub intensities: IntensityTable,
    pub noise_sigma: f64,
    pub spacing: f32,
    pub max_retries: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            extent: 32,
            spatial_rank: 3,
            tumor_count: 1,
            radius_range: [5.0, 8.0],
            core_fraction: 0.4,
            enhancing_fraction: 0.7,
            brain_fraction: 0.42,
            intensities: IntensityTable::default(),
            noise_sigma: 0.05,
            spacing: 1.0,
            max_retries: 100,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if !(2..=3).contains(&self.spatial_rank) {
            return fail(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.extent < 4 {
            return fail(format!("extent must be >= 4, got {}", self.extent));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail(format!("radius_range must satisfy 0 < lo <= hi, got {:?}", self.radius_range));
        }
        if !(0.0 < self.core_fraction && self.core_fraction < self.enhancing_fraction && self.enhancing_fraction < 1.0) {
            return fail("radii must nest: 0 < core_fraction < enhancing_fraction < 1".into());
        }
        if !(self.brain_fraction > 0.0 && self.brain_fraction <= 0.5) {
            return fail(format!("brain_fraction must be in (0, 0.5], got {}", self.brain_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return fail(format!("spacing must be positive, got {}", self.spacing));
        }
        if self.max_retries == 0 {
            return fail("max_retries must be >= 1".into());
        }
        let t = &self.intensities;
        if [t.healthy, t.necrosis, t.edema, t.enhancing].iter().flatten().any(|v| !v.is_finite()) {
            return fail("intensities must be finite".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.extent; self.spatial_rank]
    }
}

struct Tumor {
    center: Vec<f64>,
    radii: Vec<f64>,
}

impl Tumor {
    /// Squared normalized ellipsoidal radius of `p`.
    fn rho2(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(&self.center)
            .zip(&self.radii)
            .map(|((x, c), r)| ((x - c) / r).powi(2))
            .sum()
    }
}

fn place_tumor(spec: &PhantomSpec, index: usize, rng: &mut ChaCha8Rng, mid: f64, brain: &[f64]) -> Result<Tumor> {
    let upper = (spec.extent - 1) as f64;
    let [lo, hi] = spec.radius_range;
    for _ in 0..spec.max_retries {
        let radii: Vec<f64> = (0..spec.spatial_rank).map(|_| rng.random_range(lo..=hi)).collect();
        let center: Vec<f64> = brain
            .iter()
            .map(|b| mid + rng.random_range(-0.5..=0.5) * b)
            .collect();
        let inside = center
            .iter()
            .zip(&radii)
            .all(|(c, r)| c - r >= 0.0 && c + r <= upper);
        if inside {
            return Ok(Tumor { center, radii });
        }
    }
    Err(Error::InvalidArgument(format!(
        "phantom: tumor {index} did not fit inside the volume after {} placements",
        spec.max_retries
    )))
}

/// Generates one phantom case. Identical specs give identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rank = spec.spatial_rank;
    let d = spec.extent;
    let mid = (d - 1) as f64 / 2.0;
    let brain: Vec<f64> = (0..rank)
        .map(|_| spec.brain_fraction * d as f64 * rng.random_range(0.9..=1.0))
        .collect();
    let tumors = (0..spec.tumor_count)
        .map(|i| place_tumor(spec, i, &mut rng, mid, &brain))
        .collect::<Result<Vec<_>>>()?;

    let shape = spec.shape();
    let n: usize = shape.iter().product();
    let core2 = spec.core_fraction.powi(2);
    let enh2 = spec.enhancing_fraction.powi(2);
    let mut tissue = vec![Tissue::Background; n];
    let mut p = vec![0.0; rank];
    for (flat, t) in tissue.iter_mut().enumerate() {
        let mut rem = flat;
        for a in (0..rank).rev() {
            p[a] = (rem % d) as f64;
            rem /= d;
        }
        let in_brain = p.iter().zip(&brain).map(|(x, b)| ((x - mid) / b).powi(2)).sum::<f64>() <= 1.0;
        if in_brain {
            *t = Tissue::Healthy;
        }
        for tumor in &tumors {
            let q = tumor.rho2(&p);
            let here = if q <= core2 {
                Tissue::Necrosis
            } else if q <= enh2 {
                Tissue::Enhancing
            } else if q <= 1.0 {
                Tissue::Edema
            } else {
                continue;
            };
            *t = (*t).max(here);
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = vec![0.0f32; 4 * n];
    for (i, &t) in tissue.iter().enumerate() {
        if t == Tissue::Background {
            continue;
        }
        let means = spec.intensities.get(t);
        for (c, mean) in means.iter().enumerate() {
            image[c * n + i] = mean + noise.sample(&mut rng) as f32;
        }
    }
    let labels = tissue.iter().map(|t| t.label()).collect();

    let mut img_shape = vec![4];
    img_shape.extend_from_slice(&shape);
    let spacing = vec![spec.spacing; rank];
    let volume = MultiModalVolume::new(Tensor::new(img_shape, image)?, spacing.clone())?;
    let labels = LabelVolume::new(shape, labels, spacing)?;
    Ok((volume, labels))
}
