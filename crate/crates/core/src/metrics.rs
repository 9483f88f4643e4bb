//! Segmentation metrics over the nested tumor regions.
//!
//! Conventions: Dice is 1 when both masks are empty; sensitivity and
//! specificity are 1 when their denominator is zero (and flagged); HD95 is
//! `None` ("undefined") when either surface is empty.

use std::fmt::Write as _;

use crate::data::{check_label_range, LabelVolume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    /// Whole tumor: labels 1, 2, 3.
    WT,
    /// Tumor core: labels 1, 3.
    TC,
    /// Enhancing tumor: label 3.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::WT => &[1, 2, 3],
            Region::TC => &[1, 3],
            Region::ET => &[3],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.labels().contains(&label)
    }
}

/// Binary masks of the three regions, flattened like the label volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &[bool] {
        match region {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

pub fn region_masks(labels: &[u8]) -> Result<RegionMasks> {
    check_label_range(labels)?;
    let mask = |r: Region| labels.iter().map(|&l| r.contains(l)).collect();
    Ok(RegionMasks {
        wt: mask(Region::WT),
        tc: mask(Region::TC),
        et: mask(Region::ET),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fn_)
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tn, c.tn + c.fp)
}

/// Physical coordinates of a voxel; 2-D grids use a zero third axis.
pub type Point = [f64; 3];

/// Foreground voxels with at least one face neighbor that is background or
/// outside the grid, scaled by `spacing`.
pub fn surface_extract(mask: &[bool], shape: &[usize], spacing: &[f64]) -> Result<Vec<Point>> {
    if !(1..=3).contains(&shape.len()) || shape.iter().product::<usize>() != mask.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("mask holds {} voxels", mask.len()),
        });
    }
    if spacing.len() != shape.len() {
        return Err(Error::InvalidArgument(format!(
            "spacing has {} entries for rank {}",
            spacing.len(),
            shape.len()
        )));
    }
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let mut out = Vec::new();
    let mut coord = vec![0usize; rank];
    for (i, &m) in mask.iter().enumerate() {
        let mut rem = i;
        for a in 0..rank {
            coord[a] = rem / strides[a];
            rem %= strides[a];
        }
        if !m {
            continue;
        }
        let boundary = (0..rank).any(|a| {
            coord[a] == 0 || coord[a] + 1 == shape[a] || !mask[i - strides[a]] || !mask[i + strides[a]]
        });
        if boundary {
            let mut p = [0.0; 3];
            for a in 0..rank {
                p[a] = coord[a] as f64 * spacing[a];
            }
            out.push(p);
        }
    }
    Ok(out)
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// For every point of `from`, the distance to its nearest point in `to`.
///
/// `to` is sorted along the first coordinate and scanned outward from each
/// query until the coordinate gap alone exceeds the best distance so far.
pub fn directed_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let mut sorted = to.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    from.iter()
        .map(|a| {
            let start = sorted.partition_point(|b| b[0] < a[0]);
            let mut best = f64::INFINITY;
            for b in &sorted[start..] {
                if (b[0] - a[0]).powi(2) > best {
                    break;
                }
                best = best.min(dist2(a, b));
            }
            for b in sorted[..start].iter().rev() {
                if (a[0] - b[0]).powi(2) > best {
                    break;
                }
                best = best.min(dist2(a, b));
            }
            best.sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Symmetric percentile Hausdorff distance: the larger of the two directed
/// `q`-th percentiles of nearest-point distances. `q = 100` is the classical
/// Hausdorff distance. `None` when either set is empty.
pub fn hausdorff_percentile(t: &[Point], p: &[Point], q: f64) -> Option<f64> {
    if t.is_empty() || p.is_empty() {
        return None;
    }
    let a = percentile(&directed_distances(t, p), q)?;
    let b = percentile(&directed_distances(p, t), q)?;
    Some(a.max(b))
}

pub fn hausdorff95(t: &[Point], p: &[Point]) -> Option<f64> {
    hausdorff_percentile(t, p, 95.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMetrics {
    pub region: Region,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when either surface is empty.
    pub hd95: Option<f64>,
    /// False when `TP + FN = 0` and the reported 1.0 is a convention.
    pub sensitivity_defined: bool,
    /// False when `TN + FP = 0` and the reported 1.0 is a convention.
    pub specificity_defined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub spacing: Vec<f64>,
    pub regions: Vec<RegionMetrics>,
}

impl MetricsReport {
    pub fn region(&self, region: Region) -> &RegionMetrics {
        self.regions
            .iter()
            .find(|m| m.region == region)
            .expect("report covers every region")
    }
}

/// Region metrics of `pred` against `gt`, distances in `spacing` units.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, spacing: &[f64]) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("evaluate", pred.shape(), gt.shape()));
    }
    let pm = region_masks(pred.labels())?;
    let gm = region_masks(gt.labels())?;
    let mut regions = Vec::with_capacity(3);
    for region in Region::ALL {
        let (p, g) = (pm.get(region), gm.get(region));
        let counts = confusion(p, g)?;
        let sp = surface_extract(p, pred.shape(), spacing)?;
        let sg = surface_extract(g, gt.shape(), spacing)?;
        regions.push(RegionMetrics {
            region,
            counts,
            dice: dice(&counts),
            sensitivity: sensitivity(&counts),
            specificity: specificity(&counts),
            hd95: hausdorff95(&sg, &sp),
            sensitivity_defined: counts.tp + counts.fn_ > 0,
            specificity_defined: counts.tn + counts.fp > 0,
        });
    }
    Ok(MetricsReport {
        spacing: spacing.to_vec(),
        regions,
    })
}

pub const CSV_HEADER: &str = "case_id,region,dice,sensitivity,specificity,hd95,hd95_defined";

/// Per-region means over several cases. HD95 averages the defined values
/// only and is undefined when no case defines it.
pub fn mean_metrics(reports: &[&MetricsReport]) -> Vec<(Region, f64, f64, f64, Option<f64>)> {
    Region::ALL
        .iter()
        .map(|&region| {
            let rows: Vec<&RegionMetrics> = reports.iter().map(|r| r.region(region)).collect();
            let n = rows.len().max(1) as f64;
            let mean = |f: fn(&RegionMetrics) -> f64| rows.iter().map(|m| f(m)).sum::<f64>() / n;
            let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd95).collect();
            let hd = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
            (region, mean(|m| m.dice), mean(|m| m.sensitivity), mean(|m| m.specificity), hd)
        })
        .collect()
}

fn csv_row(out: &mut String, case: &str, region: Region, d: f64, se: f64, sp: f64, hd: Option<f64>) {
    let hd_text = hd.map(|h| h.to_string()).unwrap_or_default();
    let _ = writeln!(
        out,
        "{case},{},{d},{se},{sp},{hd_text},{}",
        region.name(),
        hd.is_some()
    );
}

/// CSV with one row per (case, region) followed by a `mean` row per region.
/// Undefined HD95 values are left empty.
pub fn metrics_csv(cases: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (case, report) in cases {
        for m in &report.regions {
            csv_row(&mut out, case, m.region, m.dice, m.sensitivity, m.specificity, m.hd95);
        }
    }
    if !cases.is_empty() {
        let refs: Vec<&MetricsReport> = cases.iter().map(|(_, r)| r).collect();
        for (region, d, se, sp, hd) in mean_metrics(&refs) {
            csv_row(&mut out, "mean", region, d, se, sp, hd);
        }
    }
    out
}
