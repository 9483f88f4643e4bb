//! Axial-slice overlays as binary portable pixmaps (P6).
//!
//! The grayscale background is the FLAIR channel rescaled to its volume-wide
//! range. Labels are blended at 50 % opacity:
//!
//! | label | tissue                         | color  |
//! |-------|--------------------------------|--------|
//! | 1     | necrosis / non-enhancing core  | red    |
//! | 2     | edema                          | green  |
//! | 3     | enhancing tumor                | yellow |

use std::path::{Path, PathBuf};

use slca_core::io::write_atomic;
use slca_core::{LabelVolume, MultiModalVolume};

use crate::cases::Cleanup;
use crate::failure::{io_failure, CmdResult, Failure};

pub const LABEL_COLORS: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [255, 255, 0]];

pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// One RGB image per slice along the first spatial axis; a 2-D volume
/// yields a single image.
pub fn render(image: &MultiModalVolume, labels: &LabelVolume) -> CmdResult<Vec<(usize, usize, Vec<u8>)>> {
    let shape = labels.shape();
    if image.spatial_shape() != shape {
        return Err(Failure::Config(format!(
            "overlay: image grid {:?} differs from label grid {shape:?}",
            image.spatial_shape()
        )));
    }
    let (slices, h, w) = match *shape {
        [h, w] => (1, h, w),
        [d, h, w] => (d, h, w),
        _ => return Err(Failure::Config(format!("overlay: unsupported grid {shape:?}"))),
    };
    let flair = image.image().channel(0);
    let (lo, hi) = flair
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(slices);
    for z in 0..slices {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for i in z * h * w..(z + 1) * h * w {
            let g = ((flair[i] - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8;
            let px = match labels.labels()[i] {
                0 => [g; 3],
                l => LABEL_COLORS[l as usize - 1].map(|c| ((g as u16 + c as u16) / 2) as u8),
            };
            rgb.extend_from_slice(&px);
        }
        out.push((w, h, rgb));
    }
    Ok(out)
}

pub fn slice_name(z: usize) -> String {
    format!("slice_{z:04}.ppm")
}

/// Writes every overlay into `dir`, registering each file with `cleanup`.
pub fn write_all(dir: &Path, images: &[(usize, usize, Vec<u8>)], cleanup: &mut Cleanup) -> CmdResult<Vec<PathBuf>> {
    cleanup.create_dir(dir)?;
    let mut written = Vec::with_capacity(images.len());
    for (z, (w, h, rgb)) in images.iter().enumerate() {
        let path = dir.join(slice_name(z));
        write_atomic(&path, &ppm(*w, *h, rgb)).map_err(|e| io_failure(&path, e))?;
        cleanup.file(path.clone());
        written.push(path);
    }
    Ok(written)
}
