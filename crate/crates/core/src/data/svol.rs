//! SVOL: a small little-endian volume container.
//!
//! ```text
//! magic    6 bytes  "SVOL1\0"
//! dtype    u32      0 = f32 image, 1 = u8 labels
//! channels u32
//! rank     u32      spatial rank
//! extents  rank x u32
//! spacing  rank x f32
//! payload  channel-major, last axis fastest
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{LabelVolume, MultiModalVolume};
use crate::tensor::{numel, Tensor};

pub const SVOL_MAGIC: [u8; 6] = *b"SVOL1\0";

const DTYPE_F32: u32 = 0;
const DTYPE_U8: u32 = 1;

#[derive(Debug, Error)]
pub enum SvolError {
    #[error("bad magic: not an SVOL file")]
    BadMagic,
    #[error("truncated: header declares {declared} bytes, file holds {actual}")]
    Truncated { declared: usize, actual: usize },
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded contents of an SVOL file.
#[derive(Clone, Debug, PartialEq)]
pub enum SvolData {
    Image(MultiModalVolume),
    Labels(LabelVolume),
}

impl SvolData {
    fn kind(&self) -> &'static str {
        match self {
            SvolData::Image(_) => "f32 image",
            SvolData::Labels(_) => "u8 labels",
        }
    }
}

impl From<MultiModalVolume> for SvolData {
    fn from(v: MultiModalVolume) -> Self {
        SvolData::Image(v)
    }
}

impl From<LabelVolume> for SvolData {
    fn from(v: LabelVolume) -> Self {
        SvolData::Labels(v)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn header(out: &mut Vec<u8>, dtype: u32, channels: usize, extents: &[usize], spacing: &[f32]) {
    out.extend_from_slice(&SVOL_MAGIC);
    push_u32(out, dtype);
    push_u32(out, channels as u32);
    push_u32(out, extents.len() as u32);
    for &e in extents {
        push_u32(out, e as u32);
    }
    for &s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn encode_svol(data: &SvolData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        SvolData::Image(v) => {
            header(&mut out, DTYPE_F32, v.channels(), v.spatial_shape(), v.spacing());
            out.reserve(v.image().len() * 4);
            for x in v.image().data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        SvolData::Labels(l) => {
            header(&mut out, DTYPE_U8, 1, l.shape(), l.spacing());
            out.extend_from_slice(l.labels());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32, SvolError> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or(SvolError::Truncated {
            declared: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

pub fn decode_svol(bytes: &[u8]) -> Result<SvolData, SvolError> {
    if bytes.len() < SVOL_MAGIC.len() || bytes[..SVOL_MAGIC.len()] != SVOL_MAGIC {
        return Err(SvolError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: SVOL_MAGIC.len(),
    };
    let dtype = r.u32()?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(SvolError::UnknownDtype(other)),
    };
    let channels = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if !(2..=3).contains(&rank) {
        return Err(SvolError::Malformed(format!("spatial rank {rank}")));
    }
    let extents = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
    let spacing = (0..rank)
        .map(|_| r.u32().map(f32::from_bits))
        .collect::<Result<Vec<_>, _>>()?;
    if channels == 0 || extents.contains(&0) {
        return Err(SvolError::Malformed(format!(
            "{channels} channels with extents {extents:?}"
        )));
    }
    if dtype == DTYPE_U8 && channels != 1 {
        return Err(SvolError::Malformed(format!("label files hold one channel, found {channels}")));
    }
    let count = channels
        .checked_mul(numel(&extents))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| SvolError::Malformed("payload size overflows".into()))?;
    let payload = &bytes[r.pos..];
    if payload.len() != count {
        return Err(SvolError::Truncated {
            declared: r.pos + count,
            actual: bytes.len(),
        });
    }
    let malformed = |e: crate::Error| SvolError::Malformed(e.to_string());
    Ok(if dtype == DTYPE_F32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let mut shape = vec![channels];
        shape.extend_from_slice(&extents);
        let image = Tensor::new(shape, data).map_err(malformed)?;
        SvolData::Image(MultiModalVolume::new(image, spacing).map_err(malformed)?)
    } else {
        SvolData::Labels(LabelVolume::new(extents, payload.to_vec(), spacing).map_err(malformed)?)
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SvolError + '_ {
    move |source| SvolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `data` to `path` through a temporary sibling file, so a failed
/// write never leaves a partial file behind.
pub fn write_svol(path: impl AsRef<Path>, data: &SvolData) -> Result<(), SvolError> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &encode_svol(data)).map_err(io_err(path))
}

pub fn read_svol(path: impl AsRef<Path>) -> Result<SvolData, SvolError> {
    let path = path.as_ref();
    decode_svol(&fs::read(path).map_err(io_err(path))?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<MultiModalVolume, SvolError> {
    match read_svol(path)? {
        SvolData::Image(v) => Ok(v),
        other => Err(SvolError::DtypeMismatch {
            expected: "f32 image",
            found: other.kind(),
        }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, SvolError> {
    match read_svol(path)? {
        SvolData::Labels(l) => Ok(l),
        other => Err(SvolError::DtypeMismatch {
            expected: "u8 labels",
            found: other.kind(),
        }),
    }
}

