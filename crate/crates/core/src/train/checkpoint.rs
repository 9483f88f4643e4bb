//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SLCACKPT"
//! version      u32      CHECKPOINT_VERSION
//! config_len   u32
//! config       config_len bytes of NetworkConfig JSON
//! config_hash  u64      FNV-1a of the config bytes
//! step         u64      completed training steps
//! rng_seed     u64      batch sampler seed
//! rng_position u64      samples drawn so far
//! optimizer    u8       0 sgd, 1 sgd_momentum, 2 adam, 255 none
//! opt_steps    u64
//! n_params     u32
//! shapes       per parameter: rank u32, then rank × u32 extents
//! payload      parameters as f32, then each optimizer moment buffer as f32,
//!              all in the network's parameter enumeration order
//! checksum     u64      FNV-1a of the payload
//! ```

use std::path::Path;

use thiserror::Error;

use super::optim::{Hyper, Optimizer, OptimizerKind};
use super::SamplerState;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::network::{Network, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensorcore::Parameterized;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLCACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_OPTIMIZER: u8 = 255;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint does not match the architecture: {0}")]
    ConfigMismatch(String),
}

/// FNV-1a, 64 bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_bytes(cfg: &NetworkConfig) -> Vec<u8> {
    serde_json::to_vec(cfg).expect("network config serializes")
}

/// Stable fingerprint of an architecture.
pub fn config_hash(cfg: &NetworkConfig) -> u64 {
    fnv1a(&config_bytes(cfg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub slots: Vec<Vec<Tensor<f32>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub step: u64,
    pub sampler: SamplerState,
    pub params: Vec<Tensor<f32>>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        net: &Network<T>,
        step: u64,
        sampler: SamplerState,
        optimizer: Option<&Optimizer<T>>,
    ) -> Self {
        let mut params = Vec::new();
        net.visit_params(&mut |p| params.push(p.value.cast::<f32>()));
        let optimizer = optimizer.map(|o| OptimizerSnapshot {
            kind: o.kind(),
            steps: o.steps(),
            slots: o
                .slots()
                .iter()
                .map(|slot| slot.iter().map(|t| t.cast::<f32>()).collect())
                .collect(),
        });
        Checkpoint {
            config: net.config().clone(),
            step,
            sampler,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = config_bytes(&self.config);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&fnv1a(&cfg).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.sampler.seed.to_le_bytes());
        out.extend_from_slice(&self.sampler.position.to_le_bytes());
        match &self.optimizer {
            Some(o) => {
                out.push(o.kind.code());
                out.extend_from_slice(&o.steps.to_le_bytes());
            }
            None => {
                out.push(NO_OPTIMIZER);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        let start = out.len();
        let buffers = self
            .params
            .iter()
            .chain(self.optimizer.iter().flat_map(|o| o.slots.iter().flatten()));
        for t in buffers {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out[start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg = r.take(cfg_len)?;
        let stored_hash = r.u64()?;
        if fnv1a(cfg) != stored_hash {
            return Err(CheckpointError::ConfigMismatch(
                "stored config hash does not match the embedded config".into(),
            ));
        }
        let config: NetworkConfig = serde_json::from_slice(cfg)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let step = r.u64()?;
        let sampler = SamplerState {
            seed: r.u64()?,
            position: r.u64()?,
        };
        let opt_code = r.take(1)?[0];
        let opt_steps = r.u64()?;
        let kind = match opt_code {
            NO_OPTIMIZER => None,
            c => Some(
                OptimizerKind::from_code(c)
                    .ok_or_else(|| CheckpointError::Corrupt(format!("unknown optimizer code {c}")))?,
            ),
        };
        let n = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("parameter rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            shapes.push(shape);
        }
        let start = r.pos;
        let read_set = |r: &mut Reader| -> Result<Vec<Tensor<f32>>, CheckpointError> {
            shapes
                .iter()
                .map(|s| {
                    let len = s.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let len = len.ok_or_else(|| CheckpointError::Corrupt("parameter size overflows".into()))?;
                    let raw = r.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("size".into()))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::new(s.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
                })
                .collect()
        };
        let params = read_set(&mut r)?;
        let optimizer = match kind {
            None => None,
            Some(kind) => {
                let slots = (0..kind.slots()).map(|_| read_set(&mut r)).collect::<Result<_, _>>()?;
                Some(OptimizerSnapshot {
                    kind,
                    steps: opt_steps,
                    slots,
                })
            }
        };
        let payload_sum = fnv1a(&bytes[start..r.pos]);
        if r.u64()? != payload_sum {
            return Err(CheckpointError::Corrupt("payload checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            sampler,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Builds the stored architecture and fills in the stored parameters.
    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::build(&self.config)?;
        self.write_params(&mut net)?;
        Ok(net)
    }

    /// Copies the stored parameters into `net`, which must have been built
    /// from the same configuration.
    pub fn restore_into<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let (want, have) = (config_hash(&self.config), config_hash(net.config()));
        if want != have {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint config hash {want:016x}, network config hash {have:016x}"
            ))
            .into());
        }
        self.write_params(net)
    }

    fn write_params<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let mut shapes = Vec::new();
        net.visit_params(&mut |p| shapes.push(p.value.shape().to_vec()));
        let stored: Vec<&[usize]> = self.params.iter().map(|p| p.shape()).collect();
        if shapes.len() != stored.len() || shapes.iter().zip(&stored).any(|(a, b)| a.as_slice() != *b) {
            return Err(CheckpointError::ConfigMismatch(
                "parameter shapes differ from the architecture".into(),
            )
            .into());
        }
        let mut i = 0;
        net.visit_params_mut(&mut |p| {
            p.value = self.params[i].cast();
            i += 1;
        });
        Ok(())
    }

    /// Optimizer restored from the snapshot, or a fresh one when the
    /// checkpoint carries none.
    pub fn optimizer<T: Scalar>(&self, kind: OptimizerKind, hyper: Hyper) -> Result<Optimizer<T>> {
        let mut opt = Optimizer::new(kind, hyper);
        if let Some(snap) = &self.optimizer {
            if snap.kind != kind {
                return Err(Error::Config(format!(
                    "checkpoint holds {:?} optimizer state but {:?} was requested",
                    snap.kind, kind
                )));
            }
            let slots = snap
                .slots
                .iter()
                .map(|slot| slot.iter().map(|t| t.cast()).collect())
                .collect();
            opt.restore(snap.steps, slots)?;
        }
        Ok(opt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes the network's parameters without optimizer or sampler state.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    Checkpoint::capture(net, 0, SamplerState::default(), None).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    Checkpoint::load(path)?.network()
}
