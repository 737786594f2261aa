//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DHCK" | version u32 | meta length u32 | meta JSON
//! | param count u64 | params f32 * n | beta f32 * 10 | lighting f32 * 10
//! | 3 x (adam step u64 | m f32 * len | v f32 * len)   field, shape, lighting
//! | step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::AdamMoments;
use super::TrainState;
use crate::body::{Shape, SkeletonConfig, SHAPE_DIM};
use crate::field::{FieldArch, FieldParams};
use crate::render::{ShLighting, SH_COEFFS};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {got} (expected {expected})")]
    Version { expected: u32, got: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture block stored ahead of the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: FieldArch,
    /// Skeleton the field was trained against, as TOML.
    pub skeleton: String,
    #[serde(default)]
    pub prompt: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, skeleton: &SkeletonConfig, prompt: Option<String>) -> Self {
        Self {
            meta: CheckpointMeta {
                arch: state.params.arch().clone(),
                skeleton: skeleton.to_toml_string(),
                prompt,
            },
            state,
        }
    }

    pub fn skeleton(&self) -> Result<SkeletonConfig, CheckpointError> {
        SkeletonConfig::from_toml_str(&self.meta.skeleton).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::with_capacity(64 + meta.len() + 12 * s.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(s.params.len() as u64).to_le_bytes());
        put_f32s(&mut out, &s.params.values);
        put_f32s(&mut out, &s.shape.beta);
        put_f32s(&mut out, &s.lighting.coeffs);
        for m in [&s.field_moments, &s.shape_moments, &s.lighting_moments] {
            out.extend_from_slice(&m.t.to_le_bytes());
            put_f32s(&mut out, &m.m);
            put_f32s(&mut out, &m.v);
        }
        out.extend_from_slice(&s.step.to_le_bytes());
        out.extend_from_slice(&s.rng.get_seed());
        out.extend_from_slice(&s.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                expected: CHECKPOINT_VERSION,
                got: version,
            });
        }
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Corrupt(format!("meta block: {e}")))?;
        let n = u64::from_le_bytes(r.array()?) as usize;
        let expected = meta.arch.validate().map(|_| meta.arch.param_count()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if n != expected {
            return Err(CheckpointError::Corrupt(format!("{n} parameters but the architecture has {expected}")));
        }
        let values = r.f32s(n)?;
        let params = FieldParams::from_values(&meta.arch, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut beta = [0f32; SHAPE_DIM];
        beta.copy_from_slice(&r.f32s(SHAPE_DIM)?);
        let mut coeffs = [0f32; SH_COEFFS];
        coeffs.copy_from_slice(&r.f32s(SH_COEFFS)?);
        let mut moments = Vec::with_capacity(3);
        for len in [n, SHAPE_DIM, SH_COEFFS] {
            let t = u64::from_le_bytes(r.array()?);
            let m = r.f32s(len)?;
            let v = r.f32s(len)?;
            moments.push(AdamMoments { t, m, v });
        }
        let step = u64::from_le_bytes(r.array()?);
        let seed: [u8; 32] = r.array()?;
        let stream = u64::from_le_bytes(r.array()?);
        let word_pos = u128::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let lighting_moments = moments.pop().expect("three groups");
        let shape_moments = moments.pop().expect("three groups");
        let field_moments = moments.pop().expect("three groups");
        let state = TrainState {
            params,
            shape: Shape { beta },
            lighting: ShLighting { coeffs },
            field_moments,
            shape_moments,
            lighting_moments,
            step,
            rng,
        };
        if !state.is_finite() {
            return Err(CheckpointError::Corrupt("non-finite values".into()));
        }
        Ok(Self { meta, state })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let len = n.checked_mul(4).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
