//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, JSON metadata (length-prefixed), tensor
//! blocks (name, trainable flag, dtype, dims, little-endian payload), closing
//! magic. Tensor payloads round-trip bit-exactly.

use crate::corpus::TrainingSubset;
use crate::features::FeatureConfig;
use crate::model::params::Params;
use crate::model::{Model, ModelVariantConfig};
use crate::speaker::SpeakerSpace;
use crate::tensor::Scalar;
use crate::trainer::TrainingSchedule;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PGTT";
const END_MAGIC: &[u8; 4] = b"TTGP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint `{path}` is corrupt: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("checkpoint `{path}` has format version {found}, this build reads {expected}")]
    VersionMismatch { path: String, found: u32, expected: u32 },
    #[error("checkpoint `{path}` stores dtype tag {found}, expected {expected}")]
    DtypeMismatch { path: String, found: u8, expected: u8 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// ChaCha stream position, enough to resume the training rng exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(seed: u64, rng: &rand_chacha::ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let pos = (u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo);
        rng.set_word_pos(pos);
        rng
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelVariantConfig,
    pub step: u64,
    pub adam_t: u64,
    pub schedule: TrainingSchedule,
    pub subset: TrainingSubset,
    pub rng: RngState,
    pub vocab_symbols: Vec<String>,
    pub locales: Vec<String>,
    pub speakers: SpeakerSpace,
    pub feature_config: FeatureConfig,
}

pub struct Checkpoint<F: Scalar> {
    pub meta: CheckpointMeta,
    pub params: Params<F>,
    pub adam_m: IndexMap<String, ArrayD<F>>,
    pub adam_v: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn model(&self) -> Model<F> {
        Model {
            config: self.meta.config.clone(),
            inventory_size: self.meta.vocab_symbols.len(),
            locale_count: self.meta.locales.len(),
            params: self.params.clone(),
        }
    }

    pub fn locale_index(&self, locale: &str) -> Option<usize> {
        self.meta.locales.iter().position(|l| l == locale)
    }
}

fn write_tensor<F: Scalar>(out: &mut Vec<u8>, name: &str, trainable: bool, value: &ArrayD<F>) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(u8::from(trainable));
    out.push(F::DTYPE_TAG);
    out.push(value.ndim() as u8);
    for &d in value.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in value.iter() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.bytes.len() {
            return Err(CkptError::Corrupt {
                path: self.path.clone(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkptError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, CkptError> {
        Ok(self.take(1)?[0])
    }
}

fn read_tensor<F: Scalar>(
    cur: &mut Cursor<'_>,
) -> Result<(String, bool, ArrayD<F>), CkptError> {
    let name_len = cur.u16()? as usize;
    let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
        CkptError::Corrupt { path: cur.path.clone(), msg: "bad tensor name".into() }
    })?;
    let trainable = cur.u8()? != 0;
    let dtype = cur.u8()?;
    if dtype != F::DTYPE_TAG {
        return Err(CkptError::DtypeMismatch {
            path: cur.path.clone(),
            found: dtype,
            expected: F::DTYPE_TAG,
        });
    }
    let ndim = cur.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.u64()? as usize);
    }
    let count: usize = dims.iter().product();
    let payload = cur.take(count * F::WIDTH)?;
    let data: Vec<F> = payload.chunks_exact(F::WIDTH).map(F::read_le).collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| CkptError::Corrupt {
        path: cur.path.clone(),
        msg: format!("bad tensor shape for `{name}`"),
    })?;
    Ok((name, trainable, arr))
}

/// Serialize to bytes (exposed for the round-trip tests).
pub fn encode_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let meta = serde_json::to_vec(&ckpt.meta).expect("checkpoint meta serializes");
    let n_tensors = ckpt.params.len() + ckpt.adam_m.len() + ckpt.adam_v.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut out, name, t.trainable, &t.value);
    }
    for (name, m) in &ckpt.adam_m {
        write_tensor(&mut out, &format!("adam.m.{name}"), false, m);
    }
    for (name, v) in &ckpt.adam_v {
        write_tensor(&mut out, &format!("adam.v.{name}"), false, v);
    }
    out.extend_from_slice(END_MAGIC);
    out
}

pub fn decode_checkpoint<F: Scalar>(
    bytes: &[u8],
    path: &str,
) -> Result<Checkpoint<F>, CkptError> {
    let mut cur = Cursor { bytes, pos: 0, path: path.to_string() };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(CkptError::Corrupt { path: path.into(), msg: "bad magic".into() });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CkptError::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| CkptError::Corrupt { path: path.into(), msg: format!("meta: {e}") })?;
    let n_tensors = cur.u32()? as usize;
    let mut params = Params::new();
    let mut adam_m = IndexMap::new();
    let mut adam_v = IndexMap::new();
    for _ in 0..n_tensors {
        let (name, trainable, value) = read_tensor::<F>(&mut cur)?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), value);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), value);
        } else {
            params.insert(&name, value, trainable);
        }
    }
    let end = cur.take(4)?;
    if end != END_MAGIC {
        return Err(CkptError::Corrupt { path: path.into(), msg: "bad end marker".into() });
    }
    Ok(Checkpoint { meta, params, adam_m, adam_v })
}

/// Atomic save: write a temp file, then rename into place.
pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> Result<(), CkptError> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CkptError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
