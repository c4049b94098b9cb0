//! Checkpoint container.
//!
//! Layout: `"TLCK"`, version `u16`, 32-byte config digest, step `u64`, then
//! entries of (`u32` name length, name bytes, embedded tensor file) and a
//! trailing SHA-256 over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};
use tulabm_core::denoiser::{self, DenoiserConfig};
use tulabm_core::{AdamW, Codec, CodecConfig, ParamTable, Tensor, TrainState};

use crate::error::{CliError, Result};
use crate::io;
use crate::tensorfile::{Cursor, TensorFile};

pub const MAGIC: &[u8; 4] = b"TLCK";
pub const VERSION: u16 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const INIT_SEED: &str = "meta.init_seed";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: ParamTable,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            TensorFile::from_tensor(t).encode_into(&mut out);
        }
        let hash: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&hash);
        out
    }

    /// Parses and verifies the content hash. When `expected` is given, a digest
    /// mismatch is reported before the parameter table is decoded.
    pub fn from_bytes(bytes: &[u8], expected: Option<&[u8; 32]>) -> std::result::Result<Self, CliError> {
        let bad = |d: String| CliError::format("<checkpoint>", d);
        if bytes.len() < 4 + 2 + 32 + 8 + 32 {
            return Err(bad("truncated checkpoint".into()));
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        let mut cur = Cursor { bytes: body, pos: 0 };
        if cur.take(4).map_err(bad)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.array().map_err(bad)?);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", version)));
        }
        let digest: [u8; 32] = cur.array().map_err(bad)?;
        if let Some(exp) = expected {
            if exp != &digest {
                return Err(CliError::DigestMismatch {
                    expected: hex(exp),
                    found: hex(&digest),
                });
            }
        }
        let computed: [u8; 32] = Sha256::digest(body).into();
        if computed.as_slice() != hash {
            return Err(bad("content hash mismatch".into()));
        }
        let step = u64::from_le_bytes(cur.array().map_err(bad)?);
        let mut tensors = ParamTable::new();
        while cur.remaining() > 0 {
            let len = u32::from_le_bytes(cur.array().map_err(bad)?) as usize;
            let name = std::str::from_utf8(cur.take(len).map_err(bad)?)
                .map_err(|_| bad("entry name is not UTF-8".into()))?
                .to_string();
            let (tf, used) = TensorFile::decode(&body[cur.pos..]).map_err(bad)?;
            cur.pos += used;
            tensors.insert(name, tf.to_tensor().map_err(bad)?)?;
        }
        Ok(Self { digest, step, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path, expected: Option<&[u8; 32]>) -> Result<Self> {
        let bytes = io::read_file(path)?;
        Self::from_bytes(&bytes, expected).map_err(|e| match e {
            CliError::Format { detail, .. } => CliError::format(path, detail),
            other => other,
        })
    }

    /// Packs denoiser parameters, optimizer moments and codec parameters.
    pub fn from_state(digest: [u8; 32], state: &TrainState, codec: &Codec) -> Self {
        let mut tensors = denoiser::export_table(&state.params);
        let mut put = |name: String, t: &Tensor| tensors.insert(name, t.clone()).expect("prefixes are disjoint");
        for (k, t) in &state.optimizer.m {
            put(format!("{}{}", ADAM_M, k), t);
        }
        for (k, t) in &state.optimizer.v {
            put(format!("{}{}", ADAM_V, k), t);
        }
        for (k, t) in codec.params().iter() {
            put(k.clone(), t);
        }
        let seed = state.params.seed;
        put(
            INIT_SEED.into(),
            &Tensor::from_vec(&[2], vec![(seed >> 32) as f64, (seed & 0xffff_ffff) as f64]).expect("two values"),
        );
        Self {
            digest,
            step: state.step,
            tensors,
        }
    }

    pub fn codec(&self, cfg: CodecConfig) -> Result<Codec> {
        Ok(Codec::from_params(cfg, &self.tensors.with_prefix("codec."))?)
    }

    pub fn train_state(&self, cfg: &DenoiserConfig) -> Result<TrainState> {
        let seed = match self.tensors.get(INIT_SEED).map(|t| t.data()) {
            Some([hi, lo]) => ((*hi as u64) << 32) | *lo as u64,
            _ => 0,
        };
        let params = denoiser::import_table(cfg, &self.tensors, seed)?;
        let strip = |prefix: &str| {
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        Ok(TrainState {
            step: self.step,
            params,
            optimizer: AdamW {
                step: self.step,
                m: strip(ADAM_M),
                v: strip(ADAM_V),
            },
        })
    }
}
