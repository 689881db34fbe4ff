//! Binary checkpoints.
//!
//! Layout, all integers little-endian and every field 4-byte aligned:
//!
//! ```text
//! "GCAPS1" 0 0
//! epoch u64 | rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! config_len u32 | config utf-8 | pad
//! count u32
//! count × { name_len u32 | name | pad | rank u32 | dims u32.. | f32 payload }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::model::Model;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 6] = b"GCAPS1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version tag {0:?}")]
    Version(String),
    #[error("parameter mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint length: {0}")]
    CorruptLength(String),
    #[error("checkpoint is not valid utf-8 in {0}")]
    Encoding(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// ChaCha8 position: seed, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Echo of the resolved training configuration.
    pub config: String,
    pub epoch: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
}

fn pad4(out: &mut Vec<u8>) {
    while out.len() % 4 != 0 {
        out.push(0);
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    pad4(out);
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, config: String, epoch: u64, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            config,
            epoch,
            rng: RngState::capture(rng),
            params: model
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Copies every tensor into `model`; names, order and shapes must match.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<(), CheckpointError> {
        if self.params.len() != model.params.len() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (src, dst) in self.params.iter().zip(&model.params) {
            if src.name != dst.name || src.value.shape() != dst.value.shape() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "`{}` {:?} vs model `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
        }
        for (src, dst) in self.params.iter().zip(model.params.iter_mut()) {
            dst.value = src.value.clone();
            dst.grad = None;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        pad4(&mut out);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        let tag = r.take(8, "header")?;
        if &tag[..6] != MAGIC || tag[6..] != [0, 0] {
            let printable: String = tag.iter().take_while(|&&b| b != 0).map(|&b| b as char).collect();
            return Err(CheckpointError::Version(printable));
        }
        let epoch = r.u64("epoch")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let config = r.string("config")?;
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(CheckpointError::CorruptLength(format!("`{name}` claims rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                CheckpointError::CorruptLength(format!("`{name}` extent overflows"))
            })?, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(&shape, data).map_err(|e| CheckpointError::CorruptLength(e.to_string()))?;
            params.push(NamedTensor { name, value });
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::CorruptLength(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::CorruptLength(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let s = std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| CheckpointError::Encoding(what))?
            .to_string();
        self.take((4 - n % 4) % 4, what)?;
        Ok(s)
    }
}
