//! Binary checkpoint container.
//!
//! Layout (little endian): 8 magic bytes, `u32` format version, then four
//! sections in fixed order, each a 4-byte tag, a `u64` payload length and
//! the payload:
//!
//! - `CONF` JSON document `{"model": .., "train": ..}`
//! - `PARM` parameter table: count, then per entry name, trainable flag,
//!   shape and `f64` values
//! - `OPTM` optimizer step and per-entry moments
//! - `STAT` completed epochs and the shuffle RNG state

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::arch::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VM3DCKPT";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 4] = [b"CONF", b"PARM", b"OPTM", b"STAT"];

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<ParamRecord>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    model: ModelConfig,
    train: TrainConfig,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt length: {}", msg.into()))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.write_f64::<LE>(v).unwrap();
    }
}

/// Reader over one section payload; every short read is a length error.
struct Section<'a> {
    tag: &'static str,
    cur: Cursor<&'a [u8]>,
}

impl<'a> Section<'a> {
    fn err(&self) -> Error {
        corrupt(format!("section {} ends early", self.tag))
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.err())
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.err())
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.err())
    }

    fn u128(&mut self) -> Result<u128> {
        self.cur.read_u128::<LE>().map_err(|_| self.err())
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n > left {
            return Err(self.err());
        }
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.err())?;
        Ok(buf)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::Checkpoint(format!("section {}: name is not UTF-8", self.tag)))
    }

    fn values(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| self.err())?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn finish(self) -> Result<()> {
        if (self.cur.position() as usize) != self.cur.get_ref().len() {
            return Err(corrupt(format!("trailing bytes in section {}", self.tag)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let conf = serde_json::to_vec(&ConfigDoc {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        })?;

        let mut parm = Vec::new();
        parm.write_u32::<LE>(self.params.len() as u32)?;
        for p in &self.params {
            put_str(&mut parm, &p.name);
            parm.write_u8(p.trainable as u8)?;
            parm.write_u32::<LE>(p.value.rank() as u32)?;
            for &d in p.value.shape() {
                parm.write_u64::<LE>(d as u64)?;
            }
            put_values(&mut parm, &p.value);
        }

        if self.optimizer.m.len() != self.params.len()
            || self.optimizer.v.len() != self.params.len()
        {
            return Err(Error::Checkpoint(
                "optimizer state does not cover the parameter table".into(),
            ));
        }
        let mut optm = Vec::new();
        optm.write_u64::<LE>(self.optimizer.step)?;
        for ((p, m), v) in self
            .params
            .iter()
            .zip(&self.optimizer.m)
            .zip(&self.optimizer.v)
        {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint moments",
                    p.value.shape(),
                    m.shape(),
                ));
            }
            put_values(&mut optm, m);
            put_values(&mut optm, v);
        }

        let mut stat = Vec::new();
        stat.write_u64::<LE>(self.epoch)?;
        stat.extend_from_slice(&self.rng.seed);
        stat.write_u64::<LE>(self.rng.stream)?;
        stat.write_u128::<LE>(self.rng.word_pos)?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION)?;
        for (tag, body) in SECTIONS.iter().zip([conf, parm, optm, stat]) {
            out.extend_from_slice(*tag);
            out.write_u64::<LE>(body.len() as u64)?;
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(corrupt("header shorter than 12 bytes"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, supported {FORMAT_VERSION}"
            )));
        }
        let mut pos = 12;
        let mut bodies = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let name = std::str::from_utf8(tag).unwrap();
            if bytes.len() < pos + 12 {
                return Err(corrupt(format!("missing section {name}")));
            }
            if &bytes[pos..pos + 4] != tag {
                return Err(Error::Checkpoint(format!("expected section {name}")));
            }
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
            pos += 12;
            let end = usize::try_from(len)
                .ok()
                .and_then(|l| pos.checked_add(l))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    corrupt(format!(
                        "section {name} declares {len} bytes, {} remain",
                        bytes.len() - pos
                    ))
                })?;
            bodies.push(&bytes[pos..end]);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after last section"));
        }
        let section = |i: usize| Section {
            tag: ["CONF", "PARM", "OPTM", "STAT"][i],
            cur: Cursor::new(bodies[i]),
        };

        let doc: ConfigDoc = serde_json::from_slice(bodies[0])?;

        let mut s = section(1);
        let count = s.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = s.string()?;
            let trainable = s.u8()? != 0;
            let rank = s.u32()? as usize;
            let shape = (0..rank)
                .map(|_| s.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let value = s.values(&shape)?;
            params.push(ParamRecord {
                name,
                trainable,
                value,
            });
        }
        s.finish()?;

        let mut s = section(2);
        let step = s.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for p in &params {
            m.push(s.values(p.value.shape())?);
            v.push(s.values(p.value.shape())?);
        }
        s.finish()?;

        let mut s = section(3);
        let epoch = s.u64()?;
        let seed: [u8; 32] = s.bytes(32)?.try_into().unwrap();
        let stream = s.u64()?;
        let word_pos = s.u128()?;
        s.finish()?;

        Ok(Checkpoint {
            model_config: doc.model,
            train_config: doc.train,
            params,
            optimizer: OptimizerState { step, m, v },
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parameter table as a store, in record order.
    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            if p.trainable {
                store.add(p.name.clone(), p.value.clone())?;
            } else {
                store.add_buffer(p.name.clone(), p.value.clone())?;
            }
        }
        Ok(store)
    }
}

pub(crate) fn records(store: &ParamStore) -> Vec<ParamRecord> {
    store
        .iter()
        .map(|(_, p)| ParamRecord {
            name: p.name().to_string(),
            trainable: p.trainable(),
            value: p.value().clone(),
        })
        .collect()
}
