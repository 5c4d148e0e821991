//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "ABSQCKPT"
//! version  u32 LE   currently 1
//! sections repeated until end of file:
//!   tag     4 bytes ASCII
//!   length  u64 LE  payload bytes
//!   payload
//! ```
//!
//! Sections:
//! * `CONF`: model configuration as UTF-8 JSON;
//! * `VOCB`: vocabulary as UTF-8 JSON (word, char and POS item lists);
//! * `PARM`: `u32` parameter count, then per parameter a `u32` name length,
//!   the UTF-8 name, a `u32` rank, one `u64` per dimension and the values as
//!   little-endian 32-bit floats in row-major order.
//!
//! Unknown sections are skipped on load; all three known ones are required.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"ABSQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParameterSet<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(corrupt(format!("{} section is truncated", self.section)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Attaches a [`Model`] to the stored parameters, checking that they
    /// match the stored configuration and vocabulary.
    pub fn model(&self) -> Result<Model> {
        Model::bind(self.config.clone(), &self.vocab, &self.params)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let conf = serde_json::to_vec(&self.config).expect("config serializes");
        let vocab = serde_json::to_vec(&self.vocab).expect("vocabulary serializes");
        let mut parm = Vec::new();
        parm.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            parm.extend_from_slice(&(name.len() as u32).to_le_bytes());
            parm.extend_from_slice(name.as_bytes());
            parm.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                parm.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                parm.extend_from_slice(&x.to_le_bytes());
            }
        }
        for (tag, payload) in [(b"CONF", conf), (b"VOCB", vocab), (b"PARM", parm)] {
            w.write_all(tag)?;
            w.write_all(&(payload.len() as u64).to_le_bytes())?;
            w.write_all(&payload)?;
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| corrupt(format!("cannot read checkpoint: {e}")))?;
        let mut c = Cursor {
            bytes: &bytes,
            section: "header",
        };
        if c.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let (mut config, mut vocab, mut params) = (None, None, None);
        while !c.bytes.is_empty() {
            c.section = "header";
            let tag: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
            let len = usize::try_from(c.u64()?).map_err(|_| corrupt("section too large"))?;
            let payload = c.take(len)?;
            match &tag {
                b"CONF" => {
                    config = Some(
                        serde_json::from_slice::<ModelConfig>(payload)
                            .map_err(|e| corrupt(format!("CONF section: {e}")))?,
                    )
                }
                b"VOCB" => {
                    vocab = Some(
                        serde_json::from_slice::<Vocabulary>(payload)
                            .map_err(|e| corrupt(format!("VOCB section: {e}")))?,
                    )
                }
                b"PARM" => params = Some(read_params(payload)?),
                _ => {}
            }
        }
        Ok(Checkpoint {
            config: config.ok_or_else(|| corrupt("missing CONF section"))?,
            vocab: vocab.ok_or_else(|| corrupt("missing VOCB section"))?,
            params: params.ok_or_else(|| corrupt("missing PARM section"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(io(path))?;
        self.write(BufWriter::new(file)).map_err(io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io(path))?;
        Checkpoint::read(BufReader::new(file))
    }
}

fn read_params(payload: &[u8]) -> Result<ParameterSet<f32>> {
    let mut c = Cursor {
        bytes: payload,
        section: "PARM",
    };
    let count = c.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| corrupt("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("parameter {name} is too large")))?;
        let raw = c.take(len.checked_mul(4).ok_or_else(|| corrupt("parameter too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    if !c.bytes.is_empty() {
        return Err(corrupt("trailing bytes in PARM section"));
    }
    Ok(params)
}
