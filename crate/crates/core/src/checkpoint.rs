//! Binary checkpoint: header JSON, vocabulary text and raw parameters.
//!
//! Layout (little endian): magic `CACHELM\0`, `u32` version, then three
//! length-prefixed sections (header JSON, vocabulary text, parameter table).
//! Each parameter is `u32` name length, name, `u32` rank, `u64` dims, `f64`
//! values. Saving the same state twice gives byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{resolve_exclude, LanguageModel};
use crate::numcore::{ParamStore, RngState, Tensor};

const MAGIC: &[u8; 8] = b"CACHELM\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    /// `None` until a dev evaluation has happened.
    pub dev_ppl: Option<f64>,
    pub rng: RngState,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    dev_ppl: Option<f64>,
    rng: RngState,
    vocab_hash: String,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| Error::Format("section too large".into()))?)
    }
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            dev_ppl: self.dev_ppl,
            rng: self.rng.clone(),
            vocab_hash: self.vocab_hash(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_section(&mut out, &serde_json::to_vec(&header)?);
        put_section(&mut out, self.vocab.to_text().as_bytes());

        let mut table = Vec::new();
        table.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            table.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            table.extend_from_slice(p.name.as_bytes());
            table.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                table.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                table.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_section(&mut out, &table);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header: Header = serde_json::from_slice(r.section()?)?;
        let vocab_text = std::str::from_utf8(r.section()?)
            .map_err(|_| Error::Format("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(vocab_text)?;
        if vocab.hash() != header.vocab_hash {
            return Err(Error::Compatibility {
                expected: header.vocab_hash,
                found: vocab.hash(),
            });
        }
        let mut t = Reader { buf: r.section()? };
        let mut params = ParamStore::new();
        for _ in 0..t.u32()? {
            let n = t.u32()? as usize;
            let name = std::str::from_utf8(t.take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = t.u32()? as usize;
            let shape = (0..rank).map(|_| t.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = t.take(len.checked_mul(8).ok_or_else(|| Error::Format("parameter too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.add(name, Tensor::new(shape, data)?);
        }
        if !r.buf.is_empty() || !t.buf.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            dev_ppl: header.dev_ppl,
            rng: header.rng,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<LanguageModel> {
        let cfg = self.config.model_config()?;
        let exclude = resolve_exclude(&cfg.pointer.exclude, &self.vocab)?;
        LanguageModel::bind(cfg, self.params.clone(), exclude)
    }
}
