//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GMDF1"
//! u8 len, kind name
//! u64 manifest hash
//! u8 has_schedule [u32 steps, f64 beta_start, f64 beta_end]
//! u32 word count, then per word: u16 len, utf-8 bytes
//! u32 tensor count, then per tensor:
//!     u16 len, name; u8 rank; u32 dims[rank]; f64 values[numel]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffusion::{linear_schedule, NoiseSchedule};
use crate::nn::{ModelKind, ModelParams, Vocabulary};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 5] = b"GMDF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: ModelParams,
    pub schedule: Option<NoiseSchedule>,
    pub vocab: Vocabulary,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ck(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<String> {
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| ck(format!("{what} is not valid utf-8")))
    }
}

impl Checkpoint {
    pub fn new(kind: ModelKind, params: ModelParams, schedule: Option<NoiseSchedule>, vocab: Vocabulary) -> Result<Self> {
        params.validate(kind)?;
        Ok(Self {
            kind,
            params,
            schedule,
            vocab,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let name = self.kind.name().as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
        out.extend_from_slice(&self.kind.manifest().hash().to_le_bytes());
        match &self.schedule {
            Some(s) => {
                let (steps, b0, b1) = s.params();
                out.push(1);
                out.extend_from_slice(&(steps as u32).to_le_bytes());
                out.extend_from_slice(&b0.to_le_bytes());
                out.extend_from_slice(&b1.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for w in self.vocab.words() {
            out.extend_from_slice(&(w.len() as u16).to_le_bytes());
            out.extend_from_slice(w.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ck("bad magic: not a GMDF1 checkpoint"));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let len = r.u8("kind length")? as usize;
        let name = r.str(len, "kind name")?;
        let kind = ModelKind::from_name(&name).ok_or_else(|| ck(format!("unknown model kind '{name}'")))?;
        let manifest = kind.manifest();
        let hash = r.u64("manifest hash")?;
        if hash != manifest.hash() {
            return Err(ck(format!(
                "manifest hash mismatch for {name}: file {hash:016x}, build {:016x}",
                manifest.hash()
            )));
        }
        let schedule = match r.u8("schedule flag")? {
            0 => None,
            1 => {
                let steps = r.u32("schedule steps")? as usize;
                let b0 = r.f64("beta_start")?;
                let b1 = r.f64("beta_end")?;
                Some(linear_schedule(steps, b0, b1)?)
            }
            other => return Err(ck(format!("invalid schedule flag {other}"))),
        };
        let nwords = r.u32("vocabulary size")? as usize;
        let mut words = Vec::with_capacity(nwords.min(64));
        for _ in 0..nwords {
            let l = r.u16("word length")? as usize;
            words.push(r.str(l, "word")?);
        }
        let vocab = Vocabulary::from_words(words)?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let l = r.u16("tensor name length")? as usize;
            let tname = r.str(l, "tensor name")?;
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let entry = manifest
                .get(&tname)
                .ok_or_else(|| ck(format!("unexpected tensor {tname} for {name}")))?;
            if entry.shape != shape {
                return Err(ck(format!(
                    "shape mismatch for {tname}: manifest {:?}, file {shape:?}",
                    entry.shape
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, &format!("values of {tname}"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(tname.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(ck(format!("duplicate tensor {tname}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(ck(format!(
                "trailing bytes: {} unread after the tensor table",
                bytes.len() - r.pos
            )));
        }
        if let Some(missing) = manifest.entries().iter().find(|e| !tensors.contains_key(&e.name)) {
            return Err(ck(format!("missing tensor {} for {name}", missing.name)));
        }
        Ok(Self {
            kind,
            params: ModelParams::from_map(tensors),
            schedule,
            vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Self> {
        let c = Self::load(path)?;
        c.expect_kind(kind)?;
        Ok(c)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(ck(format!(
                "manifest mismatch: expected a {} checkpoint, found {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(())
    }
}
