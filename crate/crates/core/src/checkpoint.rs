//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RCN1"
//! u32                      tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32), u8 rank, u32 dims[rank]
//!   f32 values[prod(dims)]
//! u32 metadata length, UTF-8 JSON metadata
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, Normalizer};
use crate::error::{Error, Result};
use crate::model::RecNetConfig;
use crate::state::{Module, Visitor};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"RCN1";
pub const DTYPE_F32: u8 = 0;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Where the training data came from, so evaluation can rebuild the same split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub dataset: DatasetKind,
    /// `Some((train, test, classes))` for generated data.
    #[serde(default)]
    pub synthetic: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// `(e, S1, S2, S3, d1, d2, d3)`.
    pub tuple: [usize; 7],
    pub config: RecNetConfig,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
    #[serde(default)]
    pub source: Option<DataSource>,
    #[serde(default)]
    pub test_acc: Option<f64>,
}

impl Metadata {
    pub fn new(config: RecNetConfig, epoch: usize, seed: u64) -> Self {
        Metadata {
            tuple: config.tuple(),
            config,
            epoch,
            seed,
            normalizer: None,
            source: None,
            test_acc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: Metadata,
}

struct Collect(Vec<NamedTensor>);

impl<T: Real> Visitor<T> for Collect {
    fn param(&mut self, name: &str, shape: &[usize], value: &mut [T], _: &mut [T], _: bool) {
        self.buffer(name, shape, value);
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: &mut [T]) {
        self.0.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: value.iter().map(|v| v.f64() as f32).collect(),
        });
    }
}

struct Restore<'a> {
    by_name: HashMap<&'a str, &'a NamedTensor>,
    used: usize,
    err: Option<Error>,
}

impl<T: Real> Visitor<T> for Restore<'_> {
    fn param(&mut self, name: &str, shape: &[usize], value: &mut [T], _: &mut [T], _: bool) {
        self.buffer(name, shape, value);
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: &mut [T]) {
        if self.err.is_some() {
            return;
        }
        match self.by_name.get(name) {
            Some(t) if t.shape == shape && t.data.len() == value.len() => {
                for (v, &s) in value.iter_mut().zip(&t.data) {
                    *v = T::of(s as f64);
                }
                self.used += 1;
            }
            Some(t) => {
                self.err = Some(Error::config(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape
                )))
            }
            None => self.err = Some(Error::config(format!("checkpoint lacks tensor {name}"))),
        }
    }
}

impl Checkpoint {
    pub fn from_model<T: Real, M: Module<T> + ?Sized>(model: &mut M, meta: Metadata) -> Self {
        let mut c = Collect(Vec::new());
        model.visit("", &mut c);
        Checkpoint { tensors: c.0, meta }
    }

    /// Copies every tensor into the matching model slot. Names and shapes must
    /// match one to one.
    pub fn restore<T: Real, M: Module<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut r = Restore {
            by_name: self.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
            used: 0,
            err: None,
        };
        model.visit("", &mut r);
        if let Some(e) = r.err {
            return Err(e);
        }
        if r.used != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} tensors, model uses {}",
                self.tensors.len(),
                r.used
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::format("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::format(format!("tensor name of {} bytes is too long", t.name.len())))?;
            if t.shape.len() > MAX_RANK || t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::format(format!(
                    "tensor {} has inconsistent shape {:?}",
                    t.name, t.shape
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::format(format!("metadata: {e}")))?;
        let len = u32::try_from(meta.len()).map_err(|_| Error::format("metadata too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    /// Validates every length against the remaining input before allocating.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("not a RecNet checkpoint (bad magic)"));
        }
        let count = r.u32("tensor count")? as usize;
        // every tensor needs at least 4 bytes of header
        if count > r.remaining() / 4 {
            return Err(Error::format(format!("tensor count {count} exceeds file size")));
        }
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(format!("tensor {name}: unsupported dtype code {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(format!("tensor {name}: rank {rank} above {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = r.u32("dimension")? as usize;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(format!("tensor {name}: element count overflows")))?;
                shape.push(d);
            }
            let bytes_needed = n
                .checked_mul(4)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| Error::format(format!("tensor {name}: {n} values run past end of file")))?;
            let raw = r.take(bytes_needed, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        if r.remaining() != 0 {
            return Err(Error::format(format!(
                "{} trailing bytes after metadata",
                r.remaining()
            )));
        }
        let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| Error::format(format!("metadata: {e}")))?;
        meta.config
            .validate()
            .map_err(|e| Error::format(format!("metadata: {e}")))?;
        if meta.tuple != meta.config.tuple() {
            return Err(Error::format("metadata tuple disagrees with config"));
        }
        Ok(Checkpoint { tensors, meta })
    }

    /// Writes to a sibling temporary file, then renames over `path`, so a
    /// reader never sees a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "truncated {what} at byte {}: need {n}, have {}",
                self.pos,
                self.remaining()
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
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
