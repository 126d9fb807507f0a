//! Versioned binary container for training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "AGOPTCK\0"
//! version   u32      currently 1
//! count     u32      number of entries
//! entry*    name_len u32, name (UTF-8), tag u8, payload
//!             tag 0  f64 tensor: rank u32, dims u64 × rank, data f64 × Π dims
//!             tag 1  u64 words:  len u64, words u64 × len
//!             tag 2  bytes:      len u64, raw bytes
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Entries keep insertion order, so writing the same state twice produces
//! byte-identical files.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AGOPTCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Words(Vec<u64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    /// Insert or replace an entry.
    pub fn put(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.put(name, Entry::Tensor(t.clone()));
    }

    pub fn put_f64(&mut self, name: impl Into<String>, x: f64) {
        self.put(name, Entry::Tensor(Tensor::vector(vec![x])));
    }

    pub fn put_words(&mut self, name: impl Into<String>, words: Vec<u64>) {
        self.put(name, Entry::Words(words));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, x: u64) {
        self.put_words(name, vec![x]);
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.put(name, Entry::Bytes(bytes));
    }

    /// Store every tensor of `params` as `<prefix>.<param name>`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) {
        for p in params.iter() {
            self.put_tensor(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Entry::Tensor(t) => Ok(t),
            _ => Err(corrupt(format!("entry `{name}` is not a tensor"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let t = self.tensor(name)?;
        if t.len() != 1 {
            return Err(corrupt(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn words(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::Words(w) => Ok(w),
            _ => Err(corrupt(format!("entry `{name}` is not a word array"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.words(name)? {
            [x] => Ok(*x),
            _ => Err(corrupt(format!("entry `{name}` is not a single word"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Entry::Bytes(b) => Ok(b),
            _ => Err(corrupt(format!("entry `{name}` is not a byte string"))),
        }
    }

    pub fn params(&self, prefix: &str, spec: &ModelSpec) -> Result<ParamSet> {
        let mut out = ParamSet::zeros(spec);
        let names: Vec<String> = out.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self.tensor(&format!("{prefix}.{name}"))?.clone();
            out.set_tensor(&name, t).map_err(|e| corrupt(format!("{prefix}.{name}: {e}")))?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Entry::Words(w) => {
                    out.push(1);
                    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
                    for &x in w {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(2);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(corrupt("file truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or corrupt file)"));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("entry name is not UTF-8"))?;
            let entry = match r.u8()? {
                0 => {
                    let rank = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u64()? as usize);
                    }
                    let n = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| corrupt("tensor too large"))?;
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::Tensor(Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("word array too large"))?)?;
                    Entry::Words(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                2 => {
                    let n = r.u64()? as usize;
                    Entry::Bytes(r.take(n)?.to_vec())
                }
                tag => return Err(corrupt(format!("unknown entry tag {tag}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("file truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
        let params = init_params(&spec, &mut RngStream::new(1));
        let mut ck = Checkpoint::new();
        ck.put_params("params", &params);
        ck.put_f64("c", -0.0);
        ck.put_words("rng", vec![1, u64::MAX, 3, 4]);
        ck.put_bytes("config", b"{}".to_vec());
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f64("c").unwrap().to_bits(), (-0.0f64).to_bits());
        let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
        assert_eq!(back.params("params", &spec).unwrap(), init_params(&spec, &mut RngStream::new(1)));
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn missing_and_mistyped_entries() {
        let ck = sample();
        assert!(ck.tensor("nope").is_err());
        assert!(ck.words("c").is_err());
        assert!(ck.bytes("rng").is_err());
    }
}
