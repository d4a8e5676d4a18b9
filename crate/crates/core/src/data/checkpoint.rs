//! Binary checkpoint container.
//!
//! Layout (little endian): magic `CMNS`, `u32` version, `u32` record count,
//! then per record a `u32` name length, the UTF-8 name, a tag byte and the
//! payload. Tag 0 is a tensor (`u32` rank, `u64` dims, f64 values), tag 1 a
//! byte string (`u64` length + bytes), tag 2 a `u64`. Loading parses the
//! whole file before returning, and the `restore_*` helpers check every
//! record before writing anything.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMNS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Tensor(Tensor),
    Bytes(Vec<u8>),
    U64(u64),
}

/// Named records, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: BTreeMap<String, Record>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: impl Into<String>, r: Record) {
        self.records.insert(name.into(), r);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.records.get(name) {
            Some(Record::Tensor(t)) => Ok(t),
            Some(_) => Err(bad(format!("record '{name}' is not a tensor"))),
            None => Err(bad(format!("missing record '{name}'"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.records.get(name) {
            Some(Record::Bytes(b)) => Ok(b),
            Some(_) => Err(bad(format!("record '{name}' is not a byte string"))),
            None => Err(bad(format!("missing record '{name}'"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?).map_err(|_| bad(format!("record '{name}' is not UTF-8")))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.records.get(name) {
            Some(Record::U64(v)) => Ok(*v),
            Some(_) => Err(bad(format!("record '{name}' is not an integer"))),
            None => Err(bad(format!("missing record '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, r) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match r {
                Record::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
                Record::U64(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
        }
        let count = r.u32()?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            let rec = match r.take(1)?[0] {
                0 => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
                    if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                        return Err(bad(format!("record '{name}' is truncated")));
                    }
                    let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Record::Tensor(Tensor::new(shape, data).map_err(|e| bad(format!("record '{name}': {e}")))?)
                }
                1 => {
                    let n = r.u64()?;
                    if n > r.remaining() as u64 {
                        return Err(bad(format!("record '{name}' is truncated")));
                    }
                    Record::Bytes(r.take(n as usize)?.to_vec())
                }
                2 => Record::U64(r.u64()?),
                t => return Err(bad(format!("record '{name}' has unknown tag {t}"))),
            };
            if records.insert(name.clone(), rec).is_some() {
                return Err(bad(format!("duplicate record '{name}'")));
            }
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { records })
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Stores every parameter as `<prefix><name>`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.put(format!("{prefix}{}", p.name), Record::Tensor(p.value.clone()));
        }
    }

    /// Overwrites every parameter of `store` from `<prefix><name>` records,
    /// after checking that all exist with matching shapes.
    pub fn restore_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let mut values = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let t = self.tensor(&format!("{prefix}{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!(
                    "parameter '{}' has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            values.push((id, t.clone()));
        }
        for (id, t) in values {
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    /// Optimizer state as `<prefix>steps` plus `<prefix>m/<param>` and
    /// `<prefix>v/<param>` moments.
    pub fn put_adam(&mut self, prefix: &str, opt: &Adam, store: &ParamStore) {
        self.put(format!("{prefix}steps"), Record::U64(opt.steps));
        for (id, (m, v)) in &opt.moments {
            let name = &store.param(*id).name;
            self.put(format!("{prefix}m/{name}"), Record::Tensor(m.clone()));
            self.put(format!("{prefix}v/{name}"), Record::Tensor(v.clone()));
        }
    }

    pub fn restore_adam(&self, prefix: &str, opt: &mut Adam, store: &ParamStore) -> Result<()> {
        let steps = self.u64(&format!("{prefix}steps"))?;
        let mut moments = BTreeMap::new();
        for id in store.ids(opt.group) {
            let name = &store.param(id).name;
            let (mk, vk) = (format!("{prefix}m/{name}"), format!("{prefix}v/{name}"));
            if !self.records.contains_key(&mk) {
                continue;
            }
            let (m, v) = (self.tensor(&mk)?, self.tensor(&vk)?);
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(bad(format!("optimizer moments of '{name}' have the wrong shape")));
            }
            moments.insert(id, (m.clone(), v.clone()));
        }
        opt.steps = steps;
        opt.moments = moments;
        Ok(())
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        let mut b = rng.get_seed().to_vec();
        b.extend_from_slice(&rng.get_stream().to_le_bytes());
        b.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        self.put(name, Record::Bytes(b));
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let b = self.bytes(name)?;
        if b.len() != 32 + 8 + 16 {
            return Err(bad(format!("rng record '{name}' has {} bytes", b.len())));
        }
        let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
        Ok(rng)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
