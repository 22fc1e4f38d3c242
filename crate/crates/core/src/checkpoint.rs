//! Binary parameter container.
//!
//! Layout: the magic `LUMIQ1`, then for each entry a little-endian `u32`
//! name length, the UTF-8 name, four little-endian `u64` dims and the `f64`
//! payload in little-endian order. Entries run to end of file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 6] = b"LUMIQ1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor4)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor4)] {
        &self.entries
    }

    /// Insert or replace an entry, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn insert_set(&mut self, set: &ParamSet) {
        for (n, t) in set.export() {
            self.insert(n, t);
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Tensor4::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Compatibility(format!("missing entry `{name}`")))?;
        if t.len() != 1 {
            return Err(Error::Compatibility(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn load_set(&self, set: &mut ParamSet) -> Result<()> {
        set.import(&self.entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corruption("bad checkpoint magic".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let mut ck = Checkpoint::new();
        while !r.done() {
            let len = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Corruption("entry name is not UTF-8".into()))?
                .to_string();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                let raw = u64::from_le_bytes(r.take(8, "dims")?.try_into().unwrap());
                *d = usize::try_from(raw).map_err(|_| Error::Corruption(format!("dim overflow in `{name}`")))?;
            }
            let bytes_len = dims
                .iter()
                .try_fold(8usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("size overflow in `{name}`")))?;
            let data = r
                .take(bytes_len, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if ck.get(&name).is_some() {
                return Err(Error::Corruption(format!("duplicate entry `{name}`")));
            }
            ck.entries.push((name, Tensor4::new(dims, data)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
