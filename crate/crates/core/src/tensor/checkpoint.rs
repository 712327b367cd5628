//! Named-array checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"ANMTCKPT"
//! version      u32       CHECKPOINT_VERSION
//! meta_len     u32       length of the metadata section
//! meta         bytes     UTF-8 `key = value` lines (model config)
//! n_arrays     u32
//! per array:
//!   name_len   u32
//!   name       bytes     UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f64 (IEEE-754, little-endian)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use std::collections::BTreeMap;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANMTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayContainer {
    pub meta: String,
    pub arrays: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non UTF-8 string"))
    }
}

impl ArrayContainer {
    pub fn new(meta: impl Into<String>) -> Self {
        ArrayContainer {
            meta: meta.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| bad(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("array `{name}` too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(&dims, values)?));
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ArrayContainer { meta, arrays })
    }

    /// Snapshot of every parameter value, plus momentum buffers under
    /// `velocity/<name>` when `with_velocity` is set.
    pub fn from_store(meta: impl Into<String>, store: &ParameterStore, with_velocity: bool) -> Self {
        let mut c = ArrayContainer::new(meta);
        for (_, p) in store.iter() {
            c.push(p.name.clone(), p.value.clone());
        }
        if with_velocity {
            for (_, p) in store.iter() {
                if !p.velocity.is_empty() {
                    let v = Tensor::new(p.value.shape(), p.velocity.clone()).expect("velocity shape");
                    c.push(format!("velocity/{}", p.name), v);
                }
            }
        }
        c
    }

    /// Overwrites the values of `store` (and momentum buffers, when present)
    /// from this container. Every parameter must be present with its exact
    /// shape.
    pub fn restore_store(&self, store: &mut ParameterStore) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.require(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!(
                    "array `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            p.grad.fill(0.0);
            p.velocity = match self.get(&format!("velocity/{}", p.name)) {
                Some(v) if v.shape() == p.value.shape() => v.data().to_vec(),
                Some(_) => return Err(bad(format!("velocity of `{}` has the wrong shape", p.name))),
                None => Vec::new(),
            };
        }
        Ok(())
    }

    /// Metadata as `key = value` pairs.
    pub fn meta_map(&self) -> BTreeMap<String, String> {
        parse_meta(&self.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Parses `key = value` lines; blank lines and lines without `=` are skipped.
pub fn parse_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Looks up and parses a metadata field.
pub fn meta_field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| bad(format!("missing metadata field `{key}`")))?;
    raw.parse()
        .map_err(|_| bad(format!("metadata field `{key}` has invalid value `{raw}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = ArrayContainer::new("a = 1\n");
        c.push("w", Tensor::vector(vec![1.5]));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"ANMTCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &6u32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut c = ArrayContainer::new("");
        c.push("w", Tensor::zeros(&[2, 2]));
        let bytes = c.to_bytes();
        assert!(ArrayContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = ArrayContainer::from_bytes(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 9"));
        let mut extra = bytes;
        extra.push(0);
        assert!(ArrayContainer::from_bytes(&extra).is_err());
    }

    #[test]
    fn store_round_trip_with_velocity() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]));
        s.add("b", Tensor::zeros(&[2, 2]));
        s.get_mut(a).velocity = vec![0.5, -0.5];
        let c = ArrayContainer::from_store("kind = test\n", &s, true);
        assert!(c.get("velocity/a").is_some());
        assert!(c.get("velocity/b").is_none());
        let mut t = ParameterStore::new();
        let ta = t.add("a", Tensor::zeros(&[2]));
        t.add("b", Tensor::zeros(&[2, 2]));
        c.restore_store(&mut t).unwrap();
        assert_eq!(t.flat_values(), s.flat_values());
        assert_eq!(t.get(ta).velocity, vec![0.5, -0.5]);
        assert_eq!(meta_field::<String>(&c.meta_map(), "kind").unwrap(), "test");

        let mut wrong = ParameterStore::new();
        wrong.add("a", Tensor::zeros(&[3]));
        let err = c.restore_store(&mut wrong).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            meta in "[a-z_ =0-9\n]{0,40}",
            arrays in prop::collection::vec(
                (1usize..4, 1usize..4, prop::collection::vec(-1e6f64..1e6, 16)),
                0..4,
            ),
        ) {
            let mut c = ArrayContainer::new(meta);
            for (i, (r, k, vals)) in arrays.iter().enumerate() {
                c.push(format!("p{i}"), Tensor::new(&[*r, *k], vals[..r * k].to_vec()).unwrap());
            }
            let back = ArrayContainer::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
