//! Binary checkpoints: magic `STNI`, u32 LE version, u32 LE entry count,
//! then per entry a u16 LE name length, UTF-8 name, u8 rank, u32 LE
//! extents and f32 LE values.

use std::fs;
use std::path::Path;

use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STNI";
pub const VERSION: u32 = 1;

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    /// Appends or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn insert_values(&mut self, name: impl Into<String>, values: &[f32]) {
        let t = Tensor::from_vec(vec![values.len().max(1)], if values.is_empty() { vec![0.0] } else { values.to_vec() })
            .expect("vector");
        self.insert(name, t);
    }

    /// A u64 split into four exactly representable 16-bit chunks.
    pub fn insert_u64(&mut self, name: impl Into<String>, v: u64) {
        let chunks: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
        self.insert_values(name, &chunks);
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let t = self.require(name)?;
        if t.len() != 4 {
            return Err(Error::CorruptCheckpoint(format!("{name} is not a u64")));
        }
        Ok(t.data().iter().enumerate().fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
    }

    /// Stores every parameter of `store` under `prefix`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for p in store.iter() {
            self.insert(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Loads the `prefix` section into `store`, checking names and shapes in
    /// store order; the first disagreement is reported.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.iter_mut() {
            let name = format!("{prefix}{}", p.name);
            let t = self.get(&name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name,
                    model: p.value.shape().to_vec(),
                    checkpoint: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("entry name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too high: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.filter(|&c| c <= bytes.len() / 4).ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: bad shape")))?;
            let values = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(shape, values).map_err(|_| Error::CorruptCheckpoint(format!("{name}: bad shape")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::new();
        c.insert("ab", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"STNI");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..14], &2u16.to_le_bytes());
        assert_eq!(&b[14..16], b"ab");
        assert_eq!(b[16], 1);
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn truncation_and_version() {
        let mut c = Checkpoint::new();
        c.insert_u64("meta/seed", 0xdead_beef_1234_5678);
        assert_eq!(c.get_u64("meta/seed").unwrap(), 0xdead_beef_1234_5678);
        let b = c.to_bytes().unwrap();
        for cut in [3, 10, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::CheckpointVersion(9))));
    }
}
