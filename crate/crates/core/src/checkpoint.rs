//! Named-tensor container stored as `EMD1` files.
//!
//! Layout, all integers little-endian: magic `EMD1`, `u16` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per extent and the values as `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMD1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; values are stored at `f32` precision.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(format!("checkpoint name of {} bytes", name.len())));
        }
        if tensor.shape().len() > usize::from(u8::MAX) || tensor.shape().iter().any(|&e| e > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!("`{name}` has unstorable shape {:?}", tensor.shape())));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate checkpoint entry `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.iter().filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail_at(0, "bad magic, expected EMD1"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let at = r.pos;
            let len = usize::from(r.u16("name length")?);
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.fail_at(at + 2, "name is not UTF-8"))?
                .to_string();
            if name.is_empty() {
                return Err(r.fail_at(at, "empty tensor name"));
            }
            if ck.contains(&name) {
                return Err(r.fail_at(at, format!("duplicate tensor `{name}`")));
            }
            let rank = usize::from(r.take(1, "rank")?[0]);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.fail_at(at, format!("`{name}` extents {shape:?} exceed the file")))?;
            let raw = r.take(4 * n, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            ck.tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
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

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("b", Tensor::new(vec![2, 1], vec![0.5, -1.25]).unwrap()).unwrap();
        ck.insert("a", Tensor::scalar(3.0)).unwrap();
        ck
    }

    #[test]
    fn layout_matches_by_hand() {
        let bytes = sample().encode();
        let mut want = b"EMD1".to_vec();
        want.extend_from_slice(&[1, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, b'a', 1, 1, 0, 0, 0]);
        want.extend_from_slice(&3.0f32.to_le_bytes());
        want.extend_from_slice(&[1, 0, b'b', 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(&(-1.25f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn duplicates_are_rejected_on_both_paths() {
        let mut ck = sample();
        assert!(ck.insert("a", Tensor::scalar(1.0)).is_err());
        let mut bytes = sample().encode();
        // rename "b" to "a"
        let pos = bytes.iter().rposition(|&c| c == b'b').unwrap();
        bytes[pos] = b'a';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_and_magic_report_offsets() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
