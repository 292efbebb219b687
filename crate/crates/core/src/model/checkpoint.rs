//! Binary parameter store.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "SRDRMCKP"
//! version      u32      currently 1
//! entry count  u32
//! entries      repeated:
//!   name length  u32
//!   name         UTF-8 bytes
//!   dtype        u8     0 = f32
//!   rank         u8
//!   dims         u32 x rank
//!   payload      f32 x product(dims)
//!   checksum     u32    CRC-32 of every preceding byte of this entry
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::ModelError;

pub const MAGIC: &[u8; 8] = b"SRDRMCKP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named collection of `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<(), ModelError> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(ModelError::Format(format!(
                "entry {name}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(ModelError::Format(format!(
                "entry {name}: rank {} too large",
                dims.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(ModelError::Format(format!("duplicate entry name {name}")));
        }
        self.entries.push(CheckpointEntry { name, dims, data });
        Ok(())
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| e.data.len() * 4 + e.name.len() + 16).sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let start = out.len();
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ModelError::Format("bad magic, not a checkpoint file".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32().ok_or_else(|| ModelError::Format("truncated header".into()))?;
        if version != VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32().ok_or_else(|| ModelError::Format("truncated header".into()))?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let start = r.pos;
            let corrupt = |name: &str, reason: &str| ModelError::Corrupt {
                entry: name.to_string(),
                reason: reason.to_string(),
            };
            let placeholder = format!("#{i}");
            let name_len = r.u32().ok_or_else(|| corrupt(&placeholder, "truncated entry header"))? as usize;
            let name_bytes = r
                .take(name_len)
                .ok_or_else(|| corrupt(&placeholder, "truncated entry name"))?;
            let name =
                String::from_utf8(name_bytes.to_vec()).map_err(|_| corrupt(&placeholder, "entry name is not UTF-8"))?;
            let dtype = r.u8().ok_or_else(|| corrupt(&name, "truncated entry header"))?;
            if dtype != DTYPE_F32 {
                return Err(ModelError::Format(format!(
                    "entry {name}: unsupported dtype tag {dtype}"
                )));
            }
            let rank = r.u8().ok_or_else(|| corrupt(&name, "truncated entry header"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(|| corrupt(&name, "truncated dims"))? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(&name, "dims overflow"))?;
            let payload = numel
                .checked_mul(4)
                .and_then(|n| r.take(n))
                .ok_or_else(|| corrupt(&name, "truncated payload"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let body_end = r.pos;
            let stored = r.u32().ok_or_else(|| corrupt(&name, "missing checksum"))?;
            if crc32fast::hash(&bytes[start..body_end]) != stored {
                return Err(corrupt(&name, "checksum mismatch"));
            }
            if !seen.insert(name.clone()) {
                return Err(ModelError::Format(format!("duplicate entry name {name}")));
            }
            entries.push(CheckpointEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("a.weight", vec![2, 1, 1, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE])
            .unwrap();
        c.push("a.bias", vec![2], vec![0.0, -0.0]).unwrap();
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], b"SRDRMCKP");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &8u32.to_le_bytes());
        assert_eq!(&b[20..28], b"a.weight");
    }

    #[test]
    fn bad_magic() {
        let mut b = sample().to_bytes();
        b[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(Checkpoint::from_bytes(&b), Err(ModelError::Format(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut b = sample().to_bytes();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(ModelError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn flipped_payload_bit_names_entry() {
        let mut b = sample().to_bytes();
        b[50] ^= 0x01;
        match Checkpoint::from_bytes(&b) {
            Err(ModelError::Corrupt { entry, .. }) => assert_eq!(entry, "a.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let b = sample().to_bytes();
        match Checkpoint::from_bytes(&b[..b.len() - 6]) {
            Err(ModelError::Corrupt { entry, .. }) => assert_eq!(entry, "a.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert!(c.push("a.bias", vec![1], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<u32>(), 0..64), name in "[a-z.0-9_]{1,24}") {
            let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let mut c = Checkpoint::new();
            c.push(name, vec![data.len()], data.clone()).unwrap();
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let bits: Vec<u32> = back.entries()[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, values);
        }
    }
}
