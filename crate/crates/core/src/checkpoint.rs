//! Named-tensor container with a fixed little-endian binary layout.
//!
//! ```text
//! "PXGN" | version: u32 | count: u32
//! repeated count times, names in lexicographic order:
//!   name_len: u32 | name: utf-8 bytes | dtype: u8 | rank: u8 | dims: u32 × rank | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PXGN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::U64 { .. } => DType::U64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::U64 { shape, .. } => shape,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointBlob {
    entries: BTreeMap<String, Entry>,
}

impl CheckpointBlob {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    /// Store a tensor in its native precision.
    pub fn insert_tensor<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        let entry = match S::DTYPE {
            DType::F64 => Entry::F64(t.cast()),
            _ => Entry::F32(t.cast()),
        };
        self.insert(name, entry);
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.insert(
            name,
            Entry::U64 {
                shape: vec![values.len()],
                data: values.to_vec(),
            },
        );
    }

    /// Fetch a floating-point tensor, converting to `S`.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        match self.entries.get(name) {
            Some(Entry::F32(t)) => Ok(t.cast()),
            Some(Entry::F64(t)) => Ok(t.cast()),
            Some(Entry::U64 { .. }) => Err(Error::Contract(format!(
                "checkpoint entry {name:?} is not floating point"
            ))),
            None => Err(Error::Contract(format!("checkpoint has no entry {name:?}"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.entries.get(name) {
            Some(Entry::U64 { data, .. }) => Ok(data),
            Some(_) => Err(Error::Contract(format!("checkpoint entry {name:?} is not u64"))),
            None => Err(Error::Contract(format!("checkpoint has no entry {name:?}"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            other => Err(Error::Contract(format!(
                "checkpoint entry {name:?} has {} values, expected 1",
                other.len()
            ))),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> CheckpointBlob {
        CheckpointBlob {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Merge `other` into `self`, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: CheckpointBlob) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.entries.len(), "tensor count")?.to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype() as u8);
            let shape = entry.shape();
            let rank =
                u8::try_from(shape.len()).map_err(|_| Error::Contract(format!("rank of {name:?} exceeds 255")))?;
            out.push(rank);
            for &d in shape {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut entries = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.err(at, "name is not utf-8"))?
                .to_string();
            if last.as_ref().is_some_and(|prev| *prev >= name) {
                return Err(r.err(at, "tensor names out of order"));
            }
            let code_at = r.pos;
            let dtype = DType::from_code(r.take(1, "dtype")?[0]).ok_or_else(|| r.err(code_at, "unknown dtype code"))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
            let (numel, nbytes) = numel.ok_or_else(|| r.err(at, "tensor size overflows"))?;
            let payload = r.take(nbytes, "payload")?;
            let chunks = payload.chunks_exact(dtype.size());
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::new(&shape, chunks.map(f32::read_le).collect())?),
                DType::F64 => Entry::F64(Tensor::new(&shape, chunks.map(f64::read_le).collect())?),
                DType::U64 => Entry::U64 {
                    shape,
                    data: chunks
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                },
            };
            debug_assert_eq!(entry.shape().iter().product::<usize>(), numel);
            last = Some(name.clone());
            entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self { entries })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
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
            None => Err(self.err(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointBlob {
        let mut b = CheckpointBlob::new();
        b.insert_tensor(
            "w",
            &Tensor::<f32>::from_f64(&[2, 2], &[1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
        );
        b.insert_tensor("a.bias", &Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
        b.insert_u64("step", &[42]);
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = CheckpointBlob::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.names().collect::<Vec<_>>(), ["a.bias", "step", "w"]);
        assert_eq!(back.u64("step").unwrap(), 42);
    }

    #[test]
    fn layout_of_single_scalar() {
        let mut b = CheckpointBlob::new();
        b.insert_tensor("x", &Tensor::<f32>::scalar(1.0));
        let bytes = b.to_bytes().unwrap();
        let mut expect = b"PXGN".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'x');
        expect.push(0);
        expect.push(0);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [2, 9, 20, bytes.len() - 1] {
            match CheckpointBlob::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_version_and_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            CheckpointBlob::from_bytes(&bytes),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        bytes[0] = b'Q';
        assert!(matches!(
            CheckpointBlob::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
