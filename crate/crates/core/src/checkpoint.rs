//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"TPD1"`, `u32` version, config text, `u32` entry count, entries
//! (name, dtype byte, `u32` rank, `u64` dims, raw payload), `u32` RNG count,
//! RNG states (name, 32-byte seed, `u64` stream, `u128` word position),
//! `u64` step. Strings are a `u32` byte length followed by UTF-8.

use std::path::Path;

use crate::autodiff::{ParamStore, Precision, Tensor};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"TPD1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    /// Stored as 32-bit when every value survives the round trip.
    pub fn new(name: impl Into<String>, t: &Tensor) -> Self {
        let data = t.data().to_vec();
        let dtype = if data.iter().all(|&x| (x as f32) as f64 == x || x.is_nan()) {
            DType::F32
        } else {
            DType::F64
        };
        Entry {
            name: name.into(),
            dtype,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<Entry>,
    pub rngs: Vec<(String, RngState)>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: String, step: u64) -> Self {
        Checkpoint {
            config,
            entries: Vec::new(),
            rngs: Vec::new(),
            step,
        }
    }

    /// Appends every parameter of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.entries.push(Entry::new(format!("{prefix}/{name}"), t));
        }
    }

    /// Rebuilds the parameters stored under `prefix/`, in stored order.
    pub fn store(&self, prefix: &str, precision: Precision) -> ParamStore {
        let mut s = ParamStore::new();
        let head = format!("{prefix}/");
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix(&head) {
                let mut t = e.tensor();
                if precision == Precision::F32 && e.dtype == DType::F64 {
                    precision.round_all(t.data_mut());
                }
                s.add(name, t);
            }
        }
        s
    }

    pub fn rng(&self, name: &str) -> Option<RngState> {
        self.rngs.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for &x in &e.data {
                match e.dtype {
                    DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (name, s) in &self.rngs {
            put_str(&mut out, name);
            out.extend_from_slice(&s.seed);
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(CheckpointError::Malformed(format!("dtype code {c}"))),
            };
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let raw = r.take(count.checked_mul(width).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            entries.push(Entry { name, dtype, shape, data });
        }
        let n = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.string()?;
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.push((name, RngState { seed, stream, word_pos }));
        }
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { config, entries, rngs, step })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut rng = crate::rng::stream(3, 0);
        let mut store = ParamStore::new();
        let mut a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        Precision::F32.round_all(a.data_mut());
        store.add("a", a);
        store.add("b", Tensor::randn(&[4], 1.0, &mut rng));
        store.add("s", Tensor::scalar(0.5));
        let mut c = Checkpoint::new("seed = 3\n".into(), 17);
        c.push_store("gen", &store);
        let r = crate::rng::stream(1, 2);
        c.rngs.push(("train".into(), RngState::capture(&r)));
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tpd");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn dtype_follows_representability() {
        let c = sample();
        assert_eq!(c.entries[0].dtype, DType::F32);
        assert_eq!(c.entries[1].dtype, DType::F64);
        assert_eq!(c.entries[2].dtype, DType::F32);
    }

    #[test]
    fn widening_is_lossless() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let s64 = back.store("gen", Precision::F64);
        let id = s64.id("a").unwrap();
        assert_eq!(s64.get(id).data(), c.entries[0].data.as_slice());
        let s32 = back.store("gen", Precision::F32);
        let b = s32.get(s32.id("b").unwrap()).data();
        assert!(b.iter().all(|&x| (x as f32) as f64 == x));
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"TP"), Err(CheckpointError::BadMagic)));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn random_entries_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 1..40), step in any::<u64>()) {
            let mut c = Checkpoint::new("x = 1".into(), step);
            c.entries.push(Entry::new("p", &Tensor::new(&[vals.len()], vals.clone())));
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(&back.entries[0].data, &vals);
        }
    }
}
