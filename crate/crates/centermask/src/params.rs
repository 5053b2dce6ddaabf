//! Named parameter storage and the checkpoint file format.
//!
//! A [`ParamStore`] maps stable string keys to tensors. Initialization is
//! seed-driven and keyed per parameter, so the same seed always reproduces
//! the same values bit for bit, regardless of registration order.
//!
//! Checkpoint format (little-endian throughout):
//!
//! ```text
//! magic   4 bytes  b"CMK1"
//! count   u64
//! entry*  u32 key_len | key utf-8 | u32 ndim | u64 dim* | f64 value*
//! ```
//!
//! Values are row-major. Files are written atomically (temp file + rename).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMK1";

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

/// Weight initialization scheme for a registered parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He normal with the given fan-in.
    HeNormal { fan_in: usize },
    Zero,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter, initializing it from `(seed, key)`.
    pub fn register(&mut self, key: &str, shape: &[usize], init: Init, seed: u64) {
        assert!(
            !self.entries.contains_key(key),
            "duplicate parameter key {key:?}"
        );
        let tensor = match init {
            Init::HeNormal { fan_in } => {
                let mut rng = crate::rng::stream(seed, key);
                crate::rng::he_normal_tensor(&mut rng, shape, fan_in)
            }
            Init::Zero => Tensor::zeros(shape),
        };
        self.entries.insert(key.to_string(), tensor);
    }

    pub fn insert(&mut self, key: &str, value: Tensor) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> &Tensor {
        self.entries
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter {key:?}"))
    }

    pub fn get_mut(&mut self, key: &str) -> &mut Tensor {
        self.entries
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing parameter {key:?}"))
    }

    pub fn try_get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serialize to the checkpoint format. Atomic: writes a sibling temp
    /// file and renames it over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, tensor) in &self.entries {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io_util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        let magic = cur.bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let count = cur.u64()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let key_len = cur.u32()? as usize;
            let key = String::from_utf8(cur.bytes(key_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 parameter key".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(cur.bytes(8)?.try_into().unwrap()));
            }
            entries.insert(key, Tensor::from_vec(&shape, data));
        }
        Ok(ParamStore { entries })
    }

    /// Check that this store holds exactly `expected`'s key set with
    /// matching shapes.
    pub fn validate_schema(&self, expected: &ParamStore) -> Result<()> {
        for (key, tensor) in expected.iter() {
            match self.try_get(key) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {key:?}")));
                }
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {key:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        tensor.shape()
                    )));
                }
                _ => {}
            }
        }
        if self.len() != expected.len() {
            let extra: Vec<&str> = self
                .keys()
                .filter(|k| expected.try_get(k).is_none())
                .collect();
            return Err(Error::Checkpoint(format!(
                "unexpected parameters: {extra:?}"
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}
