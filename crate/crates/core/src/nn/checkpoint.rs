//! Versioned tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SCGICKPT"
//! version  u32            (currently 1)
//! dtype    u8             (1 = f32, 2 = f64)
//! n_meta   u32, then n_meta × { key: u32 len + utf8, value: u32 len + utf8 }
//! n_tensor u32, then n_tensor × {
//!     name: u32 len + utf8, ndim: u32, dims: ndim × u64,
//!     nbytes: u64, raw little-endian values
//! }
//! ```
//!
//! Entries are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCGICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, RawTensor>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(dtype: DType) -> Self {
        Checkpoint {
            dtype,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        if T::DTYPE != self.dtype {
            return Err(ckpt_err(format!(
                "cannot store {} tensor {name} in {} checkpoint",
                T::DTYPE.name(),
                self.dtype.name()
            )));
        }
        let mut bytes = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &x in tensor.data() {
            x.extend_le_bytes(&mut bytes);
        }
        self.tensors.insert(
            name.to_string(),
            RawTensor {
                shape: tensor.shape().to_vec(),
                bytes,
            },
        );
        Ok(())
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        if T::DTYPE != self.dtype {
            return Err(ckpt_err(format!(
                "checkpoint holds {} values, requested {}",
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        let data = raw
            .bytes
            .chunks_exact(T::DTYPE.size())
            .map(T::from_le_slice)
            .collect();
        Tensor::new(&raw.shape, data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Removes every tensor whose name starts with `prefix`; returns how many.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.tensors.len();
        self.tensors.retain(|k, _| !k.starts_with(prefix));
        before - self.tensors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.tag());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| ckpt_err(format!("unknown dtype tag {tag}")))?;
        let mut ckpt = Checkpoint::new(dtype);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let nbytes = r.u64()? as usize;
            let numel: usize = shape.iter().product();
            if numel * dtype.size() != nbytes {
                return Err(ckpt_err(format!("tensor {name}: {nbytes} bytes for shape {shape:?}")));
            }
            let data = r.take(nbytes)?.to_vec();
            ckpt.tensors.insert(name, RawTensor { shape, bytes: data });
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err("trailing bytes"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the tensors whose names pass `keep`, in name order.
    pub fn tensor_hash(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        h.update([self.dtype.tag()]);
        for (name, t) in self.tensors.iter().filter(|(n, _)| keep(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update(&t.bytes);
        }
        hex::encode(h.finalize())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(any::<f64>(), 1..40),
            key in "[a-z.]{1,12}",
        ) {
            let t = Tensor::new(&[values.len()], values).unwrap();
            let mut c = Checkpoint::new(DType::F64);
            c.meta.insert(key.clone(), "v".into());
            c.insert(&key, &t).unwrap();
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            let t2: Tensor<f64> = back.get(&key).unwrap();
            let a: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn dtype_mismatch_and_corruption_are_rejected() {
        let mut c = Checkpoint::new(DType::F32);
        assert!(c.insert("x", &Tensor::<f64>::zeros(&[2])).is_err());
        c.insert("x", &Tensor::<f32>::zeros(&[2])).unwrap();
        assert!(c.get::<f64>("x").is_err());
        let mut bytes = c.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn remove_prefix_drops_only_matching() {
        let mut c = Checkpoint::new(DType::F32);
        for n in ["cgi.a", "cgi.b", "cff.a"] {
            c.insert(n, &Tensor::<f32>::zeros(&[1])).unwrap();
        }
        let h = c.tensor_hash(|n| !n.starts_with("cgi."));
        assert_eq!(c.remove_prefix("cgi."), 2);
        assert!(c.contains("cff.a"));
        assert_eq!(c.tensor_hash(|_| true), h);
    }
}
