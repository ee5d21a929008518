//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSPK" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 rank | u64 dims[rank] | f32 data[Π dims]
//! JSON metadata (UTF-8)
//! u64 byte offset of the JSON metadata
//! ```

use std::path::Path;

use rfsep_tensor::{AdamState, ParamSet, Tensor};
use serde_json::Value;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"FSPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Value,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.buf.get(self.at..end)?;
        self.at = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_params(&mut self, params: &ParamSet) {
        for (n, t) in params.iter() {
            self.push(n, t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with any of `prefixes`, in file order.
    pub fn params(&self, prefixes: &[&str]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in &self.tensors {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                ps.insert(n.as_str(), t.clone());
            }
        }
        ps
    }

    /// Store Adam moments aligned with `params` under `adam.m.` / `adam.v.`.
    pub fn push_adam(&mut self, params: &ParamSet, state: &AdamState) {
        for ((n, _), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
            self.push(format!("adam.m.{n}"), m.clone());
            self.push(format!("adam.v.{n}"), v.clone());
        }
    }

    /// Adam moments for `params` (the step counter lives in the metadata).
    pub fn adam(&self, params: &ParamSet, step: u64) -> Option<AdamState> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (n, t) in params.iter() {
            let (a, b) = (self.get(&format!("adam.m.{n}"))?, self.get(&format!("adam.v.{n}"))?);
            if a.shape() != t.shape() || b.shape() != t.shape() {
                return None;
            }
            m.push(a.clone());
            v.push(b.clone());
        }
        Some(AdamState { m, v, step })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.rank() > u8::MAX as usize {
                return Err(Error::Invalid(format!("tensor {name} has rank {}", t.rank())));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let offset = out.len() as u64;
        let json = serde_json::to_vec(&self.meta).map_err(|source| Error::Json {
            context: "checkpoint metadata".into(),
            source,
        })?;
        out.extend_from_slice(&json);
        out.extend_from_slice(&offset.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        let truncated = || corrupt(path, "truncated file");
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version} (expected {VERSION})")));
        }
        if buf.len() < 8 {
            return Err(truncated());
        }
        let offset = u64::from_le_bytes(buf[buf.len() - 8..].try_into().expect("8 bytes")) as usize;
        if offset > buf.len() - 8 {
            return Err(corrupt(path, "metadata offset out of range"));
        }
        let count = r.u32().ok_or_else(truncated)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
                .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(truncated)? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.at != offset {
            return Err(corrupt(path, "metadata offset does not follow the tensor block"));
        }
        let meta = serde_json::from_slice(&buf[offset..buf.len() - 8])
            .map_err(|e| corrupt(path, format!("metadata: {e}")))?;
        Ok(Self { tensors, meta })
    }

    /// Write via a temporary file and rename, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&buf, path)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key)?.as_str()
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key)?.as_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(json!({"kind": "flow", "step": 3}));
        c.push("vfield.stem.conv.weight", Tensor::randn([2, 3, 3, 3], 1).unwrap());
        c.push("scalar", Tensor::scalar(1.5));
        c.push("v", Tensor::new([3], vec![-0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_u64("step"), Some(3));
        assert_eq!(back.get("v").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FSPK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"vfield.stem.conv.weight");
        assert_eq!(bytes[16 + name_len], 4);
    }

    #[test]
    fn rejects_unknown_version_and_garbage() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(Checkpoint::from_bytes(b"NOPE", Path::new("x")).is_err());
        let good = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 20], Path::new("x")).is_err());
    }

    #[test]
    fn params_and_adam_round_trip() {
        let mut ps = ParamSet::new();
        ps.insert("net.a", Tensor::randn([2, 2], 1).unwrap());
        ps.insert("net.b", Tensor::randn([3], 2).unwrap());
        let mut st = AdamState::zeros_like(ps.tensors());
        st.m[1] = Tensor::ones([3]);
        let mut c = Checkpoint::new(json!({}));
        c.push_params(&ps);
        c.push_adam(&ps, &st);
        assert_eq!(c.params(&["net."]).names(), ps.names());
        assert_eq!(c.params(&["adam."]).len(), 4);
        assert_eq!(c.adam(&ps, 0).unwrap(), st);
    }
}
