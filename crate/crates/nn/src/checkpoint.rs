//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `VQDCKPT1`, a little-endian `u32` header length,
//! a UTF-8 header of `key=value` lines, then every tensor as flat 32-bit
//! little-endian floats in header order.
//!
//! Header lines are `arch.<key>=<value>` (architecture echo, checked on load),
//! `meta.<key>=<value>` (free metadata) and `tensor=<name>\t<d0,d1,..>`.

use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::param::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VQDCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arch: Vec<(String, String)>,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(arch: Vec<(String, String)>) -> Self {
        Self {
            arch,
            ..Self::default()
        }
    }

    pub fn push_store<T: Float>(&mut self, store: &ParamStore<T>) {
        for p in store.iter() {
            self.tensors.push((p.name.clone(), p.value.cast()));
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copies stored tensors into `store` by name, checking shapes.
    pub fn load_store<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    /// Errors unless the stored architecture echo equals `expected`.
    pub fn check_arch(&self, expected: &[(String, String)]) -> Result<()> {
        for (key, want) in expected {
            let found = self
                .arch
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .unwrap_or_default();
            if &found != want {
                return Err(NnError::ArchitectureMismatch {
                    key: key.clone(),
                    expected: want.clone(),
                    found,
                });
            }
        }
        if let Some((key, found)) = self
            .arch
            .iter()
            .find(|(k, _)| !expected.iter().any(|(e, _)| e == k))
        {
            return Err(NnError::ArchitectureMismatch {
                key: key.clone(),
                expected: String::new(),
                found: found.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.arch {
            header.push_str(&format!("arch.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={name}\t{}\n", dims.join(",")));
        }
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| NnError::Checkpoint("truncated header".into()))?;
        let header = std::str::from_utf8(header)
            .map_err(|_| NnError::Checkpoint("header is not UTF-8".into()))?;
        let mut ckpt = Checkpoint::default();
        let mut shapes = Vec::new();
        for line in header.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NnError::Checkpoint(format!("malformed header line `{line}`")))?;
            if let Some(k) = key.strip_prefix("arch.") {
                ckpt.arch.push((k.to_string(), value.to_string()));
            } else if let Some(k) = key.strip_prefix("meta.") {
                ckpt.meta.push((k.to_string(), value.to_string()));
            } else if key == "tensor" {
                let (name, dims) = value
                    .split_once('\t')
                    .ok_or_else(|| NnError::Checkpoint(format!("malformed tensor line `{line}`")))?;
                let dims = dims
                    .split(',')
                    .filter(|d| !d.is_empty())
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| NnError::Checkpoint(format!("bad dims in `{line}`")))?;
                shapes.push((name.to_string(), dims));
            } else {
                return Err(NnError::Checkpoint(format!("unknown header key `{key}`")));
            }
        }
        let mut offset = 12 + header_len;
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| NnError::Checkpoint(format!("truncated payload at `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ckpt.tensors.push((name, Tensor::new(dims, data)?));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(vec![("kind".into(), "test".into()), ("width".into(), "8".into())]);
        c.meta.push(("epoch".into(), "3".into()));
        c.push_tensor("a", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        c.push_tensor("b", Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap());
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let c = sample();
        let mut expected = c.arch.clone();
        assert!(c.check_arch(&expected).is_ok());
        expected[1].1 = "16".into();
        assert!(matches!(
            c.check_arch(&expected),
            Err(NnError::ArchitectureMismatch { .. })
        ));
        assert!(c.check_arch(&expected[..1]).is_err());
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
