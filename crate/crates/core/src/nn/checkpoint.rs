//! Binary checkpoint container.
//!
//! ```text
//! magic    b"SKSR"
//! version  u16 LE
//! count    u32 LE
//! count x record:
//!     name_len u32 LE, name (UTF-8, dotted)
//!     rank     u32 LE
//!     dims     rank x u32 LE
//!     values   prod(dims) x f32 LE, row-major
//! crc32    u32 LE over every preceding byte
//! ```

use std::path::Path;

use super::{Parameterized, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKSR";
pub const VERSION: u16 = 1;

/// Ordered list of named tensors, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_model<T: Scalar, M: Parameterized<T> + ?Sized>(model: &M) -> Self {
        let mut ckpt = Checkpoint::new();
        model.visit_params("", &mut |name, p| {
            let mut t = p.cast::<f32>();
            t.clear_grad();
            ckpt.records.push((name, t));
        });
        ckpt
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let mut tensor = tensor;
        tensor.clear_grad();
        self.records.push((name.into(), tensor));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f32) {
        self.push(name, Tensor::from_slice(&[value]));
    }

    pub fn records(&self) -> &[(String, Tensor<f32>)] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        match self.get(name) {
            Some(t) if t.len() == 1 => Ok(t.data()[0]),
            Some(_) => Err(Error::Checkpoint(format!("record {name} is not a scalar"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    }

    /// Records whose names start with `prefix.`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.records.iter().filter_map(move |(n, t)| {
            n.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .map(|rest| (rest, t))
        })
    }

    /// Copies stored values into a model with the same parameter names and shapes.
    pub fn load_into<T: Scalar, M: Parameterized<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut problems = Vec::new();
        model.visit_params_mut("", &mut |name, p| match self.get(&name) {
            Some(t) if t.shape() == p.shape() => {
                for (dst, src) in p.data_mut().iter_mut().zip(t.data()) {
                    *dst = T::of(f64::from(*src));
                }
            }
            Some(t) => problems.push(format!("{name}: stored shape {:?} vs model {:?}", t.shape(), p.shape())),
            None => problems.push(format!("{name}: missing")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("; ")))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "crc mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(dims, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            records.push((name, tensor));
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated record".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
