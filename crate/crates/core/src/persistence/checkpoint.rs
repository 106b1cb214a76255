use std::collections::BTreeSet;
use std::path::Path;

use super::{atomic_write, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

/// An ordered table of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        Checkpoint { tensors: params.into_iter().map(|p| (p.name.clone(), p.value.clone())).collect() }
    }

    pub fn extend(&mut self, prefix: &str, other: Checkpoint) {
        for (name, t) in other.tensors {
            self.tensors.push((format!("{prefix}{name}"), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `params`, matching by name and shape.
    pub fn restore<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        for p in params {
            let t = self.get(&p.name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = BTreeSet::new();
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, VERSION)?;
        let count = r.u32()? as usize;
        r.ensure(count, 8)?;
        let mut seen = BTreeSet::new();
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            let ndim = r.u32()? as usize;
            r.ensure(ndim, 4)?;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
            r.ensure(n, 4)?;
            tensors.push((name, Tensor::from_vec(&dims, r.f32s(n)?)?));
        }
        r.finish()?;
        Ok(Checkpoint { tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
