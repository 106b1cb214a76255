use std::path::Path;

use super::{atomic_write, Reader, Writer};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CFDS";
const VERSION: u32 = 1;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// One visited state: the quantized observation, the agent's action
/// distribution there, the action taken and where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub observation: Vec<u8>,
    pub policy: Vec<f32>,
    pub action: u8,
    pub episode: u32,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_actions: usize,
    pub records: Vec<Record>,
}

impl RolloutDataset {
    pub fn new(channels: usize, height: usize, width: usize, num_actions: usize) -> Self {
        RolloutDataset { height, width, channels, num_actions, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn obs_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.observation.len() != self.obs_len() || record.policy.len() != self.num_actions {
            return Err(Error::Shape("record does not match dataset dimensions".into()));
        }
        if record.action as usize >= self.num_actions {
            return Err(Error::InvalidArgument(format!("action {} out of range", record.action)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn observation(&self, i: usize) -> Observation {
        let data = self.records[i].observation.iter().map(|&v| dequantize(v)).collect();
        Observation { height: self.height, width: self.width, data }
    }

    /// Dequantized observations `[idx.len(), c, h, w]`.
    pub fn observations(&self, idx: &[usize]) -> Tensor {
        let n = self.obs_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.records[i].observation.iter().map(|&v| dequantize(v)));
        }
        Tensor::from_vec(&[idx.len(), self.channels, self.height, self.width], data).expect("record sizes checked")
    }

    /// Stored action distributions `[idx.len(), |A|]`.
    pub fn policies(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.num_actions);
        for &i in idx {
            data.extend_from_slice(&self.records[i].policy);
        }
        Tensor::from_vec(&[idx.len(), self.num_actions], data).expect("record sizes checked")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        for d in [self.height, self.width, self.channels, self.num_actions] {
            w.u32(d as u32);
        }
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.bytes(&r.observation);
            w.f32s(&r.policy);
            w.u8(r.action);
            w.u32(r.episode);
            w.u32(r.step);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, VERSION)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let num_actions = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut ds = RolloutDataset::new(channels, height, width, num_actions);
        let obs_len = ds.obs_len();
        let record_len = obs_len + 4 * num_actions + 9;
        r.ensure(count, record_len)?;
        ds.records.reserve(count);
        for _ in 0..count {
            let observation = r.take(obs_len)?.to_vec();
            let policy = r.f32s(num_actions)?;
            let action = r.u8()?;
            let episode = r.u32()?;
            let step = r.u32()?;
            ds.records.push(Record { observation, policy, action, episode, step });
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
