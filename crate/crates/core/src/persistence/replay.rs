use std::path::Path;

use super::dataset::{dequantize, quantize};
use super::{atomic_write, Reader, Writer};
use crate::env::{stack, Frame, Observation, STACK};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFRP";
const VERSION: u32 = 1;

/// One decision step of a recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    /// Newest frame of the observation at this step, quantized, height × width × 3.
    pub frame: Vec<u8>,
    pub action: u8,
    pub reward: f32,
    pub policy: Vec<f32>,
    pub entropy: f32,
}

/// A recorded episode. Observation stacks are rebuilt from consecutive
/// frames, with the first frame repeated before the episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub id: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_actions: usize,
    pub score: f32,
    pub steps: Vec<ReplayStep>,
}

impl Replay {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps.len() {
            return Err(Error::InvalidArgument(format!("time step {t} outside replay of length {}", self.len())));
        }
        Ok(())
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        self.check_t(t)?;
        let pixels = self.steps[t].frame.iter().map(|&v| dequantize(v)).collect();
        Ok(Frame { height: self.height, width: self.width, pixels })
    }

    /// The stacked observation the agent saw at step `t`.
    pub fn observation(&self, t: usize) -> Result<Observation> {
        self.check_t(t)?;
        let frames = (0..STACK).map(|k| self.frame((t + k + 1).saturating_sub(STACK))).collect::<Result<Vec<_>>>()?;
        stack(&frames)
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy as f64).collect()
    }

    pub fn push_frame(frame: &Frame) -> Vec<u8> {
        frame.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(self.num_actions as u32);
        w.u64(self.seed);
        w.f32s(&[self.score]);
        w.u32(self.id.len() as u32);
        w.bytes(self.id.as_bytes());
        w.u32(self.steps.len() as u32);
        for s in &self.steps {
            w.bytes(&s.frame);
            w.u8(s.action);
            w.f32s(&[s.reward]);
            w.f32s(&s.policy);
            w.f32s(&[s.entropy]);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, VERSION)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let num_actions = r.u32()? as usize;
        let seed = r.u64()?;
        let score = r.f32s(1)?[0];
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| Error::Format("replay id".into()))?;
        let n = r.u32()? as usize;
        let frame_len = height * width * 3;
        r.ensure(n, frame_len + 9 + 4 * num_actions)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let frame = r.take(frame_len)?.to_vec();
            let action = r.u8()?;
            let reward = r.f32s(1)?[0];
            let policy = r.f32s(num_actions)?;
            let entropy = r.f32s(1)?[0];
            steps.push(ReplayStep { frame, action, reward, policy, entropy });
        }
        r.finish()?;
        Ok(Replay { id, seed, height, width, num_actions, score, steps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{env_reset, env_step, Action};

    #[test]
    fn observations_are_rebuilt_from_frames() {
        let (mut state, mut obs) = env_reset(11);
        let mut steps = Vec::new();
        let mut seen = Vec::new();
        for _ in 0..6 {
            seen.push(obs.clone());
            steps.push(ReplayStep {
                frame: Replay::push_frame(&obs.latest_frame()),
                action: 1,
                reward: 0.0,
                policy: vec![1.0 / 6.0; 6],
                entropy: 6f32.ln(),
            });
            let t = env_step(&state, &obs, Action::Fire, 4).unwrap();
            state = t.state;
            obs = t.observation;
        }
        let replay = Replay { id: "r".into(), seed: 11, height: 64, width: 64, num_actions: 6, score: 0.0, steps };
        let back = Replay::from_bytes(&replay.to_bytes()).unwrap();
        assert_eq!(back, replay);
        for (t, o) in seen.iter().enumerate() {
            let rebuilt = back.observation(t).unwrap();
            for (a, b) in rebuilt.data.iter().zip(&o.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        assert!(back.observation(6).is_err());
    }
}
