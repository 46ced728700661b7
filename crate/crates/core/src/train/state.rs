//! Resumable training state and its `CTFS` file encoding.
//!
//! ```text
//! "CTFS"  version:u16
//! config_len:u32 config:utf8 (flat key = value text)
//! step:u64 epoch:u32 micro_batch:u32 epoch_loss_sum:f64 epoch_loss_steps:u32
//! best_flag:u8 [best_step:u64 best_loss:f64]
//! adam_t:u64
//! embed hidden packet flow head_hidden classes gnn_layers : u32 each
//! params, then Adam first moments, then second moments: f64 per value
//! crc32:u32
//! ```
//!
//! All random streams are derived from the seed and the position in
//! training, so the counters above are the complete random state.

use std::path::Path;

use super::optim::Adam;
use super::TrainConfig;
use crate::format::{FormatError, Reader, Writer};
use crate::model::{ModelDims, ModelParams};

pub const STATE_MAGIC: &[u8; 4] = b"CTFS";
pub const STATE_VERSION: u16 = 1;

/// Lowest mean training loss seen at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestSnapshot {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: u32,
    /// Next micro-batch within the epoch.
    pub micro_batch: u32,
    /// Sum and count of step losses so far in the current epoch.
    pub epoch_loss_sum: f64,
    pub epoch_loss_steps: u32,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    pub fn fresh(config: TrainConfig, params: ModelParams) -> Self {
        let adam = Adam::new(&params);
        Self {
            config,
            params,
            adam,
            step: 0,
            epoch: 0,
            micro_batch: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_steps: 0,
            best: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(STATE_MAGIC, STATE_VERSION);
        let text = self.config.to_text();
        w.u32(text.len() as u32);
        w.bytes(text.as_bytes());
        w.u64(self.step);
        w.u32(self.epoch);
        w.u32(self.micro_batch);
        w.f64(self.epoch_loss_sum);
        w.u32(self.epoch_loss_steps);
        match self.best {
            Some(b) => {
                w.u8(1);
                w.u64(b.step);
                w.f64(b.loss);
            }
            None => w.u8(0),
        }
        w.u64(self.adam.t);
        let d = self.params.dims();
        for v in [d.embed, d.hidden, d.packet, d.flow, d.head_hidden, d.classes, d.gnn_layers] {
            w.u32(v as u32);
        }
        for group in [self.params.tensors(), &self.adam.m[..], &self.adam.v[..]] {
            for t in group {
                for &v in t.iter() {
                    w.f64(v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(data, STATE_MAGIC, "training state", STATE_VERSION)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| FormatError::Invalid("configuration is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text).map_err(FormatError::Invalid)?;
        let step = r.u64()?;
        let epoch = r.u32()?;
        let micro_batch = r.u32()?;
        let epoch_loss_sum = r.f64()?;
        let epoch_loss_steps = r.u32()?;
        let best = match r.u8()? {
            0 => None,
            1 => Some(BestSnapshot {
                step: r.u64()?,
                loss: r.f64()?,
            }),
            other => return Err(FormatError::Invalid(format!("best marker {other}"))),
        };
        let t = r.u64()?;
        let mut field = || r.u32().map(|v| v as usize);
        let dims = ModelDims {
            embed: field()?,
            hidden: field()?,
            packet: field()?,
            flow: field()?,
            head_hidden: field()?,
            classes: field()?,
            gnn_layers: field()?,
        };
        let mut params = ModelParams::zeros(dims).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let mut adam = Adam::new(&params);
        adam.t = t;
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        for group in [&mut adam.m, &mut adam.v] {
            for t in group.iter_mut() {
                for v in t.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        r.finish()?;
        Ok(Self {
            config,
            params,
            adam,
            step,
            epoch,
            micro_batch,
            epoch_loss_sum,
            epoch_loss_steps,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let data = std::fs::read(path).map_err(|source| crate::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(&data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrainState {
        let cfg = TrainConfig {
            seed: 42,
            ..Default::default()
        };
        let params = ModelParams::init(ModelDims::uniform(3, 2), 1).unwrap();
        let mut s = TrainState::fresh(cfg, params);
        s.step = 7;
        s.epoch = 1;
        s.micro_batch = 2;
        s.best = Some(BestSnapshot { step: 5, loss: 0.25 });
        s.adam.t = 7;
        s.adam.m[0].fill(0.5);
        s.adam.v[3].fill(1e-9);
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample();
        assert_eq!(TrainState::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        assert_eq!(
            TrainState::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Checksum)
        );
    }
}
