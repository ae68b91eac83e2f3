//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, TrainConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::partial_view::TrajectoryConfig;
use crate::synth::DataConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trajectory: TrajectoryConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Parses and validates; missing keys take their defaults, unknown
    /// keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical text: every key, sections in a fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.encoder.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.probe.validate()?;
        if self.data.frames > self.encoder.max_frames {
            return Err(Error::config(format!(
                "data.frames {} exceeds encoder.max_frames {}",
                self.data.frames, self.encoder.max_frames
            )));
        }
        Ok(())
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
