//! Tile-array configuration and the shipped presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config field `{0}` must be positive")]
    NotPositive(&'static str),
    #[error("unknown config preset `{0}` (expected arria10 or stratix10)")]
    UnknownPreset(String),
}

/// Shape and clock of the tile array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub name: String,
    pub tiles: usize,
    pub pes_per_tile: usize,
    pub dot_width: usize,
    pub pipeline_depth: u64,
    pub freq_hz: u64,
    /// Input-channel groups accumulated per pass before partials are
    /// spilled. One group per pass mirrors the 128-IFM walkthrough of the
    /// datapath; the value never changes results.
    #[serde(default = "default_groups_per_pass")]
    pub ifm_groups_per_pass: usize,
}

fn default_groups_per_pass() -> usize {
    1
}

impl TileConfig {
    /// 64 tiles × 4 PEs × dot-64 at 200 MHz.
    pub fn arria10() -> Self {
        Self {
            name: "arria10".into(),
            tiles: 64,
            pes_per_tile: 4,
            dot_width: 64,
            pipeline_depth: 20,
            freq_hz: 200_000_000,
            ifm_groups_per_pass: 1,
        }
    }

    /// Projection preset: 256 tiles at 580 MHz. Chosen so the peak lands on
    /// the 76 TOP/s headline for the largest Stratix-10 part; it is not a
    /// published configuration.
    pub fn stratix10() -> Self {
        Self { name: "stratix10".into(), tiles: 256, freq_hz: 580_000_000, ..Self::arria10() }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "arria10" | "a10" => Ok(Self::arria10()),
            "stratix10" | "s10" => Ok(Self::stratix10()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn with_freq_hz(mut self, freq_hz: u64) -> Self {
        self.freq_hz = freq_hz;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks = [
            ("tiles", self.tiles as u64),
            ("pes_per_tile", self.pes_per_tile as u64),
            ("dot_width", self.dot_width as u64),
            ("pipeline_depth", self.pipeline_depth),
            ("freq_hz", self.freq_hz),
            ("ifm_groups_per_pass", self.ifm_groups_per_pass as u64),
        ];
        for (field, v) in checks {
            if v == 0 {
                return Err(ConfigError::NotPositive(field));
            }
        }
        Ok(())
    }

    pub fn macs_per_cycle(&self) -> u64 {
        (self.tiles * self.pes_per_tile * self.dot_width) as u64
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        Self::arria10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(TileConfig::arria10().macs_per_cycle(), 16384);
        assert_eq!(TileConfig::stratix10().macs_per_cycle(), 65536);
        assert!(TileConfig::preset("virtex").is_err());
        let mut bad = TileConfig::arria10();
        bad.pes_per_tile = 0;
        assert_eq!(bad.validate(), Err(ConfigError::NotPositive("pes_per_tile")));
    }

    #[test]
    fn json_defaults_pass_size() {
        let cfg: TileConfig = serde_json::from_str(
            r#"{"name":"x","tiles":8,"pes_per_tile":2,"dot_width":64,"pipeline_depth":20,"freq_hz":100000000}"#,
        )
        .unwrap();
        assert_eq!(cfg.ifm_groups_per_pass, 1);
    }
}
