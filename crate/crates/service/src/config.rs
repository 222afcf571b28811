use clap::{Parser, ValueEnum};
use ringflow_core::pipeline::{Mode, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// How the tick loop is paced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Clock {
    /// `tick_rate` ticks per second.
    #[default]
    Rate,
    /// Unthrottled.
    Max,
    /// Ticks only on `POST /session/step`.
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub depth: usize,
    pub steps: usize,
    pub mode: Mode,
    pub frames: usize,
    pub channels: usize,
    pub tick_rate: f64,
    pub clock: Clock,
    /// Records kept for `GET /telemetry/recent`.
    pub telemetry_capacity: usize,
    pub hop: usize,
    pub codec_seed: u64,
    /// Prompt streamed at start.
    pub prompt: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 1528,
            depth: 8,
            steps: 8,
            mode: Mode::PerSlot,
            frames: 96,
            channels: 8,
            tick_rate: 20.0,
            clock: Clock::Rate,
            telemetry_capacity: 512,
            hop: 64,
            codec_seed: 11,
            prompt: 1,
        }
    }
}

impl SessionConfig {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            depth: self.depth,
            steps: self.steps,
            mode: self.mode,
            seed: self.seed,
            frames: self.frames,
            channels: self.channels,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.clock == Clock::Rate && !(self.tick_rate > 0.0 && self.tick_rate.is_finite()) {
            return Err(ServiceError::Rejected(format!("tick_rate must be positive, got {}", self.tick_rate)));
        }
        if self.telemetry_capacity == 0 || self.hop == 0 {
            return Err(ServiceError::Rejected("telemetry_capacity and hop must be positive".into()));
        }
        Ok(())
    }

    /// Overlays the keys of a JSON object onto this config.
    pub fn merged(&self, overrides: Option<serde_json::Value>) -> Result<Self, ServiceError> {
        let Some(overrides) = overrides else {
            return Ok(self.clone());
        };
        let serde_json::Value::Object(map) = overrides else {
            return Err(ServiceError::Schema("session config must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        base.as_object_mut().unwrap().extend(map);
        serde_json::from_value(base).map_err(|e| ServiceError::Schema(e.to_string()))
    }
}

/// Command-line flags; every flag also reads a `RINGFLOW_*` variable.
#[derive(Debug, Parser)]
#[command(name = "ringflow-service", version)]
pub struct Args {
    #[arg(long, env = "RINGFLOW_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "RINGFLOW_PORT", default_value_t = 8750)]
    pub port: u16,
    #[arg(long, env = "RINGFLOW_SEED", default_value_t = 1528)]
    pub seed: u64,
    #[arg(long, env = "RINGFLOW_DEPTH", default_value_t = 8)]
    pub depth: usize,
    #[arg(long, env = "RINGFLOW_STEPS", default_value_t = 8)]
    pub steps: usize,
    #[arg(long, env = "RINGFLOW_MODE", default_value = "per-slot")]
    pub mode: Mode,
    #[arg(long, env = "RINGFLOW_FRAMES", default_value_t = 96)]
    pub frames: usize,
    #[arg(long, env = "RINGFLOW_CHANNELS", default_value_t = 8)]
    pub channels: usize,
    #[arg(long, env = "RINGFLOW_TICK_RATE", default_value_t = 20.0)]
    pub tick_rate: f64,
    /// Run the tick loop unthrottled.
    #[arg(long, env = "RINGFLOW_MAX_RATE")]
    pub max_rate: bool,
    /// Advance only on explicit step requests.
    #[arg(long, env = "RINGFLOW_MANUAL_CLOCK", conflicts_with = "max_rate")]
    pub manual_clock: bool,
    #[arg(long, env = "RINGFLOW_HOP", default_value_t = 64)]
    pub hop: usize,
    /// Start a session with these settings at boot.
    #[arg(long, env = "RINGFLOW_AUTOSTART")]
    pub autostart: bool,
}

impl Args {
    pub fn session_defaults(&self) -> SessionConfig {
        SessionConfig {
            seed: self.seed,
            depth: self.depth,
            steps: self.steps,
            mode: self.mode,
            frames: self.frames,
            channels: self.channels,
            tick_rate: self.tick_rate,
            clock: if self.max_rate {
                Clock::Max
            } else if self.manual_clock {
                Clock::Manual
            } else {
                Clock::Rate
            },
            hop: self.hop,
            ..SessionConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_map_to_session_defaults() {
        let args = Args::try_parse_from(["svc", "--depth", "4", "--mode", "global-reset", "--max-rate"]).unwrap();
        let c = args.session_defaults();
        assert_eq!((c.depth, c.mode, c.clock), (4, Mode::GlobalReset, Clock::Max));
        assert!(Args::try_parse_from(["svc", "--max-rate", "--manual-clock"]).is_err());
    }

    #[test]
    fn merge_overrides_and_rejects_unknown_keys() {
        let base = SessionConfig::default();
        let c = base.merged(Some(serde_json::json!({ "depth": 2, "clock": "manual" }))).unwrap();
        assert_eq!((c.depth, c.clock, c.seed), (2, Clock::Manual, base.seed));
        assert!(base.merged(Some(serde_json::json!({ "dpeth": 2 }))).is_err());
        assert!(base.merged(Some(serde_json::json!([1]))).is_err());
    }
}
