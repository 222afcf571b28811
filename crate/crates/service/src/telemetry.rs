use ringflow_core::pipeline::{CompletionRecord, Mode, SlotView};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Envelope for every message on the telemetry channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: Telemetry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Telemetry {
    Tick(TickTelemetry),
    /// Sent when no tick record was published for a heartbeat interval.
    Heartbeat {
        session: Option<u64>,
        running: bool,
        last_tick: Option<u64>,
    },
    /// This subscriber fell behind and lost `count` records, oldest first.
    Dropped { count: u64 },
    Stopped {
        session: u64,
        last_tick: Option<u64>,
        error: Option<String>,
    },
}

impl TelemetryMessage {
    pub fn new(body: Telemetry) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            Telemetry::Tick(_) => "tick",
            Telemetry::Heartbeat { .. } => "heartbeat",
            Telemetry::Dropped { .. } => "dropped",
            Telemetry::Stopped { .. } => "stopped",
        }
    }

    pub fn tick(&self) -> Option<&TickTelemetry> {
        match &self.body {
            Telemetry::Tick(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickTelemetry {
    pub session: u64,
    pub tick: u64,
    pub mode: Mode,
    /// Denoise in effect for this tick's admissions.
    pub denoise: f64,
    pub queue_depth: usize,
    pub distinct_schedules: usize,
    pub registry_digest: String,
    /// Controls applied at this tick's boundary.
    pub controls: Vec<AppliedControl>,
    pub completions: Vec<CompletionSummary>,
    /// Slot occupancy after the tick.
    pub slots: Vec<Option<SlotView>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedControl {
    pub control: String,
    pub visible_tick: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub slot: usize,
    pub submission_id: u64,
    pub admitted_tick: u64,
    pub schedule_id: String,
    pub denoise: f64,
    pub hybrid: bool,
    pub decode_skipped: bool,
    pub rms_vs_reference: Option<f64>,
    pub since_change: Option<u64>,
}

impl From<&CompletionRecord> for CompletionSummary {
    fn from(c: &CompletionRecord) -> Self {
        Self {
            slot: c.slot,
            submission_id: c.submission_id,
            admitted_tick: c.admitted_tick,
            schedule_id: c.schedule_id.to_string(),
            denoise: c.denoise,
            hybrid: c.hybrid,
            decode_skipped: c.decode_skipped,
            rms_vs_reference: c.rms_vs_reference,
            since_change: c.since_change,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_is_flat_and_tagged() {
        let m = TelemetryMessage::new(Telemetry::Dropped { count: 3 });
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v, serde_json::json!({ "schema_version": 1, "kind": "dropped", "count": 3 }));
        let back: TelemetryMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
