//! Telemetry records and operator commands as newline-terminated JSON lines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::FirmwareCounters;
use crate::kinematics::{Pose2D, Twist2D};
use crate::link::DecoderStats;
use crate::mapping::GridSnapshot;
use crate::planning::MppiDiagnostics;
use crate::plant::Detection;

pub const SCHEMA_VERSION: u32 = 1;

/// Planner summary carried in every record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSummary {
    pub mppi: MppiDiagnostics,
    pub replans: u32,
    pub path_id: u32,
    /// Active global path, world metres.
    pub path: Vec<[f64; 2]>,
    pub goal_index: Option<usize>,
}

/// Firmware and link counters, present only in answer to a DIAG command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub firmware_frames: u64,
    pub firmware_malformed: u64,
    pub failsafe_events: u64,
    pub estop_events: u64,
    pub battery_faults: u64,
    pub uplink_crc_errors: u64,
    pub uplink_seq_gaps: u64,
    pub downlink_crc_errors: u64,
    pub downlink_seq_gaps: u64,
    pub ekf_skipped_updates: u64,
}

impl Diagnostics {
    pub fn new(fw: &FirmwareCounters, up: &DecoderStats, down: &DecoderStats, ekf_skipped: u64) -> Self {
        Self {
            firmware_frames: fw.frames,
            firmware_malformed: fw.malformed,
            failsafe_events: fw.failsafe_events,
            estop_events: fw.estop_events,
            battery_faults: fw.battery_faults,
            uplink_crc_errors: up.crc_errors,
            uplink_seq_gaps: up.seq_gaps,
            downlink_crc_errors: down.crc_errors,
            downlink_seq_gaps: down.seq_gaps,
            ekf_skipped_updates: ekf_skipped,
        }
    }
}

/// One telemetry sample. Field order is the wire key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub v: u32,
    pub t: f64,
    pub pose_est: Pose2D,
    pub pose_true: Pose2D,
    pub twist: Twist2D,
    pub battery_mv: u32,
    /// Firmware mode code as last reported in a Status frame.
    pub mode: u8,
    pub lock: String,
    pub goal: Option<[f64; 2]>,
    pub planner: PlannerSummary,
    pub detections: Vec<Detection>,
    /// Id of the newest full map snapshot.
    pub map_seq: u32,
    /// Full snapshot, included every few seconds.
    pub map_delta: Option<GridSnapshot>,
    pub diag: Option<Diagnostics>,
}

impl TelemetryRecord {
    pub fn minimal(t: f64) -> Self {
        Self {
            v: SCHEMA_VERSION,
            t,
            pose_est: Pose2D::default(),
            pose_true: Pose2D::default(),
            twist: Twist2D::ZERO,
            battery_mv: 0,
            mode: 0,
            lock: "Locked".into(),
            goal: None,
            planner: PlannerSummary::default(),
            detections: Vec::new(),
            map_seq: 0,
            map_delta: None,
            diag: None,
        }
    }
}

pub fn encode_telemetry(r: &TelemetryRecord) -> String {
    let mut line = serde_json::to_string(r).expect("telemetry records always serialize");
    line.push('\n');
    line
}

pub fn parse_telemetry(line: &str) -> Result<TelemetryRecord, serde_json::Error> {
    serde_json::from_str(line.trim_end())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("telemetry time went backwards: {prev} then {next}")]
    NonMonotonic { prev: f64, next: f64 },
}

/// Encodes records and enforces that `t` never decreases.
#[derive(Debug, Clone, Default)]
pub struct Publisher {
    last_t: Option<f64>,
    pub published: u64,
}

impl Publisher {
    pub fn publish(&mut self, r: &TelemetryRecord) -> Result<String, TelemetryError> {
        if let Some(prev) = self.last_t {
            if r.t < prev {
                return Err(TelemetryError::NonMonotonic { prev, next: r.t });
            }
        }
        self.last_t = Some(r.t);
        self.published += 1;
        Ok(encode_telemetry(r))
    }
}

/// Operator command kinds as they appear on the wire (`{"cmd":"ESTOP"}`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "UPPERCASE", deny_unknown_fields)]
pub enum CommandKind {
    Estop,
    Resume,
    Goal { x: f64, y: f64 },
    Lock,
    Unlock,
    /// Requests a one-off diagnostics block in the next record.
    Diag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCommand {
    pub kind: CommandKind,
    /// Wall-clock receipt time, s since the Unix epoch.
    pub issued_at: f64,
    pub client_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("command rejected: {reason}")]
pub struct CommandRejected {
    pub reason: String,
}

pub fn parse_command(line: &str) -> Result<CommandKind, CommandRejected> {
    let reject = |reason: String| CommandRejected { reason };
    let value: serde_json::Value = serde_json::from_str(line.trim()).map_err(|e| reject(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| reject("expected a JSON object".into()))?;
    // serde ignores `deny_unknown_fields` on unit variants of tagged enums
    let allowed: &[&str] = match obj.get("cmd").and_then(|c| c.as_str()) {
        Some("GOAL") => &["cmd", "x", "y"],
        Some(_) => &["cmd"],
        None => return Err(reject("missing string field `cmd`".into())),
    };
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(reject(format!("unknown field `{k}`")));
    }
    let kind: CommandKind = serde_json::from_value(value).map_err(|e| reject(e.to_string()))?;
    if let CommandKind::Goal { x, y } = kind {
        if !(x.is_finite() && y.is_finite()) {
            return Err(CommandRejected {
                reason: "goal coordinates must be finite".into(),
            });
        }
    }
    Ok(kind)
}

/// Reply sent to a client whose command was rejected.
pub fn rejection_line(reason: &str) -> String {
    let mut line = serde_json::json!({ "v": SCHEMA_VERSION, "rejected": reason }).to_string();
    line.push('\n');
    line
}

/// A command applied at a given simulation time; one per line in a command
/// log, e.g. `{"t":5.0,"cmd":"ESTOP"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub t: f64,
    #[serde(flatten)]
    pub kind: CommandKind,
}

pub fn parse_command_log(text: &str) -> Result<Vec<TimedCommand>, String> {
    let mut out: Vec<TimedCommand> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: TimedCommand = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        if out.last().is_some_and(|p| c.t < p.t) {
            return Err(format!("line {}: command times must not decrease", n + 1));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn encode_command_log(cmds: &[TimedCommand]) -> String {
    cmds.iter()
        .map(|c| serde_json::to_string(c).expect("commands serialize") + "\n")
        .collect()
}
