//! Scenario files (TOML). Every section is optional except `seed`,
//! `duration`, `world.bounds` and `goals`; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::NoiseConfig;
use crate::firmware::FirmwareConfig;
use crate::kinematics::{Pose2D, RobotParams};
use crate::link::ChannelModel;
use crate::mapping::GridParams;
use crate::planning::{AstarParams, MppiParams, TrackerParams};
use crate::plant::{LidarParams, PlantConfig, World};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Task rates, Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub control_hz: f64,
    pub autonomy_hz: f64,
    pub telemetry_hz: f64,
    pub gps_hz: f64,
    /// Full map snapshots in telemetry, Hz.
    pub map_snapshot_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            control_hz: 100.0,
            autonomy_hz: 10.0,
            telemetry_hz: 10.0,
            gps_hz: 2.0,
            map_snapshot_hz: 0.5,
        }
    }
}

/// Link faults, applied independently to both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    pub link: ChannelModel,
    /// Forced battery voltage over time windows.
    pub battery: Vec<BatteryOverride>,
}

impl Default for Faults {
    fn default() -> Self {
        Self {
            link: ChannelModel {
                latency: 0.002,
                ..ChannelModel::default()
            },
            battery: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryOverride {
    pub start: f64,
    pub end: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub astar: AstarParams,
    pub mppi: MppiParams,
    pub tracker: TrackerParams,
    /// Replan when the estimate strays farther than this from the path, m.
    pub replan_distance: f64,
    /// A goal is reached when the estimate is this close, m.
    pub goal_tolerance: f64,
    /// Length of path handed to the local planner, m.
    pub lookahead: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            astar: AstarParams::default(),
            mppi: MppiParams::default(),
            tracker: TrackerParams::default(),
            replan_distance: 1.0,
            goal_tolerance: 0.15,
            lookahead: 3.0,
        }
    }
}

/// Open-loop drive pattern used instead of the planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Script {
    /// Two full circles of opposite turn direction, repeated.
    FigureEight { v: f64, omega: f64 },
    Constant { v: f64, omega: f64 },
}

impl Script {
    pub fn twist_at(&self, t: f64) -> crate::kinematics::Twist2D {
        use crate::kinematics::Twist2D;
        match *self {
            Script::Constant { v, omega } => Twist2D::new(v, omega),
            Script::FigureEight { v, omega } => {
                let lap = std::f64::consts::TAU / omega.abs();
                let phase = (t / lap).floor() as i64;
                Twist2D::new(v, if phase % 2 == 0 { omega } else { -omega })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_sim_dt")]
    pub sim_dt: f64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub robot: RobotParams,
    #[serde(default)]
    pub start: Pose2D,
    pub world: World,
    /// Visited in order.
    pub goals: Vec<[f64; 2]>,
    #[serde(default)]
    pub lidar: LidarParams,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default)]
    pub firmware: FirmwareConfig,
    #[serde(default)]
    pub map: GridParams,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub script: Option<Script>,
}

fn default_sim_dt() -> f64 {
    0.005
}

/// Number of `sim_dt` steps in one period of `hz`, if it is a whole number.
pub fn steps_per_period(sim_dt: f64, hz: f64) -> Option<u64> {
    let ratio = 1.0 / (hz * sim_dt);
    let n = ratio.round();
    ((ratio - n).abs() <= 1e-9 * n.max(1.0) && n >= 1.0).then_some(n as u64)
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let mut s: Scenario = toml::from_str(text)?;
        // the firmware's notion of its own period follows the scheduler
        s.firmware.control_period = 1.0 / s.rates.control_hz;
        s.firmware.ticks_per_rev = s.robot.ticks_per_wheel_rev;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be > 0".into());
        }
        if !(self.sim_dt > 0.0) {
            return bad("sim_dt must be > 0".into());
        }
        let r = self.rates;
        for (name, hz) in [
            ("control_hz", r.control_hz),
            ("autonomy_hz", r.autonomy_hz),
            ("telemetry_hz", r.telemetry_hz),
            ("gps_hz", r.gps_hz),
            ("map_snapshot_hz", r.map_snapshot_hz),
        ] {
            if !(hz > 0.0 && hz.is_finite()) {
                return bad(format!("rates.{name} must be > 0"));
            }
            if steps_per_period(self.sim_dt, hz).is_none() {
                return bad(format!(
                    "rates.{name} = {hz} Hz: period {} s is not an integer multiple of sim_dt = {} s",
                    1.0 / hz,
                    self.sim_dt
                ));
            }
        }
        self.robot.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let checks = [
            self.world.validate(),
            self.lidar.validate(),
            self.noise.validate(),
            self.faults.link.validate().map_err(|e| format!("faults.link: {e}")),
            self.firmware.validate(),
            self.map.validate(),
            self.planner.mppi.validate(),
        ];
        for c in checks {
            c.map_err(ScenarioError::Invalid)?;
        }
        if self.goals.is_empty() && self.script.is_none() {
            return bad("at least one goal is required".into());
        }
        for (i, g) in self.goals.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) || !self.world.bounds.contains(g[0], g[1]) {
                return bad(format!("goals[{i}] must lie inside world.bounds"));
            }
        }
        if !self.world.bounds.contains(self.start.x, self.start.y) {
            return bad("start must lie inside world.bounds".into());
        }
        for (i, b) in self.faults.battery.iter().enumerate() {
            if !(b.end >= b.start) || !(b.voltage >= 0.0) {
                return bad(format!("faults.battery[{i}] needs start <= end and voltage >= 0"));
            }
        }
        if let Some(Script::FigureEight { omega, .. }) = self.script {
            if omega == 0.0 {
                return bad("script.omega must be nonzero for a figure-eight".into());
            }
        }
        Ok(())
    }

    pub fn battery_override(&self, t: f64) -> Option<f64> {
        self.faults.battery.iter().find(|b| t >= b.start && t <= b.end).map(|b| b.voltage)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_toml_str(&text)
}
