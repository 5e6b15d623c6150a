//! Emulation of the low-level motor controller firmware.
//!
//! The firmware is a deterministic state machine with two entry points:
//! [`FirmwareState::on_frame`] (UART receive) and
//! [`FirmwareState::control_tick`] (the fixed-rate motor control task). The
//! scheduler calls them in timestamp order; there is no preemption.
//!
//! All state is `Copy` and fixed-size, so nothing can grow after
//! initialisation.

use serde::{Deserialize, Serialize};

use crate::kinematics::WheelSpeeds;
use crate::link::{Frame, FrameBody, Sequencer, StatusPayload};

/// Default UART silence after which the motors are stopped, s.
pub const WATCHDOG_TIMEOUT: f64 = 0.200;

/// Slack for comparing simulation timestamps built from integer step counts.
const TIME_EPS: f64 = 1e-9;

/// Longest encoder window supported by the speed estimator, in ticks.
pub const MAX_SPEED_WINDOW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub out_min: f64,
    pub out_max: f64,
    pub integral_min: f64,
    pub integral_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.04,
            ki: 0.3,
            kd: 0.0,
            out_min: -1.0,
            out_max: 1.0,
            integral_min: -1.0,
            integral_max: 1.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.out_min < self.out_max) {
            return Err("pid out_min must be < out_max".into());
        }
        if self.integral_min < self.out_min || self.integral_max > self.out_max || self.integral_min > self.integral_max {
            return Err("pid integral bounds must lie within the output bounds".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

/// One PID update. Integral is clamped after accumulation; the derivative
/// acts on the error and is zero on the first call.
pub fn pid_step(g: &PidGains, s: PidState, setpoint: f64, measured: f64, dt: f64) -> (f64, PidState) {
    let error = setpoint - measured;
    let integral = (s.integral + g.ki * error * dt).clamp(g.integral_min, g.integral_max);
    let derivative = if s.initialized { g.kd * (error - s.prev_error) / dt } else { 0.0 };
    let out = (g.kp * error + integral + derivative).clamp(g.out_min, g.out_max);
    (
        out,
        PidState {
            integral,
            prev_error: error,
            initialized: true,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Init,
    Operational,
    Failsafe,
    EStopped,
    BatteryFault,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Init => 0,
            Mode::Operational => 1,
            Mode::Failsafe => 2,
            Mode::EStopped => 3,
            Mode::BatteryFault => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Mode> {
        Some(match code {
            0 => Mode::Init,
            1 => Mode::Operational,
            2 => Mode::Failsafe,
            3 => Mode::EStopped,
            4 => Mode::BatteryFault,
            _ => return None,
        })
    }

    pub fn drives_motors(self) -> bool {
        self == Mode::Operational
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LockState {
    Locked,
    Unlocked,
}

impl LockState {
    pub fn code(self) -> u8 {
        match self {
            LockState::Locked => 0,
            LockState::Unlocked => 1,
        }
    }

    pub fn from_code(code: u8) -> LockState {
        if code == 1 {
            LockState::Unlocked
        } else {
            LockState::Locked
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LockState::Locked => "Locked",
            LockState::Unlocked => "Unlocked",
        }
    }
}

/// Watchdog decision: failsafe strictly after `timeout` seconds of silence.
pub fn watchdog_mode(last_cmd_rx: f64, now: f64, timeout: f64) -> Mode {
    if now - last_cmd_rx > timeout + TIME_EPS {
        Mode::Failsafe
    } else {
        Mode::Operational
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirmwareConfig {
    /// Control task period, s.
    pub control_period: f64,
    pub watchdog_timeout: f64,
    /// Emit a Status frame every this many control ticks.
    pub status_every: u32,
    /// Battery voltage below which the firmware latches a fault, V.
    pub v_fault: f64,
    /// Encoder window for wheel-speed estimation, control ticks.
    pub speed_window: usize,
    pub ticks_per_rev: u32,
    pub gains: PidGains,
}

impl Default for FirmwareConfig {
    fn default() -> Self {
        Self {
            control_period: 0.01,
            watchdog_timeout: WATCHDOG_TIMEOUT,
            status_every: 5,
            v_fault: 6.4,
            speed_window: 5,
            ticks_per_rev: 374,
            gains: PidGains::default(),
        }
    }
}

impl FirmwareConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.control_period > 0.0) || !(self.watchdog_timeout > 0.0) {
            return Err("firmware periods must be positive".into());
        }
        if self.status_every == 0 {
            return Err("firmware.status_every must be >= 1".into());
        }
        if self.speed_window == 0 || self.speed_window > MAX_SPEED_WINDOW {
            return Err(format!("firmware.speed_window must be in 1..={MAX_SPEED_WINDOW}"));
        }
        if self.ticks_per_rev == 0 {
            return Err("firmware.ticks_per_rev must be positive".into());
        }
        self.gains.validate()
    }
}

/// Cumulative encoder counts sampled at a control tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncoderCounts {
    pub left: i64,
    pub right: i64,
}

/// Fixed-capacity ring of recent encoder samples.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SpeedEstimator {
    samples: [EncoderCounts; MAX_SPEED_WINDOW + 1],
    head: usize,
    len: usize,
}

impl SpeedEstimator {
    fn new() -> Self {
        Self {
            samples: [EncoderCounts::default(); MAX_SPEED_WINDOW + 1],
            head: 0,
            len: 0,
        }
    }

    fn push(&mut self, c: EncoderCounts, window: usize, period: f64, tick_angle: f64) -> WheelSpeeds {
        let cap = window + 1;
        self.head = (self.head + 1) % cap;
        self.samples[self.head] = c;
        self.len = (self.len + 1).min(cap);
        if self.len < 2 {
            return WheelSpeeds::ZERO;
        }
        let oldest = self.samples[(self.head + cap + 1 - self.len) % cap];
        let span = (self.len - 1) as f64 * period;
        WheelSpeeds::new(
            (c.left - oldest.left) as f64 * tick_angle / span,
            (c.right - oldest.right) as f64 * tick_angle / span,
        )
    }
}

/// Counters the firmware keeps for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FirmwareCounters {
    pub frames: u64,
    pub malformed: u64,
    pub ignored_status: u64,
    pub failsafe_events: u64,
    pub estop_events: u64,
    pub battery_faults: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirmwareState {
    pub config: FirmwareConfig,
    pub mode: Mode,
    /// Receive time of the last valid CmdVel, s; `None` before the first.
    pub last_cmd_rx: Option<f64>,
    pub setpoints: WheelSpeeds,
    pub pid_left: PidState,
    pub pid_right: PidState,
    pub lock: LockState,
    pub relay_closed: bool,
    pub tick_count: u64,
    /// Duty currently applied to the left and right drivers.
    pub pwm: [f64; 2],
    /// Last wheel-speed estimate from the encoders, rad/s.
    pub measured: WheelSpeeds,
    pub counters: FirmwareCounters,
    status_seq: Sequencer,
    speed: SpeedEstimator,
}

/// Result of one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub pwm_left: f64,
    pub pwm_right: f64,
    pub status: Option<Frame>,
}

impl FirmwareState {
    pub fn new(config: FirmwareConfig) -> Self {
        Self {
            config,
            mode: Mode::Init,
            last_cmd_rx: None,
            setpoints: WheelSpeeds::ZERO,
            pid_left: PidState::default(),
            pid_right: PidState::default(),
            lock: LockState::Locked,
            relay_closed: true,
            tick_count: 0,
            pwm: [0.0; 2],
            measured: WheelSpeeds::ZERO,
            counters: FirmwareCounters::default(),
            status_seq: Sequencer::default(),
            speed: SpeedEstimator::new(),
        }
    }

    /// Handles a CRC-validated frame received at `now`.
    pub fn on_frame(&mut self, f: &Frame, now: f64) {
        self.counters.frames += 1;
        let body = match f.body() {
            Ok(b) => b,
            Err(_) => {
                self.counters.malformed += 1;
                return;
            }
        };
        match body {
            FrameBody::CmdVel(p) => {
                self.setpoints = p.wheels();
                self.last_cmd_rx = Some(now);
                if matches!(self.mode, Mode::Init | Mode::Failsafe) {
                    self.mode = Mode::Operational;
                }
            }
            FrameBody::EStop => {
                if self.mode != Mode::EStopped {
                    self.counters.estop_events += 1;
                }
                self.mode = Mode::EStopped;
                self.relay_closed = false;
                self.stop_motors();
            }
            FrameBody::Resume => {
                if matches!(self.mode, Mode::EStopped | Mode::BatteryFault) {
                    self.mode = Mode::Operational;
                    self.relay_closed = true;
                }
            }
            FrameBody::Lock => self.lock = LockState::Locked,
            FrameBody::Unlock => self.lock = LockState::Unlocked,
            FrameBody::Status(_) => self.counters.ignored_status += 1,
        }
    }

    /// The fixed-rate motor control task.
    pub fn control_tick(&mut self, counts: EncoderCounts, battery_v: f64, now: f64) -> TickOutput {
        let cfg = self.config;
        let tick_angle = std::f64::consts::TAU / cfg.ticks_per_rev as f64;
        self.measured = self.speed.push(counts, cfg.speed_window, cfg.control_period, tick_angle);

        self.mode = match self.mode {
            Mode::EStopped => Mode::EStopped,
            Mode::BatteryFault => Mode::BatteryFault,
            _ if battery_v < cfg.v_fault => {
                self.counters.battery_faults += 1;
                Mode::BatteryFault
            }
            Mode::Init => Mode::Init,
            Mode::Operational | Mode::Failsafe => {
                let last = self.last_cmd_rx.unwrap_or(f64::NEG_INFINITY);
                let next = watchdog_mode(last, now, cfg.watchdog_timeout);
                if next == Mode::Failsafe && self.mode != Mode::Failsafe {
                    self.counters.failsafe_events += 1;
                }
                next
            }
        };

        if self.mode.drives_motors() {
            let dt = cfg.control_period;
            let (l, sl) = pid_step(&cfg.gains, self.pid_left, self.setpoints.left, self.measured.left, dt);
            let (r, sr) = pid_step(&cfg.gains, self.pid_right, self.setpoints.right, self.measured.right, dt);
            self.pid_left = sl;
            self.pid_right = sr;
            self.pwm = [l, r];
        } else {
            self.stop_motors();
        }

        let status = (self.tick_count % cfg.status_every as u64 == 0).then(|| {
            let seq = self.status_seq.next();
            Frame::new(
                seq,
                FrameBody::Status(StatusPayload {
                    mode: self.mode.code(),
                    lock: self.lock.code(),
                    battery_mv: (battery_v * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16,
                    left_ticks: counts.left as i32,
                    right_ticks: counts.right as i32,
                }),
            )
        });
        self.tick_count += 1;

        TickOutput {
            pwm_left: self.pwm[0],
            pwm_right: self.pwm[1],
            status,
        }
    }

    fn stop_motors(&mut self) {
        self.pwm = [0.0; 2];
        self.pid_left = PidState::default();
        self.pid_right = PidState::default();
    }
}

/// Functional form of [`FirmwareState::on_frame`].
pub fn on_frame(fw: FirmwareState, f: &Frame, now: f64) -> FirmwareState {
    let mut next = fw;
    next.on_frame(f, now);
    next
}

/// Functional form of [`FirmwareState::control_tick`].
pub fn control_tick(fw: FirmwareState, counts: EncoderCounts, battery_v: f64, now: f64) -> (TickOutput, FirmwareState) {
    let mut next = fw;
    let out = next.control_tick(counts, battery_v, now);
    (out, next)
}
