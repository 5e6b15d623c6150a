//! Seeded 2D plant: motors, encoders, sensors, battery and moving agents.
//!
//! The plant is one value advanced by [`Plant::step`]. Every sensor has its
//! own random stream (see [`crate::rng`]), so a given seed and command
//! stream always reproduce the same trajectory bit-for-bit.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kinematics::{integrate_pose, normalize_angle, Pose2D, RobotParams, Twist2D, WheelSpeeds};
use crate::rng::{self, gaussian, Stream};

/// Axis-aligned rectangle in world coordinates, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min: [min_x, min_y],
            max: [max_x, max_y],
        }
    }

    pub fn centered(cx: f64, cy: f64, size_x: f64, size_y: f64) -> Self {
        Self::new(cx - size_x / 2.0, cy - size_y / 2.0, cx + size_x / 2.0, cy + size_y / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min[0] >= self.min[0]
            && other.min[1] >= self.min[1]
            && other.max[0] <= self.max[0]
            && other.max[1] <= self.max[1]
    }

    pub fn is_valid(&self) -> bool {
        self.min.iter().chain(self.max.iter()).all(|v| v.is_finite())
            && self.max[0] > self.min[0]
            && self.max[1] > self.min[1]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.min[0], self.min[1]],
            [self.max[0], self.min[1]],
            [self.max[0], self.max[1]],
            [self.min[0], self.max[1]],
        ]
    }

    /// Distance along the ray `origin + t·dir` (unit `dir`) to the first
    /// boundary crossing, or 0 when the origin is inside.
    pub fn ray_hit(&self, ox: f64, oy: f64, dx: f64, dy: f64) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for (o, d, lo, hi) in [(ox, dx, self.min[0], self.max[0]), (oy, dy, self.min[1], self.max[1])] {
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let t1 = (lo - o) / d;
                let t2 = (hi - o) / d;
                t_near = t_near.max(t1.min(t2));
                t_far = t_far.min(t1.max(t2));
            }
        }
        if t_far < t_near || t_far < 0.0 {
            return None;
        }
        Some(t_near.max(0.0))
    }
}

/// Corners of a `length × width` box centred on `pose` and aligned with its
/// heading, counter-clockwise from rear-right.
pub fn footprint_corners(pose: Pose2D, length: f64, width: f64) -> [[f64; 2]; 4] {
    let (s, c) = pose.theta.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)].map(|(a, b)| [pose.x + a * c - b * s, pose.y + a * s + b * c])
}

/// Separating-axis test between a convex quadrilateral and an axis-aligned
/// rectangle. Touching counts as overlap.
pub fn quad_overlaps_rect(quad: &[[f64; 2]; 4], r: &Rect) -> bool {
    let rc = r.corners();
    let mut axes = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
    for i in 0..2 {
        let e = [quad[i + 1][0] - quad[i][0], quad[i + 1][1] - quad[i][1]];
        axes[i + 2] = [-e[1], e[0]];
    }
    axes.iter().all(|a| {
        let proj = |pts: &[[f64; 2]; 4]| {
            pts.iter()
                .map(|p| p[0] * a[0] + p[1] * a[1])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (q0, q1) = proj(quad);
        let (r0, r1) = proj(&rc);
        q0 <= r1 && r0 <= q1
    })
}

/// Object classes reported by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Van,
    Truck,
    Pedestrian,
    PersonSitting,
    Cyclist,
    Tram,
    Misc,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 8] = [
        ObjectClass::Car,
        ObjectClass::Van,
        ObjectClass::Truck,
        ObjectClass::Pedestrian,
        ObjectClass::PersonSitting,
        ObjectClass::Cyclist,
        ObjectClass::Tram,
        ObjectClass::Misc,
    ];
}

/// A moving obstacle. The footprint is an axis-aligned box centred on the
/// agent position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agent {
    pub id: u32,
    pub class: ObjectClass,
    pub pose: Pose2D,
    #[serde(default)]
    pub twist: Twist2D,
    /// Extents along world x and y, m.
    pub footprint: [f64; 2],
}

impl Agent {
    pub fn rect(&self) -> Rect {
        Rect::centered(self.pose.x, self.pose.y, self.footprint[0], self.footprint[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub bounds: Rect,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    #[serde(default)]
    pub agents: Vec<Agent>,
}

impl World {
    pub fn empty(bounds: Rect) -> Self {
        Self {
            bounds,
            obstacles: Vec::new(),
            agents: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.bounds.is_valid() {
            return Err("world.bounds must have positive area".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.is_valid() {
                return Err(format!("world.obstacles[{i}] must have positive area"));
            }
            if !self.bounds.contains_rect(o) {
                return Err(format!("world.obstacles[{i}] lies outside world.bounds"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.footprint[0] > 0.0 && a.footprint[1] > 0.0) {
                return Err(format!("world.agents[{i}].footprint must have positive area"));
            }
            if !self.bounds.contains(a.pose.x, a.pose.y) {
                return Err(format!("world.agents[{i}] starts outside world.bounds"));
            }
        }
        Ok(())
    }

    /// All rectangles a ray or footprint can hit: static obstacles then agents.
    pub fn solids(&self) -> impl Iterator<Item = Rect> + '_ {
        self.obstacles.iter().copied().chain(self.agents.iter().map(Agent::rect))
    }

    /// Whether a robot footprint at `pose` overlaps any solid, or leaves the
    /// world bounds.
    pub fn footprint_collides(&self, pose: Pose2D, length: f64, width: f64) -> bool {
        let quad = footprint_corners(pose, length, width);
        quad.iter().any(|p| !self.bounds.contains(p[0], p[1])) || self.solids().any(|r| quad_overlaps_rect(&quad, &r))
    }

    /// Nearest hit distance along a ray, if closer than `max_range`.
    pub fn raycast(&self, ox: f64, oy: f64, angle: f64, max_range: f64) -> Option<f64> {
        let (dy, dx) = angle.sin_cos();
        self.solids()
            .filter_map(|r| r.ray_hit(ox, oy, dx, dy))
            .filter(|&t| t <= max_range)
            .min_by(f64::total_cmp)
    }

    pub fn step(&mut self, dt: f64) {
        let b = self.bounds;
        for agent in &mut self.agents {
            let mut p = integrate_pose(agent.pose, agent.twist, dt);
            let mut theta = p.theta;
            if p.x < b.min[0] {
                p.x = 2.0 * b.min[0] - p.x;
                theta = PI - theta;
            } else if p.x > b.max[0] {
                p.x = 2.0 * b.max[0] - p.x;
                theta = PI - theta;
            }
            if p.y < b.min[1] {
                p.y = 2.0 * b.min[1] - p.y;
                theta = -theta;
            } else if p.y > b.max[1] {
                p.y = 2.0 * b.max[1] - p.y;
                theta = -theta;
            }
            p.theta = normalize_angle(theta);
            agent.pose = p;
        }
    }
}

/// Advances every agent by `dt`, reflecting off the world bounds.
pub fn world_step(w: &World, dt: f64) -> World {
    let mut next = w.clone();
    next.step(dt);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotorState {
    pub omega: f64,
    pub pwm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorStep {
    pub state: MotorState,
    /// The commanded duty was outside [−1, 1] and was clamped.
    pub clamped: bool,
}

/// First-order lag toward `pwm·omega_max`, discretised exactly.
pub fn motor_step(s: MotorState, pwm_cmd: f64, dt: f64, tau_m: f64, omega_max: f64) -> MotorStep {
    let pwm = pwm_cmd.clamp(-1.0, 1.0);
    let clamped = pwm != pwm_cmd;
    let target = pwm * omega_max;
    let alpha = 1.0 - (-dt / tau_m).exp();
    MotorStep {
        state: MotorState {
            omega: s.omega + (target - s.omega) * alpha,
            pwm,
        },
        clamped,
    }
}

/// Quadrature encoder: whole ticks plus the sub-tick remainder in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EncoderState {
    pub ticks: i64,
    pub residual: f64,
}

pub fn encoder_step(e: EncoderState, omega: f64, dt: f64, ticks_per_rev: u32) -> EncoderState {
    let tick = TAU / ticks_per_rev as f64;
    let residual = e.residual + omega * dt;
    let in_ticks = residual * ticks_per_rev as f64 / TAU;
    let rounded = in_ticks.round();
    // Snap exact multiples so a whole revolution yields whole ticks.
    let whole = if (in_ticks - rounded).abs() < 1e-9 { rounded } else { in_ticks.trunc() };
    EncoderState {
        ticks: e.ticks + whole as i64,
        residual: residual - whole * tick,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarParams {
    pub n_beams: u32,
    /// Field of view, rad, centred on the robot heading.
    pub fov: f64,
    pub max_range: f64,
    pub sigma_r: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            n_beams: 360,
            fov: TAU,
            max_range: 12.0,
            sigma_r: 0.01,
        }
    }
}

impl LidarParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_beams == 0 {
            return Err("lidar.n_beams must be >= 1".into());
        }
        if !(self.fov > 0.0 && self.fov <= TAU) {
            return Err("lidar.fov must be in (0, 2π]".into());
        }
        if !(self.max_range > 0.0) {
            return Err("lidar.max_range must be positive".into());
        }
        if !(self.sigma_r >= 0.0) {
            return Err("lidar.sigma_r must be >= 0".into());
        }
        Ok(())
    }

    /// Beam angle relative to the robot heading.
    pub fn beam_offset(&self, k: usize) -> f64 {
        if self.n_beams == 1 {
            return 0.0;
        }
        self.fov * (k as f64 / (self.n_beams - 1) as f64 - 0.5)
    }
}

/// Simulated 2D LiDAR scan. Beams that hit nothing report exactly `max_range`.
pub fn lidar_scan<R: Rng + ?Sized>(w: &World, pose: Pose2D, p: &LidarParams, rng: &mut R) -> Vec<f64> {
    (0..p.n_beams as usize)
        .map(|k| {
            let angle = pose.theta + p.beam_offset(k);
            match w.raycast(pose.x, pose.y, angle, p.max_range) {
                Some(t) => (t + gaussian(rng, p.sigma_r)).clamp(1e-6, p.max_range),
                None => p.max_range,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsImuNoise {
    /// GPS position noise per axis, m.
    pub sigma_xy: f64,
    /// Gyro yaw-rate noise, rad/s.
    pub sigma_yaw_rate: f64,
}

impl Default for GpsImuNoise {
    fn default() -> Self {
        Self {
            sigma_xy: 1.0,
            sigma_yaw_rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsImuSample {
    pub gps: [f64; 2],
    pub yaw_rate: f64,
}

pub fn sample_gps_imu<R: Rng + ?Sized>(pose: Pose2D, twist: Twist2D, noise: &GpsImuNoise, rng: &mut R) -> GpsImuSample {
    let gx = pose.x + gaussian(rng, noise.sigma_xy);
    let gy = pose.y + gaussian(rng, noise.sigma_xy);
    let yaw_rate = twist.omega + gaussian(rng, noise.sigma_yaw_rate);
    GpsImuSample {
        gps: [gx, gy],
        yaw_rate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryState {
    pub soc: f64,
    /// Terminal voltage, V.
    pub voltage: f64,
    /// Capacity, A·h.
    pub capacity: f64,
    pub internal_resistance: f64,
    pub v_full: f64,
    pub v_empty: f64,
}

impl Default for BatteryState {
    fn default() -> Self {
        Self {
            soc: 1.0,
            voltage: 8.4,
            capacity: 5.0,
            internal_resistance: 0.1,
            v_full: 8.4,
            v_empty: 6.0,
        }
    }
}

impl BatteryState {
    pub fn open_circuit(&self) -> f64 {
        self.v_full - (self.v_full - self.v_empty) * (1.0 - self.soc)
    }
}

pub fn battery_step(b: BatteryState, current: f64, dt: f64) -> BatteryState {
    let soc = (b.soc - current * dt / (3600.0 * b.capacity)).clamp(0.0, 1.0);
    let next = BatteryState { soc, ..b };
    BatteryState {
        voltage: next.open_circuit() - current * b.internal_resistance,
        ..next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    /// World-frame centre, m.
    pub center: [f64; 2],
    /// Extents along world x and y, m.
    pub footprint: [f64; 2],
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub fov: f64,
    pub range: f64,
    pub noise_xy: f64,
    pub dropout: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            fov: 100f64.to_radians(),
            range: 8.0,
            noise_xy: 0.05,
            dropout: 0.05,
        }
    }
}

/// Ground-truth object detector with position noise and random dropout.
///
/// Randomness is drawn per visible agent in a fixed order (dropout draw,
/// then x and y noise) so results depend only on the seed.
pub fn detect<R: Rng + ?Sized>(w: &World, pose: Pose2D, p: &DetectorParams, rng: &mut R) -> Vec<Detection> {
    let mut out = Vec::new();
    for agent in &w.agents {
        let dx = agent.pose.x - pose.x;
        let dy = agent.pose.y - pose.y;
        let bearing = normalize_angle(dy.atan2(dx) - pose.theta);
        if dx.hypot(dy) > p.range || bearing.abs() > p.fov / 2.0 {
            continue;
        }
        let u: f64 = rng.gen();
        let nx = gaussian(rng, p.noise_xy);
        let ny = gaussian(rng, p.noise_xy);
        if u < p.dropout {
            continue;
        }
        out.push(Detection {
            class: agent.class,
            center: [agent.pose.x + nx, agent.pose.y + ny],
            footprint: agent.footprint,
            confidence: 1.0 - p.dropout,
        });
    }
    out
}

/// Plant-side settings that are not robot geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Motor time constant, s.
    pub tau_m: f64,
    /// Effective/nominal track width; skid-steer turning scrubs, so > 1.
    pub track_scale: f64,
    /// Per-step multiplicative slip noise on the ground twist.
    pub slip_sigma: f64,
    /// Logic-battery current draw, A.
    pub logic_current: f64,
    pub battery: BatteryState,
    pub gps_imu: GpsImuNoise,
    pub detector: DetectorParams,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            tau_m: 0.15,
            track_scale: 1.05,
            slip_sigma: 0.05,
            logic_current: 1.2,
            battery: BatteryState::default(),
            gps_imu: GpsImuNoise::default(),
            detector: DetectorParams::default(),
        }
    }
}

/// Full plant state.
#[derive(Debug, Clone)]
pub struct Plant {
    pub robot: RobotParams,
    pub config: PlantConfig,
    pub lidar: LidarParams,
    pub world: World,
    pub pose: Pose2D,
    pub twist: Twist2D,
    pub motors: [MotorState; 2],
    pub encoders: [EncoderState; 2],
    pub battery: BatteryState,
    gyro_angle: f64,
    gyro_time: f64,
    lidar_rng: ChaCha8Rng,
    gps_rng: ChaCha8Rng,
    imu_rng: ChaCha8Rng,
    detector_rng: ChaCha8Rng,
    slip_rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(seed: u64, robot: RobotParams, config: PlantConfig, lidar: LidarParams, world: World, start: Pose2D) -> Self {
        let mut battery = config.battery;
        battery.voltage = battery.open_circuit();
        Self {
            robot,
            config,
            lidar,
            world,
            pose: start,
            twist: Twist2D::ZERO,
            motors: [MotorState::default(); 2],
            encoders: [EncoderState::default(); 2],
            battery,
            gyro_angle: 0.0,
            gyro_time: 0.0,
            lidar_rng: rng::stream(seed, Stream::Lidar),
            gps_rng: rng::stream(seed, Stream::Gps),
            imu_rng: rng::stream(seed, Stream::Imu),
            detector_rng: rng::stream(seed, Stream::Detector),
            slip_rng: rng::stream(seed, Stream::Slip),
        }
    }

    /// Advances the plant by `dt` with the given PWM duties. With the relay
    /// open the drivers are unpowered and the duties are ignored.
    pub fn step(&mut self, pwm_left: f64, pwm_right: f64, relay_closed: bool, dt: f64) {
        let (pl, pr) = if relay_closed { (pwm_left, pwm_right) } else { (0.0, 0.0) };
        let omega_max = self.robot.wheel_omega_max;
        self.motors[0] = motor_step(self.motors[0], pl, dt, self.config.tau_m, omega_max).state;
        self.motors[1] = motor_step(self.motors[1], pr, dt, self.config.tau_m, omega_max).state;

        let wl = self.motors[0].omega;
        let wr = self.motors[1].omega;
        let r = self.robot.wheel_radius;
        let track = self.robot.track_width * self.config.track_scale;
        let slip_v = 1.0 + gaussian(&mut self.slip_rng, self.config.slip_sigma);
        let slip_w = 1.0 + gaussian(&mut self.slip_rng, self.config.slip_sigma);
        self.twist = Twist2D {
            v: r * (wl + wr) / 2.0 * slip_v,
            omega: r * (wr - wl) / track * slip_w,
        };
        self.pose = integrate_pose(self.pose, self.twist, dt);

        let tpr = self.robot.ticks_per_wheel_rev;
        self.encoders[0] = encoder_step(self.encoders[0], wl, dt, tpr);
        self.encoders[1] = encoder_step(self.encoders[1], wr, dt, tpr);
        self.battery = battery_step(self.battery, self.config.logic_current, dt);
        self.gyro_angle += self.twist.omega * dt;
        self.gyro_time += dt;
        self.world.step(dt);
    }

    pub fn wheel_speeds(&self) -> WheelSpeeds {
        WheelSpeeds::new(self.motors[0].omega, self.motors[1].omega)
    }

    pub fn encoder_ticks(&self) -> (i64, i64) {
        (self.encoders[0].ticks, self.encoders[1].ticks)
    }

    pub fn scan(&mut self) -> Vec<f64> {
        lidar_scan(&self.world, self.pose, &self.lidar, &mut self.lidar_rng)
    }

    pub fn gps(&mut self) -> [f64; 2] {
        let sigma = self.config.gps_imu.sigma_xy;
        [
            self.pose.x + gaussian(&mut self.gps_rng, sigma),
            self.pose.y + gaussian(&mut self.gps_rng, sigma),
        ]
    }

    /// Mean yaw rate since the previous read, plus gyro noise.
    pub fn gyro(&mut self) -> f64 {
        let mean = if self.gyro_time > 0.0 {
            self.gyro_angle / self.gyro_time
        } else {
            self.twist.omega
        };
        self.gyro_angle = 0.0;
        self.gyro_time = 0.0;
        mean + gaussian(&mut self.imu_rng, self.config.gps_imu.sigma_yaw_rate)
    }

    pub fn detections(&mut self) -> Vec<Detection> {
        detect(&self.world, self.pose, &self.config.detector, &mut self.detector_rng)
    }
}
