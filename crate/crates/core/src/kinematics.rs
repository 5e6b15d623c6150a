//! Actuator sizing and the ideal differential-drive model.
//!
//! The 4WD skid-steer chassis is treated as a two-track differential drive:
//! the two wheels on each side are locked to the same speed and the pair is
//! separated by an effective `track_width`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this yaw rate, pose integration switches to the straight-line limit.
pub const STRAIGHT_LINE_OMEGA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid robot parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("target speed must be positive, got {0} m/s")]
    NonPositiveSpeed(f64),
    #[error("wheel speed saturated (|left|={left:.3}, |right|={right:.3} rad/s), clamped to {clamped:?}")]
    Saturated {
        left: f64,
        right: f64,
        clamped: WheelSpeeds,
    },
}

/// Physical parameters of the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    /// Total mass, kg.
    pub mass: f64,
    /// Wheel radius, m.
    pub wheel_radius: f64,
    /// Effective lateral distance between left and right wheel contact lines, m.
    pub track_width: f64,
    pub wheel_count: u32,
    /// Static friction coefficient between tire and ground.
    pub mu: f64,
    /// Gravitational acceleration, m/s².
    pub g: f64,
    /// Maximum linear speed, m/s.
    pub v_max: f64,
    /// Maximum wheel angular speed (no-load at full duty), rad/s.
    pub wheel_omega_max: f64,
    pub ticks_per_wheel_rev: u32,
    /// Chassis footprint length along the body x axis, m.
    pub length: f64,
    /// Chassis footprint width, m.
    pub width: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            mass: 15.0,
            wheel_radius: 0.09,
            track_width: 0.45,
            wheel_count: 4,
            mu: 0.6,
            g: 9.81,
            v_max: 3.0,
            wheel_omega_max: 36.0,
            ticks_per_wheel_rev: 374,
            length: 0.55,
            width: 0.54,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let positive = [
            ("mass", self.mass),
            ("wheel_radius", self.wheel_radius),
            ("track_width", self.track_width),
            ("mu", self.mu),
            ("g", self.g),
            ("v_max", self.v_max),
            ("wheel_omega_max", self.wheel_omega_max),
            ("length", self.length),
            ("width", self.width),
        ];
        for (name, value) in positive {
            // mu = 0 is the frictionless limit and is allowed.
            let ok = if name == "mu" {
                value.is_finite() && value >= 0.0
            } else {
                value.is_finite() && value > 0.0
            };
            if !ok {
                return Err(invalid(name, format!("must be positive and finite, got {value}")));
            }
        }
        if self.wheel_count < 2 || self.wheel_count % 2 != 0 {
            return Err(invalid("wheel_count", format!("must be even and >= 2, got {}", self.wheel_count)));
        }
        if self.ticks_per_wheel_rev == 0 {
            return Err(invalid("ticks_per_wheel_rev", "must be positive".into()));
        }
        if self.v_max / self.wheel_radius > self.wheel_omega_max * (1.0 + 1e-12) {
            return Err(invalid(
                "wheel_omega_max",
                format!(
                    "v_max / wheel_radius = {:.4} rad/s exceeds wheel_omega_max = {}",
                    self.v_max / self.wheel_radius,
                    self.wheel_omega_max
                ),
            ));
        }
        Ok(())
    }

    /// Angle of one encoder tick, rad.
    pub fn tick_angle(&self) -> f64 {
        TAU / self.ticks_per_wheel_rev as f64
    }
}

fn invalid(name: &'static str, reason: String) -> KinematicsError {
    KinematicsError::InvalidParam { name, reason }
}

/// Planar pose. `theta` is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// Body twist: forward speed and counter-clockwise yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist2D {
    pub v: f64,
    pub omega: f64,
}

impl Twist2D {
    pub const ZERO: Twist2D = Twist2D { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

/// Wheel angular speeds for the left and right wheel pairs, rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub left: f64,
    pub right: f64,
}

impl WheelSpeeds {
    pub const ZERO: WheelSpeeds = WheelSpeeds { left: 0.0, right: 0.0 };

    pub fn new(left: f64, right: f64) -> Self {
        Self { left, right }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizingReport {
    /// Wheel angular speed needed for the target speed, rad/s.
    pub omega_required: f64,
    pub rpm_required: f64,
    /// Total weight, N.
    pub weight: f64,
    /// Normal load on a single wheel, N.
    pub wheel_load: f64,
    /// Traction force per wheel, N.
    pub traction_force: f64,
    /// Breakaway torque per motor, N·m.
    pub startup_torque: f64,
}

/// Speed and torque requirements for a drive motor at `v_target`.
pub fn actuator_sizing(params: &RobotParams, v_target: f64) -> Result<SizingReport, KinematicsError> {
    params.validate()?;
    if !(v_target.is_finite() && v_target > 0.0) {
        return Err(KinematicsError::NonPositiveSpeed(v_target));
    }
    let omega_required = v_target / params.wheel_radius;
    let rpm_required = omega_required * 60.0 / (2.0 * PI);
    let weight = params.mass * params.g;
    let wheel_load = weight / params.wheel_count as f64;
    let traction_force = params.mu * wheel_load;
    let startup_torque = traction_force * params.wheel_radius;
    Ok(SizingReport {
        omega_required,
        rpm_required,
        weight,
        wheel_load,
        traction_force,
        startup_torque,
    })
}

/// Inverse differential-drive model.
///
/// If either wheel would exceed `wheel_omega_max`, both are scaled down by
/// the same factor (keeping the path curvature) and returned inside
/// [`KinematicsError::Saturated`].
pub fn wheels_from_twist(t: Twist2D, p: &RobotParams) -> Result<WheelSpeeds, KinematicsError> {
    let half = t.omega * p.track_width / 2.0;
    let left = (t.v - half) / p.wheel_radius;
    let right = (t.v + half) / p.wheel_radius;
    let peak = left.abs().max(right.abs());
    if peak > p.wheel_omega_max {
        let scale = p.wheel_omega_max / peak;
        return Err(KinematicsError::Saturated {
            left: left.abs(),
            right: right.abs(),
            clamped: WheelSpeeds::new(left * scale, right * scale),
        });
    }
    Ok(WheelSpeeds::new(left, right))
}

/// Like [`wheels_from_twist`] but returns the clamped speeds on saturation.
pub fn wheels_from_twist_clamped(t: Twist2D, p: &RobotParams) -> WheelSpeeds {
    match wheels_from_twist(t, p) {
        Ok(w) => w,
        Err(KinematicsError::Saturated { clamped, .. }) => clamped,
        Err(_) => WheelSpeeds::ZERO,
    }
}

/// Forward differential-drive model.
pub fn twist_from_wheels(w: WheelSpeeds, p: &RobotParams) -> Twist2D {
    Twist2D {
        v: p.wheel_radius * (w.left + w.right) / 2.0,
        omega: p.wheel_radius * (w.right - w.left) / p.track_width,
    }
}

/// Integrates a constant twist over `dt` along the exact circular arc.
pub fn integrate_pose(pose: Pose2D, t: Twist2D, dt: f64) -> Pose2D {
    let (x, y, theta) = (pose.x, pose.y, pose.theta);
    if t.omega.abs() > STRAIGHT_LINE_OMEGA {
        let r = t.v / t.omega;
        let theta_next = theta + t.omega * dt;
        Pose2D {
            x: x + r * (theta_next.sin() - theta.sin()),
            y: y - r * (theta_next.cos() - theta.cos()),
            theta: normalize_angle(theta_next),
        }
    } else {
        Pose2D {
            x: x + t.v * dt * theta.cos(),
            y: y + t.v * dt * theta.sin(),
            theta: normalize_angle(theta + t.omega * dt),
        }
    }
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let wrapped = a.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn table1() -> RobotParams {
        RobotParams::default()
    }

    #[test]
    fn sizing_table1_matches_hand_values() {
        let r = actuator_sizing(&table1(), 3.0).unwrap();
        // Hand-computed: 3/0.09, ·60/2π, 15·9.81, /4, ·0.6, ·0.09.
        assert!(close(r.omega_required, 33.333_333_333_333_336, 1e-9));
        assert!(close(r.rpm_required, 318.309_886_183_790_7, 1e-9));
        assert!(close(r.weight, 147.15, 1e-9));
        assert!(close(r.wheel_load, 36.7875, 1e-9));
        assert!(close(r.traction_force, 22.0725, 1e-9));
        assert!(close(r.startup_torque, 1.986_525, 1e-9));
        let rel = (r.rpm_required - r.omega_required * 60.0 / TAU).abs() / r.rpm_required;
        assert!(rel < 1e-9);
    }

    #[test]
    fn sizing_frictionless() {
        let p = RobotParams { mu: 0.0, ..table1() };
        let r = actuator_sizing(&p, 3.0).unwrap();
        assert_eq!(r.traction_force, 0.0);
        assert_eq!(r.startup_torque, 0.0);
    }

    #[test]
    fn sizing_one_rpm() {
        let p = table1();
        let r = actuator_sizing(&p, p.wheel_radius * 2.0 * PI / 60.0).unwrap();
        assert!(close(r.rpm_required, 1.0, 1e-12));
    }

    #[test]
    fn sizing_rejects_bad_input() {
        assert!(matches!(
            actuator_sizing(&table1(), 0.0),
            Err(KinematicsError::NonPositiveSpeed(_))
        ));
        assert!(matches!(
            actuator_sizing(&table1(), -1.0),
            Err(KinematicsError::NonPositiveSpeed(_))
        ));
        let odd = RobotParams { wheel_count: 3, ..table1() };
        assert!(actuator_sizing(&odd, 1.0).is_err());
        let slow_motor = RobotParams { wheel_omega_max: 10.0, ..table1() };
        assert!(slow_motor.validate().is_err());
        let massless = RobotParams { mass: 0.0, ..table1() };
        assert!(actuator_sizing(&massless, 1.0).is_err());
    }

    #[test]
    fn sizing_linear_in_mass() {
        let a = actuator_sizing(&table1(), 2.0).unwrap();
        let b = actuator_sizing(&RobotParams { mass: 30.0, ..table1() }, 2.0).unwrap();
        assert_eq!(b.weight, 2.0 * a.weight);
        assert_eq!(b.wheel_load, 2.0 * a.wheel_load);
        assert_eq!(b.traction_force, 2.0 * a.traction_force);
        assert_eq!(b.startup_torque, 2.0 * a.startup_torque);
    }

    #[test]
    fn wheels_examples() {
        let p = table1();
        let w = wheels_from_twist(Twist2D::new(1.0, 0.0), &p).unwrap();
        assert!(close(w.left, 11.111_111_111, 1e-8) && close(w.right, 11.111_111_111, 1e-8));
        let w = wheels_from_twist(Twist2D::new(0.0, 1.0), &p).unwrap();
        assert!(close(w.right, 2.5, 1e-12) && close(w.left, -2.5, 1e-12));
        assert_eq!(wheels_from_twist(Twist2D::ZERO, &p).unwrap(), WheelSpeeds::ZERO);
    }

    #[test]
    fn wheels_saturate_with_clamped_value() {
        let p = table1();
        match wheels_from_twist(Twist2D::new(5.0, 1.0), &p) {
            Err(KinematicsError::Saturated { clamped, .. }) => {
                let peak = clamped.left.abs().max(clamped.right.abs());
                assert!(close(peak, p.wheel_omega_max, 1e-12));
                // curvature preserved
                let t = twist_from_wheels(clamped, &p);
                assert!(close(t.omega / t.v, 0.2, 1e-12));
            }
            other => panic!("expected saturation, got {other:?}"),
        }
    }

    #[test]
    fn twist_examples() {
        let p = table1();
        let t = twist_from_wheels(WheelSpeeds::new(1.0 / 0.09, 1.0 / 0.09), &p);
        assert!(close(t.v, 1.0, 1e-12) && t.omega == 0.0);
        let t = twist_from_wheels(WheelSpeeds::new(2.5, -2.5), &p);
        assert!(close(t.v, 0.0, 1e-15) && close(t.omega, -1.0, 1e-12));
    }

    #[test]
    fn twist_round_trip_random() {
        let p = table1();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = Twist2D::new(rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0));
            let back = twist_from_wheels(wheels_from_twist(t, &p).unwrap(), &p);
            assert!(close(back.v, t.v, 1e-12) && close(back.omega, t.omega, 1e-12));
        }
    }

    #[test]
    fn integrate_examples() {
        let p = integrate_pose(Pose2D::default(), Twist2D::new(1.0, 0.0), 0.1);
        assert!(close(p.x, 0.1, 1e-15) && p.y == 0.0 && p.theta == 0.0);
        let p = integrate_pose(Pose2D::default(), Twist2D::new(0.0, PI / 2.0), 1.0);
        assert!(close(p.x, 0.0, 1e-15) && close(p.y, 0.0, 1e-15) && close(p.theta, PI / 2.0, 1e-15));
    }

    /// Fine-step integration with the heading taken at each substep midpoint.
    fn fine_step_oracle(pose: Pose2D, t: Twist2D, dt: f64, n: usize) -> Pose2D {
        let h = dt / n as f64;
        let (mut x, mut y, mut th) = (pose.x, pose.y, pose.theta);
        for _ in 0..n {
            let mid = th + 0.5 * t.omega * h;
            x += t.v * mid.cos() * h;
            y += t.v * mid.sin() * h;
            th += t.omega * h;
        }
        Pose2D { x, y, theta: normalize_angle(th) }
    }

    #[test]
    fn integrate_quarter_arc_matches_fine_step() {
        let exact = integrate_pose(Pose2D::default(), Twist2D::new(1.0, 1.0), PI / 2.0);
        let oracle = fine_step_oracle(Pose2D::default(), Twist2D::new(1.0, 1.0), PI / 2.0, 1_000_000);
        assert!(close(exact.x, 1.0, 1e-12) && close(exact.y, 1.0, 1e-12));
        assert!(close(exact.x, oracle.x, 1e-6));
        assert!(close(exact.y, oracle.y, 1e-6));
        assert!(close(exact.theta, oracle.theta, 1e-6));
    }

    #[test]
    fn normalize_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!(close(normalize_angle(3.0 * PI), PI, 1e-12));
        assert!(close(normalize_angle(-3.5 * PI), 0.5 * PI, 1e-12));
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    proptest! {
        #[test]
        fn small_omega_converges_to_straight(v in 0.0..3.0f64, dt in 1e-3..0.1f64, th in -3.1..3.1f64) {
            let start = Pose2D::new(1.0, -2.0, th);
            let arc = integrate_pose(start, Twist2D::new(v, 1e-8), dt);
            let line = integrate_pose(start, Twist2D::new(v, 0.0), dt);
            prop_assert!(arc.distance_to(line.x, line.y) < 1e-6);
        }

        #[test]
        fn n_steps_equal_one_long_step(v in -2.0..2.0f64, w in -2.0..2.0f64, dt in 1e-3..0.1f64, n in 1usize..50) {
            let t = Twist2D::new(v, w);
            let mut p = Pose2D::new(0.3, 0.4, 0.5);
            for _ in 0..n {
                p = integrate_pose(p, t, dt);
            }
            let q = integrate_pose(Pose2D::new(0.3, 0.4, 0.5), t, dt * n as f64);
            prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            prop_assert!(normalize_angle(p.theta - q.theta).abs() < 1e-9);
        }

        #[test]
        fn theta_always_normalized(a in -1e4..1e4f64) {
            let n = normalize_angle(a);
            prop_assert!(n > -PI && n <= PI);
        }
    }
}
