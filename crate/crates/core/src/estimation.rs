//! Extended Kalman filter over (x, y, θ).
//!
//! Wheel odometry is the control input for prediction (exact-arc motion
//! model), GPS updates position, and the IMU yaw rate is blended into the
//! odometry yaw rate before each prediction.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::{integrate_pose, normalize_angle, Pose2D, Twist2D, STRAIGHT_LINE_OMEGA};

pub type EkfState = Pose2D;
pub type Covariance3 = Matrix3<f64>;

/// Filter noise settings. Matrices are given as diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Process noise added per `q_period` of prediction: m², m², rad².
    pub q_odom: [f64; 3],
    pub q_period: f64,
    /// GPS measurement variance per axis, m².
    pub r_gps: [f64; 2],
    /// IMU yaw-rate variance, (rad/s)².
    pub r_yawrate: f64,
    /// Variance assigned to the odometry yaw rate when blending, (rad/s)².
    pub r_odom_yawrate: f64,
    /// Initial covariance diagonal.
    pub p0: [f64; 3],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q_odom: [1e-4, 1e-4, 1e-5],
            q_period: 0.05,
            r_gps: [1.0, 1.0],
            r_yawrate: 4e-4,
            r_odom_yawrate: 4e-3,
            p0: [1e-4, 1e-4, 1e-6],
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = self.q_odom.iter().chain(&self.r_gps).chain(&self.p0).chain([&self.r_yawrate, &self.r_odom_yawrate]);
        if all.copied().any(|v| !(v >= 0.0)) {
            return Err("noise variances must be >= 0".into());
        }
        if !(self.q_period > 0.0) {
            return Err("noise.q_period must be positive".into());
        }
        Ok(())
    }

    pub fn q_for(&self, dt: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q_odom)) * (dt / self.q_period)
    }

    pub fn r_gps(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::from(self.r_gps))
    }

    pub fn p0(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.p0))
    }
}

/// Jacobian of [`integrate_pose`] with respect to (x, y, θ).
pub fn motion_jacobian(s: &EkfState, odom: Twist2D, dt: f64) -> Matrix3<f64> {
    let (v, w, th) = (odom.v, odom.omega, s.theta);
    let (dx_dth, dy_dth) = if w.abs() > STRAIGHT_LINE_OMEGA {
        let r = v / w;
        let th1 = th + w * dt;
        (r * (th1.cos() - th.cos()), r * (th1.sin() - th.sin()))
    } else {
        (-v * dt * th.sin(), v * dt * th.cos())
    };
    Matrix3::new(1.0, 0.0, dx_dth, 0.0, 1.0, dy_dth, 0.0, 0.0, 1.0)
}

fn symmetrize(p: Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

pub fn ekf_predict(s: &EkfState, p: &Covariance3, odom: Twist2D, dt: f64, q: &Matrix3<f64>) -> (EkfState, Covariance3) {
    let f = motion_jacobian(s, odom, dt);
    let next = integrate_pose(*s, odom, dt);
    (next, symmetrize(f * p * f.transpose() + q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsUpdate {
    pub state: EkfState,
    pub cov: Covariance3,
    /// False when the innovation covariance was singular and the update was skipped.
    pub applied: bool,
}

/// Position update with H = [I₂ 0], Joseph-form covariance.
pub fn ekf_update_gps(s: &EkfState, p: &Covariance3, z: [f64; 2], r: &Matrix2<f64>) -> GpsUpdate {
    let h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let innovation_cov = h * p * h.transpose() + r;
    let skipped = GpsUpdate {
        state: *s,
        cov: *p,
        applied: false,
    };
    if innovation_cov.determinant().abs() < 1e-300 {
        return skipped;
    }
    let Some(s_inv) = innovation_cov.try_inverse() else {
        return skipped;
    };
    let gain = p * h.transpose() * s_inv;
    let innovation = Vector2::new(z[0] - s.x, z[1] - s.y);
    let dx = gain * innovation;
    let state = Pose2D {
        x: s.x + dx[0],
        y: s.y + dx[1],
        theta: normalize_angle(s.theta + dx[2]),
    };
    let i_kh = Matrix3::identity() - gain * h;
    let cov = symmetrize(i_kh * p * i_kh.transpose() + gain * r * gain.transpose());
    GpsUpdate {
        state,
        cov,
        applied: true,
    }
}

/// Precision-weighted blend of the IMU yaw rate `z` (variance `r_imu`) with
/// the odometry yaw rate (variance `r_odom`).
pub fn blend_yaw_rate(z: f64, omega_odom: f64, r_imu: f64, r_odom: f64) -> f64 {
    if r_imu.is_infinite() || r_odom == 0.0 {
        return omega_odom;
    }
    if r_imu == 0.0 || r_odom.is_infinite() {
        return z;
    }
    (z * r_odom + omega_odom * r_imu) / (r_imu + r_odom)
}

/// Functional form used by the filter: returns the corrected yaw rate for
/// the next prediction. State and covariance are untouched.
pub fn ekf_update_yawrate(z: f64, omega_odom: f64, r_imu: f64, noise: &NoiseConfig) -> f64 {
    blend_yaw_rate(z, omega_odom, r_imu, noise.r_odom_yawrate)
}

/// Filter instance owned by the autonomy loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Ekf {
    pub state: EkfState,
    pub cov: Covariance3,
    pub noise: NoiseConfig,
    pub skipped_updates: u64,
}

impl Ekf {
    pub fn new(start: Pose2D, noise: NoiseConfig) -> Self {
        Self {
            state: start,
            cov: noise.p0(),
            noise,
            skipped_updates: 0,
        }
    }

    pub fn predict(&mut self, odom: Twist2D, dt: f64) {
        let (s, p) = ekf_predict(&self.state, &self.cov, odom, dt, &self.noise.q_for(dt));
        self.state = s;
        self.cov = p;
    }

    /// Predicts with the odometry yaw rate corrected by an IMU reading.
    pub fn predict_with_gyro(&mut self, odom: Twist2D, gyro: Option<f64>, dt: f64) {
        let omega = match gyro {
            Some(z) => blend_yaw_rate(z, odom.omega, self.noise.r_yawrate, self.noise.r_odom_yawrate),
            None => odom.omega,
        };
        self.predict(Twist2D::new(odom.v, omega), dt);
    }

    pub fn update_gps(&mut self, z: [f64; 2]) -> bool {
        let u = ekf_update_gps(&self.state, &self.cov, z, &self.noise.r_gps());
        self.state = u.state;
        self.cov = u.cov;
        if !u.applied {
            self.skipped_updates += 1;
        }
        u.applied
    }
}
