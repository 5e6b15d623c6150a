//! Deterministic software twin of a small sidewalk delivery robot.
//!
//! The crate is split along the robot's real architecture:
//!
//! * [`kinematics`] – actuator sizing and the differential-drive model.
//! * [`plant`] – the seeded 2D world: motors, encoders, LiDAR, GPS/IMU,
//!   battery, moving agents and a ground-truth object detector.
//! * [`link`] – the CRC-framed serial protocol between the autonomy unit and
//!   the firmware, plus a fault-injecting channel.
//! * [`firmware`] – the low-level controller: PID, watchdog failsafe,
//!   battery fault, e-stop relay and package lock.
//! * [`estimation`] – EKF fusing wheel odometry, GPS and IMU yaw rate.
//! * [`mapping`] – log-odds occupancy grid and costmap inflation.
//! * [`planning`] – A* global planner, track prediction and MPPI.
//! * [`telemetry`] and [`gateway`] – telemetry/command wire formats and the
//!   WebSocket gateway for operator consoles.
//! * [`scenario`], [`runner`] and [`metrics`] – scenario files, the
//!   fixed-step master loop and the evaluation metrics.

pub mod estimation;
pub mod firmware;
pub mod gateway;
pub mod kinematics;
pub mod link;
pub mod mapping;
pub mod metrics;
pub mod planning;
pub mod plant;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod telemetry;

pub use kinematics::{Pose2D, RobotParams, SizingReport, Twist2D, WheelSpeeds};
pub use metrics::MetricsReport;
pub use runner::{run, RunOutputs, Simulation};
pub use scenario::{load_scenario, Scenario};
