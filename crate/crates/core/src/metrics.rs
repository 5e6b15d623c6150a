//! Run metrics and the trajectory CSV they are computed from.
//!
//! The CSV has two row kinds sharing one header. `sample` rows are written
//! once per control tick; a `path` row precedes the first sample that uses a
//! new global path and carries its waypoints in the last column as
//! `x y;x y;...`. Floats are written in shortest round-trip form so a parsed
//! CSV reproduces the in-process values bit for bit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::Mode;
use crate::kinematics::{normalize_angle, Pose2D};
use crate::planning::nearest_on_polyline;
use crate::plant::World;
use crate::scenario::{steps_per_period, Scenario};

pub const CSV_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "kind,t,x,y,theta,est_x,est_y,est_theta,v,omega,sp_left,sp_right,pwm_left,pwm_right,mode,lock,goal_index,path_id,waypoints";

/// Goal region radius used for success, m.
pub const GOAL_RADIUS: f64 = 0.3;
/// Samples slower than this are left out of the heading RMSE, m/s.
pub const HEADING_MIN_SPEED: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub pose: Pose2D,
    pub est: Pose2D,
    pub v: f64,
    pub omega: f64,
    pub setpoints: [f64; 2],
    pub pwm: [f64; 2],
    pub mode: u8,
    pub lock: u8,
    pub goal_index: Option<usize>,
    pub path_id: Option<u32>,
}

impl Sample {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "sample,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},\n",
            self.t,
            self.pose.x,
            self.pose.y,
            self.pose.theta,
            self.est.x,
            self.est.y,
            self.est.theta,
            self.v,
            self.omega,
            self.setpoints[0],
            self.setpoints[1],
            self.pwm[0],
            self.pwm[1],
            self.mode,
            self.lock,
            opt(self.goal_index.map(|g| g.to_string())),
            opt(self.path_id.map(|p| p.to_string())),
        )
    }
}

pub fn path_row(t: f64, id: u32, waypoints: &[[f64; 2]]) -> String {
    let mut pts = String::new();
    for (i, w) in waypoints.iter().enumerate() {
        if i > 0 {
            pts.push(';');
        }
        let _ = write!(pts, "{} {}", w[0], w[1]);
    }
    format!("path,{t},,,,,,,,,,,,,,,,{id},{pts}\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub v: u32,
    pub goal_success: Vec<bool>,
    pub path_deviation_mean: f64,
    pub path_deviation_max: f64,
    /// Executed heading against the path tangent; stands in for a steering
    /// angle error since there is no steering model.
    pub heading_rmse: f64,
    pub collisions: u32,
    pub failsafe_events: u32,
    pub estop_events: u32,
    pub distance: f64,
    pub elapsed: f64,
    pub samples: u64,
}

impl MetricsReport {
    pub fn all_goals_reached(&self) -> bool {
        !self.goal_success.is_empty() && self.goal_success.iter().all(|&g| g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("trajectory log has no samples")]
    Empty,
    #[error("trajectory log line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Streaming metric state; fed the same samples in-process and when
/// recomputing from a CSV.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    goals: Vec<[f64; 2]>,
    goal_success: Vec<bool>,
    /// Goal whose window is still open after the active index moved on.
    trailing_goal: Option<usize>,
    paths: Vec<(u32, Vec<[f64; 2]>)>,
    dev_sum: f64,
    dev_max: f64,
    dev_n: u64,
    head_sq: f64,
    head_n: u64,
    collisions: u32,
    in_collision: bool,
    failsafe_events: u32,
    estop_events: u32,
    last_mode: Option<u8>,
    distance: f64,
    last_pose: Option<Pose2D>,
    elapsed: f64,
    samples: u64,
}

impl MetricsAccumulator {
    pub fn new(goals: &[[f64; 2]]) -> Self {
        Self {
            goals: goals.to_vec(),
            goal_success: vec![false; goals.len()],
            trailing_goal: None,
            paths: Vec::new(),
            dev_sum: 0.0,
            dev_max: 0.0,
            dev_n: 0,
            head_sq: 0.0,
            head_n: 0,
            collisions: 0,
            in_collision: false,
            failsafe_events: 0,
            estop_events: 0,
            last_mode: None,
            distance: 0.0,
            last_pose: None,
            elapsed: 0.0,
            samples: 0,
        }
    }

    pub fn add_path(&mut self, id: u32, waypoints: Vec<[f64; 2]>) {
        self.paths.push((id, waypoints));
    }

    fn path(&self, id: u32) -> Option<&[[f64; 2]]> {
        self.paths.iter().rev().find(|(i, _)| *i == id).map(|(_, w)| w.as_slice())
    }

    fn check_goal(&mut self, i: usize, pose: Pose2D) {
        if let Some(g) = self.goals.get(i) {
            if pose.distance_to(g[0], g[1]) <= GOAL_RADIUS {
                self.goal_success[i] = true;
            }
        }
    }

    /// `colliding` is whether the robot footprint overlaps a solid at this
    /// sample.
    pub fn add_sample(&mut self, s: &Sample, colliding: bool) {
        self.samples += 1;
        self.elapsed = s.t;
        let p = s.pose;

        // a goal counts while active and for the first sample after it
        if let Some(prev) = self.trailing_goal.take() {
            self.check_goal(prev, p);
        }
        if let Some(i) = s.goal_index {
            self.check_goal(i, p);
        }

        if let Some(path) = s.path_id.and_then(|id| self.path(id)) {
            if let Some(n) = nearest_on_polyline(path, p.x, p.y) {
                self.dev_sum += n.distance;
                self.dev_max = self.dev_max.max(n.distance);
                self.dev_n += 1;
                if let Some(h) = n.heading {
                    if s.v > HEADING_MIN_SPEED {
                        let e = normalize_angle(p.theta - h);
                        self.head_sq += e * e;
                        self.head_n += 1;
                    }
                }
            }
        }

        if colliding && !self.in_collision {
            self.collisions += 1;
        }
        self.in_collision = colliding;

        if self.last_mode != Some(s.mode) {
            if s.mode == Mode::Failsafe.code() {
                self.failsafe_events += 1;
            }
            if s.mode == Mode::EStopped.code() {
                self.estop_events += 1;
            }
        }
        self.last_mode = Some(s.mode);

        if let Some(lp) = self.last_pose {
            self.distance += (p.x - lp.x).hypot(p.y - lp.y);
        }
        self.last_pose = Some(p);
    }

    /// Marks the goal that was just left so the next sample still counts.
    pub fn goal_advanced(&mut self, from: usize) {
        self.trailing_goal = Some(from);
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            v: CSV_VERSION,
            goal_success: self.goal_success.clone(),
            path_deviation_mean: if self.dev_n > 0 { self.dev_sum / self.dev_n as f64 } else { 0.0 },
            path_deviation_max: self.dev_max,
            heading_rmse: if self.head_n > 0 { (self.head_sq / self.head_n as f64).sqrt() } else { 0.0 },
            collisions: self.collisions,
            failsafe_events: self.failsafe_events,
            estop_events: self.estop_events,
            distance: self.distance,
            elapsed: self.elapsed,
            samples: self.samples,
        }
    }
}

/// Feeds samples in order, handling goal hand-over between them.
#[derive(Debug, Clone)]
pub struct SampleFeed {
    pub acc: MetricsAccumulator,
    last_goal: Option<Option<usize>>,
}

impl SampleFeed {
    pub fn new(goals: &[[f64; 2]]) -> Self {
        Self {
            acc: MetricsAccumulator::new(goals),
            last_goal: None,
        }
    }

    pub fn push(&mut self, s: &Sample, colliding: bool) {
        if let Some(Some(prev)) = self.last_goal {
            if s.goal_index != Some(prev) {
                self.acc.goal_advanced(prev);
            }
        }
        self.last_goal = Some(s.goal_index);
        self.acc.add_sample(s, colliding);
    }
}

/// Whether the robot footprint at `pose` overlaps an obstacle or agent.
/// Leaving the world bounds is not a collision.
pub fn robot_collides(world: &World, pose: Pose2D, length: f64, width: f64) -> bool {
    let quad = crate::plant::footprint_corners(pose, length, width);
    world.solids().any(|r| crate::plant::quad_overlaps_rect(&quad, &r))
}

fn parse_f64(field: &str, line: usize, name: &str) -> Result<f64, MetricsError> {
    field.parse().map_err(|_| MetricsError::Malformed {
        line,
        reason: format!("bad {name}: {field:?}"),
    })
}

fn parse_opt<T: std::str::FromStr>(field: &str, line: usize, name: &str) -> Result<Option<T>, MetricsError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| MetricsError::Malformed {
        line,
        reason: format!("bad {name}: {field:?}"),
    })
}

pub enum CsvRow {
    Sample(Sample),
    Path { t: f64, id: u32, waypoints: Vec<[f64; 2]> },
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, MetricsError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if n == 0 {
            if line != CSV_HEADER {
                return Err(MetricsError::Malformed {
                    line: ln,
                    reason: "unexpected header".into(),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            return Err(MetricsError::Malformed {
                line: ln,
                reason: format!("expected 19 fields, got {}", f.len()),
            });
        }
        let num = |i: usize, name: &str| parse_f64(f[i], ln, name);
        match f[0] {
            "sample" => rows.push(CsvRow::Sample(Sample {
                t: num(1, "t")?,
                pose: Pose2D {
                    x: num(2, "x")?,
                    y: num(3, "y")?,
                    theta: num(4, "theta")?,
                },
                est: Pose2D {
                    x: num(5, "est_x")?,
                    y: num(6, "est_y")?,
                    theta: num(7, "est_theta")?,
                },
                v: num(8, "v")?,
                omega: num(9, "omega")?,
                setpoints: [num(10, "sp_left")?, num(11, "sp_right")?],
                pwm: [num(12, "pwm_left")?, num(13, "pwm_right")?],
                mode: parse_opt(f[14], ln, "mode")?.unwrap_or(0),
                lock: parse_opt(f[15], ln, "lock")?.unwrap_or(0),
                goal_index: parse_opt(f[16], ln, "goal_index")?,
                path_id: parse_opt(f[17], ln, "path_id")?,
            })),
            "path" => {
                let mut waypoints = Vec::new();
                for pt in f[18].split(';').filter(|s| !s.is_empty()) {
                    let mut it = pt.split(' ');
                    let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
                        return Err(MetricsError::Malformed {
                            line: ln,
                            reason: format!("bad waypoint {pt:?}"),
                        });
                    };
                    waypoints.push([parse_f64(x, ln, "waypoint")?, parse_f64(y, ln, "waypoint")?]);
                }
                rows.push(CsvRow::Path {
                    t: num(1, "t")?,
                    id: parse_opt(f[17], ln, "path_id")?.ok_or(MetricsError::Malformed {
                        line: ln,
                        reason: "path row without id".into(),
                    })?,
                    waypoints,
                });
            }
            other => {
                return Err(MetricsError::Malformed {
                    line: ln,
                    reason: format!("unknown row kind {other:?}"),
                })
            }
        }
    }
    Ok(rows)
}

/// Recomputes the report from a trajectory CSV. Agent positions are
/// re-simulated from the scenario's world, which moves deterministically.
pub fn compute_metrics(csv: &str, scenario: &Scenario) -> Result<MetricsReport, MetricsError> {
    let rows = parse_csv(csv)?;
    if !rows.iter().any(|r| matches!(r, CsvRow::Sample(_))) {
        return Err(MetricsError::Empty);
    }
    let mut feed = SampleFeed::new(&scenario.goals);
    let mut world = scenario.world.clone();
    let mut world_step = 0u64;
    let per_ctrl = steps_per_period(scenario.sim_dt, scenario.rates.control_hz).unwrap_or(1);
    let (len, wid) = (scenario.robot.length, scenario.robot.width);
    let mut ctrl_index = 0u64;
    for row in rows {
        match row {
            CsvRow::Path { id, waypoints, .. } => feed.acc.add_path(id, waypoints),
            CsvRow::Sample(s) => {
                // samples fall on consecutive control ticks
                let target = ctrl_index * per_ctrl;
                while world_step < target {
                    world.step(scenario.sim_dt);
                    world_step += 1;
                }
                ctrl_index += 1;
                let colliding = robot_collides(&world, s.pose, len, wid);
                feed.push(&s, colliding);
            }
        }
    }
    Ok(feed.acc.report())
}
