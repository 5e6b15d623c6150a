//! Fixed-step master loop wiring plant, link, firmware and autonomy.
//!
//! Every `sim_dt` step fires, in this order: plant integration up to the
//! step time, link delivery in both directions (firmware handles frames as
//! they arrive), the firmware control tick, the autonomy tick, telemetry.
//! Tasks fire on integer multiples of their period in steps, so changing a
//! rate never reorders tasks that share a step.

use std::collections::VecDeque;

use crate::estimation::Ekf;
use crate::firmware::{EncoderCounts, FirmwareState, LockState, Mode};
use crate::kinematics::{integrate_pose, twist_from_wheels, wheels_from_twist_clamped, Pose2D, Twist2D, WheelSpeeds};
use crate::link::{encode_frame, Channel, CmdVelPayload, Decoder, Frame, FrameBody, FrameKind, Sequencer};
use crate::mapping::{inflate, inflation_kernel, Costmap, GridGeometry, OccupancyGrid, COST_LETHAL};
use crate::metrics::{path_row, robot_collides, MetricsReport, Sample, SampleFeed, CSV_HEADER};
use crate::planning::{astar, mppi_plan, nearest_free_cell, PlanError, PlannedPath, Tracker};
use crate::plant::{Detection, Plant};
use crate::rng::{self, Stream};
use crate::scenario::{steps_per_period, Scenario};
use crate::telemetry::{
    encode_command_log, CommandKind, Diagnostics, PlannerSummary, Publisher, TelemetryRecord, TimedCommand,
    SCHEMA_VERSION,
};
use rand_chacha::ChaCha8Rng;

/// Estimate quality accumulated at every autonomy tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimationStats {
    pub samples: u64,
    ekf_sq: f64,
    dr_sq: f64,
}

impl EstimationStats {
    pub fn ekf_rmse(&self) -> f64 {
        (self.ekf_sq / self.samples.max(1) as f64).sqrt()
    }

    pub fn dead_reckoning_rmse(&self) -> f64 {
        (self.dr_sq / self.samples.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub csv: String,
    pub metrics: MetricsReport,
    /// Exact telemetry byte stream.
    pub telemetry: String,
    /// Commands as applied, replayable with [`run`].
    pub command_log: String,
    pub estimation: EstimationStats,
    pub firmware: FirmwareState,
}

/// Autonomy-side state: estimator, map, planners and the last Status seen.
struct Autonomy {
    ekf: Ekf,
    dead_reckoning: Pose2D,
    inbox: Vec<Frame>,
    last_status: Option<(u16, i64, i64)>,
    status_mode: u8,
    status_lock: u8,
    status_battery_mv: u32,
    status_frames: u64,
    grid: OccupancyGrid,
    occupied: Vec<bool>,
    costmap: Costmap,
    kernel: Vec<(i64, i64, u8)>,
    tracker: Tracker,
    detections: Vec<Detection>,
    goals: Vec<[f64; 2]>,
    goal_index: Option<usize>,
    path: Option<PlannedPath>,
    path_id: u32,
    replans: u32,
    nominal: Vec<Twist2D>,
    mppi_rng: ChaCha8Rng,
    diagnostics: crate::planning::MppiDiagnostics,
    estopped: bool,
    diag_requested: bool,
}

pub struct Simulation {
    pub scenario: Scenario,
    pub plant: Plant,
    pub firmware: FirmwareState,
    down: Channel,
    up: Channel,
    firmware_rx: Decoder,
    autonomy_rx: Decoder,
    down_seq: Sequencer,
    auto: Autonomy,
    step: u64,
    last_step: u64,
    per_control: u64,
    per_autonomy: u64,
    per_telemetry: u64,
    per_gps: u64,
    per_map: u64,
    next_gps: u64,
    csv: String,
    telemetry: String,
    publisher: Publisher,
    feed: SampleFeed,
    csv_path_id: Option<u32>,
    scripted: VecDeque<TimedCommand>,
    pending: VecDeque<CommandKind>,
    applied: Vec<TimedCommand>,
    stats: EstimationStats,
    map_seq: u32,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Self {
        Self::with_commands(scenario, &[])
    }

    /// `commands` are applied at the first autonomy tick at or after their
    /// time, before anything queued with [`Simulation::push_command`].
    pub fn with_commands(scenario: Scenario, commands: &[TimedCommand]) -> Self {
        let s = scenario;
        let per = |hz: f64| steps_per_period(s.sim_dt, hz).expect("validated scenario");
        let plant = Plant::new(s.seed, s.robot, s.plant, s.lidar, s.world.clone(), s.start);
        let geometry = GridGeometry::covering(s.world.bounds.min, s.world.bounds.max, s.map.resolution);
        let grid = OccupancyGrid::new(geometry, s.map);
        let costmap = inflate(&grid);
        let auto = Autonomy {
            ekf: Ekf::new(s.start, s.noise),
            dead_reckoning: s.start,
            inbox: Vec::new(),
            last_status: None,
            status_mode: Mode::Init.code(),
            status_lock: LockState::Locked.code(),
            status_battery_mv: 0,
            status_frames: 0,
            occupied: vec![false; geometry.len()],
            kernel: inflation_kernel(s.map.inflation_radius, s.map.resolution),
            grid,
            costmap,
            tracker: Tracker::new(s.planner.tracker),
            detections: Vec::new(),
            goals: s.goals.clone(),
            goal_index: (!s.goals.is_empty() && s.script.is_none()).then_some(0),
            path: None,
            path_id: 0,
            replans: 0,
            nominal: Vec::new(),
            mppi_rng: rng::stream(s.seed, Stream::Mppi),
            diagnostics: Default::default(),
            estopped: false,
            diag_requested: false,
        };
        Self {
            plant,
            firmware: FirmwareState::new(s.firmware),
            down: Channel::new(s.faults.link.clone(), rng::stream(s.seed, Stream::DownLink)),
            up: Channel::new(s.faults.link.clone(), rng::stream(s.seed, Stream::UpLink)),
            firmware_rx: Decoder::new(),
            autonomy_rx: Decoder::new(),
            down_seq: Sequencer::default(),
            auto,
            step: 0,
            last_step: (s.duration / s.sim_dt).round() as u64,
            per_control: per(s.rates.control_hz),
            per_autonomy: per(s.rates.autonomy_hz),
            per_telemetry: per(s.rates.telemetry_hz),
            per_gps: per(s.rates.gps_hz),
            per_map: per(s.rates.map_snapshot_hz),
            next_gps: 0,
            csv: format!("{CSV_HEADER}\n"),
            telemetry: String::new(),
            publisher: Publisher::default(),
            feed: SampleFeed::new(&s.goals),
            csv_path_id: None,
            scripted: commands.iter().copied().collect(),
            pending: VecDeque::new(),
            applied: Vec::new(),
            stats: EstimationStats::default(),
            map_seq: 0,
            scenario: s,
        }
    }

    /// Simulation time of the next step to run.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.scenario.sim_dt
    }

    pub fn is_done(&self) -> bool {
        self.step > self.last_step
    }

    /// Queues an operator command for the next autonomy tick.
    pub fn push_command(&mut self, kind: CommandKind) {
        self.pending.push_back(kind);
    }

    pub fn pending_commands(&self) -> usize {
        self.pending.len()
    }

    /// Mode and lock codes from the newest Status frame the autonomy side
    /// has received.
    pub fn last_status(&self) -> (u8, u8) {
        (self.auto.status_mode, self.auto.status_lock)
    }

    pub fn status_frames_received(&self) -> u64 {
        self.auto.status_frames
    }

    pub fn estimate(&self) -> Pose2D {
        self.auto.ekf.state
    }

    pub fn occupancy(&self) -> &OccupancyGrid {
        &self.auto.grid
    }

    pub fn csv(&self) -> &str {
        &self.csv
    }

    pub fn metrics(&self) -> MetricsReport {
        self.feed.acc.report()
    }

    /// Runs one master step; returns the telemetry line published in it.
    pub fn step(&mut self) -> Option<String> {
        let k = self.step;
        let dt = self.scenario.sim_dt;
        let t = k as f64 * dt;
        if k > 0 {
            let fw = &self.firmware;
            self.plant.step(fw.pwm[0], fw.pwm[1], fw.relay_closed, dt);
        }

        let down = self.down.step(t);
        for f in self.firmware_rx.feed(&down) {
            self.firmware.on_frame(&f, t);
        }
        let up = self.up.step(t);
        let frames = self.autonomy_rx.feed(&up);
        self.auto.inbox.extend(frames);

        if k % self.per_control == 0 {
            self.control_tick(t);
        }
        if k % self.per_autonomy == 0 {
            self.autonomy_tick(t);
        }
        let line = (k % self.per_telemetry == 0).then(|| self.telemetry_tick(t, k));
        self.step += 1;
        line
    }

    pub fn run_to_end(&mut self) {
        while !self.is_done() {
            self.step();
        }
    }

    pub fn finish(mut self) -> RunOutputs {
        self.run_to_end();
        RunOutputs {
            metrics: self.feed.acc.report(),
            csv: self.csv,
            telemetry: self.telemetry,
            command_log: encode_command_log(&self.applied),
            estimation: self.stats,
            firmware: self.firmware,
        }
    }

    fn control_tick(&mut self, t: f64) {
        let (l, r) = self.plant.encoder_ticks();
        let battery = self.scenario.battery_override(t).unwrap_or(self.plant.battery.voltage);
        let out = self.firmware.control_tick(EncoderCounts { left: l, right: r }, battery, t);
        if let Some(status) = out.status {
            self.up.send(t, encode_frame(&status).expect("status frames fit"));
        }

        if let (Some(path), Some(id)) = (&self.auto.path, self.auto.goal_index.map(|_| self.auto.path_id)) {
            if self.csv_path_id != Some(id) {
                self.csv.push_str(&path_row(t, id, &path.waypoints));
                self.feed.acc.add_path(id, path.waypoints.clone());
                self.csv_path_id = Some(id);
            }
        }
        let fw = &self.firmware;
        let sample = Sample {
            t,
            pose: self.plant.pose,
            est: self.auto.ekf.state,
            v: self.plant.twist.v,
            omega: self.plant.twist.omega,
            setpoints: [fw.setpoints.left, fw.setpoints.right],
            pwm: [out.pwm_left, out.pwm_right],
            mode: fw.mode.code(),
            lock: fw.lock.code(),
            goal_index: self.auto.goal_index,
            path_id: self.auto.path.as_ref().and(self.auto.goal_index).map(|_| self.auto.path_id),
        };
        self.csv.push_str(&sample.csv_row());
        let robot = &self.scenario.robot;
        let colliding = robot_collides(&self.plant.world, self.plant.pose, robot.length, robot.width);
        self.feed.push(&sample, colliding);
    }

    fn send_down(&mut self, t: f64, body: FrameBody) {
        let frame = Frame::new(self.down_seq.next(), body);
        self.down.send(t, encode_frame(&frame).expect("command frames fit"));
    }

    fn apply_command(&mut self, t: f64, kind: CommandKind) {
        self.applied.push(TimedCommand { t, kind });
        match kind {
            CommandKind::Estop => {
                self.auto.estopped = true;
                self.auto.nominal.clear();
                self.send_down(t, FrameBody::EStop);
            }
            CommandKind::Resume => {
                self.auto.estopped = false;
                self.send_down(t, FrameBody::Resume);
            }
            CommandKind::Lock => self.send_down(t, FrameBody::Lock),
            CommandKind::Unlock => self.send_down(t, FrameBody::Unlock),
            CommandKind::Goal { x, y } => {
                self.auto.goals.push([x, y]);
                self.auto.goal_index = Some(self.auto.goals.len() - 1);
                self.auto.path = None;
                self.auto.nominal.clear();
            }
            CommandKind::Diag => self.auto.diag_requested = true,
        }
    }

    fn autonomy_tick(&mut self, t: f64) {
        while self.scripted.front().is_some_and(|c| c.t <= t) {
            let c = self.scripted.pop_front().expect("front checked");
            self.apply_command(t, c.kind);
        }
        while let Some(kind) = self.pending.pop_front() {
            self.apply_command(t, kind);
        }

        let gyro = self.plant.gyro();
        self.process_status(gyro);
        if self.step >= self.next_gps {
            let z = self.plant.gps();
            self.auto.ekf.update_gps(z);
            self.next_gps += self.per_gps;
        }

        let truth = self.plant.pose;
        let est = self.auto.ekf.state;
        let dr = self.auto.dead_reckoning;
        self.stats.samples += 1;
        self.stats.ekf_sq += (est.x - truth.x).powi(2) + (est.y - truth.y).powi(2);
        self.stats.dr_sq += (dr.x - truth.x).powi(2) + (dr.y - truth.y).powi(2);

        let twist = match self.scenario.script {
            Some(script) => script.twist_at(t),
            None => self.navigate(t),
        };
        let twist = if self.auto.estopped { Twist2D::ZERO } else { twist };
        let wheels = wheels_from_twist_clamped(twist, &self.scenario.robot);
        self.send_down(t, FrameBody::CmdVel(CmdVelPayload::from_wheels(wheels)));
    }

    fn process_status(&mut self, gyro: f64) {
        let status_period = self.scenario.firmware.status_every as f64 / self.scenario.rates.control_hz;
        let tick_angle = self.scenario.robot.tick_angle();
        let frames = std::mem::take(&mut self.auto.inbox);
        for f in frames {
            if f.kind != FrameKind::Status {
                continue;
            }
            let Ok(FrameBody::Status(st)) = f.body() else { continue };
            self.auto.status_frames += 1;
            self.auto.status_mode = st.mode;
            self.auto.status_lock = st.lock;
            self.auto.status_battery_mv = st.battery_mv as u32;
            let (l, r) = (st.left_ticks as i64, st.right_ticks as i64);
            if let Some((seq, l0, r0)) = self.auto.last_status {
                let gap = f.seq.wrapping_sub(seq);
                if gap == 0 {
                    continue;
                }
                let dt = gap as f64 * status_period;
                let wheels = WheelSpeeds::new((l - l0) as f64 * tick_angle / dt, (r - r0) as f64 * tick_angle / dt);
                let odom = twist_from_wheels(wheels, &self.scenario.robot);
                self.auto.ekf.predict_with_gyro(odom, Some(gyro), dt);
                self.auto.dead_reckoning = integrate_pose(self.auto.dead_reckoning, odom, dt);
            }
            self.auto.last_status = Some((f.seq, l, r));
        }
    }

    fn update_map(&mut self) {
        let a = &mut self.auto;
        let est = a.ekf.state;
        let scan = self.plant.scan();
        a.grid.update(est, &scan, &self.scenario.lidar);
        let mut freed = false;
        let mut added = Vec::new();
        for (i, was) in a.occupied.iter_mut().enumerate() {
            let now = a.grid.is_occupied(i);
            if now != *was {
                if now {
                    added.push(i);
                } else {
                    freed = true;
                }
                *was = now;
            }
        }
        if freed {
            a.costmap = inflate(&a.grid);
        } else {
            for i in added {
                a.costmap.stamp_lethal(i, &a.kernel);
            }
        }
    }

    fn navigate(&mut self, t: f64) -> Twist2D {
        self.update_map();
        self.auto.detections = self.plant.detections();
        self.auto.tracker.update(t, &self.auto.detections);

        let cfg = self.scenario.planner;
        let a = &mut self.auto;
        let est = a.ekf.state;
        let Some(gi) = a.goal_index else {
            return Twist2D::ZERO;
        };
        let goal = a.goals[gi];
        if est.distance_to(goal[0], goal[1]) <= cfg.goal_tolerance {
            a.goal_index = (gi + 1 < a.goals.len()).then_some(gi + 1);
            a.path = None;
            a.nominal.clear();
            return Twist2D::ZERO;
        }

        let stale = match &a.path {
            None => true,
            Some(p) => {
                let off = crate::planning::nearest_on_polyline(&p.waypoints, est.x, est.y)
                    .map_or(f64::INFINITY, |n| n.distance);
                off > cfg.replan_distance
                    || p.waypoints.iter().any(|w| a.costmap.cost_world(w[0], w[1]) == COST_LETHAL)
            }
        };
        if stale {
            a.path = match plan_route(&a.costmap, [est.x, est.y], goal, &cfg.astar) {
                Ok(p) => {
                    a.path_id += 1;
                    a.replans += 1;
                    Some(p)
                }
                Err(_) => None,
            };
        }
        let Some(path) = &a.path else {
            a.nominal.clear();
            return Twist2D::ZERO;
        };

        let local = thin(&path.window(est.x, est.y, cfg.lookahead), 4);
        let tracks = a.tracker.predict(t);
        let out = mppi_plan(est, &a.nominal, &local, &a.costmap, &tracks, &cfg.mppi, &mut a.mppi_rng);
        a.nominal = out.nominal;
        a.diagnostics = out.diagnostics;
        out.command
    }

    fn telemetry_tick(&mut self, t: f64, k: u64) -> String {
        let a = &self.auto;
        let map_delta = (k % self.per_map == 0).then(|| {
            self.map_seq += 1;
            a.grid.snapshot(self.map_seq)
        });
        let diag = a.diag_requested.then(|| {
            Diagnostics::new(
                &self.firmware.counters,
                &self.autonomy_rx.stats(),
                &self.firmware_rx.stats(),
                a.ekf.skipped_updates,
            )
        });
        let record = TelemetryRecord {
            v: SCHEMA_VERSION,
            t,
            pose_est: a.ekf.state,
            pose_true: self.plant.pose,
            twist: self.plant.twist,
            battery_mv: a.status_battery_mv,
            mode: a.status_mode,
            lock: LockState::from_code(a.status_lock).name().into(),
            goal: a.goal_index.map(|i| a.goals[i]),
            planner: PlannerSummary {
                mppi: a.diagnostics,
                replans: a.replans,
                path_id: a.path_id,
                path: a.path.as_ref().map(|p| p.waypoints.clone()).unwrap_or_default(),
                goal_index: a.goal_index,
            },
            detections: a.detections.clone(),
            map_seq: self.map_seq,
            map_delta,
            diag,
        };
        self.auto.diag_requested = false;
        let line = self.publisher.publish(&record).expect("simulation time never decreases");
        self.telemetry.push_str(&line);
        line
    }
}

/// A* from the estimate to the goal, stepping out of lethal cells first.
fn plan_route(c: &Costmap, start: [f64; 2], goal: [f64; 2], p: &crate::planning::AstarParams) -> Result<PlannedPath, PlanError> {
    let geo = c.geometry;
    let escape = |pt: [f64; 2]| {
        let cell = geo.cell_of(pt[0], pt[1]);
        if c.cost_at(cell).is_some_and(|v| v != COST_LETHAL) {
            Some(pt)
        } else {
            nearest_free_cell(c, cell, 10).map(|cl| geo.center(cl))
        }
    };
    let s = escape(start).ok_or(PlanError::InvalidEndpoint("start"))?;
    let g = escape(goal).ok_or(PlanError::InvalidEndpoint("goal"))?;
    let mut path = astar(c, s, g, p)?;
    // end exactly on the requested goal
    if let Some(last) = path.waypoints.last_mut() {
        if g == goal {
            *last = goal;
        }
    }
    Ok(path)
}

/// Keeps every `n`th waypoint plus the last.
fn thin(p: &PlannedPath, n: usize) -> PlannedPath {
    let last = p.waypoints.len() - 1;
    PlannedPath::from_points(
        p.waypoints
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n == 0 || *i == last)
            .map(|(_, w)| *w)
            .collect(),
    )
}

/// Runs a scenario headless with a recorded command log.
pub fn run(scenario: &Scenario, commands: &[TimedCommand]) -> RunOutputs {
    Simulation::with_commands(scenario.clone(), commands).finish()
}
