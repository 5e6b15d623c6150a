//! Global route search on the costmap, constant-velocity obstacle tracks,
//! and the MPPI local controller.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{integrate_pose, Pose2D, Twist2D};
use crate::mapping::{Cell, Costmap, COST_LETHAL, COST_MAX_INFLATED};
use crate::plant::{footprint_corners, quad_overlaps_rect, Detection, ObjectClass, Rect};
use crate::rng::{self, gaussian, Stream};

/// Path costs are integers: one cell length is this many units. Integer
/// arithmetic keeps A* and any reference search bit-for-bit comparable.
pub const UNITS_PER_CELL: u64 = 1_000_000;
/// √2 cells, rounded up so the Euclidean heuristic stays admissible.
pub const DIAGONAL_UNITS: u64 = 1_414_214;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AstarParams {
    /// Weight of the normalized inflation cost, in cell lengths.
    pub alpha: f64,
}

impl Default for AstarParams {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("no path between start and goal")]
    NoPath,
    #[error("{0} lies in a lethal or off-map cell")]
    InvalidEndpoint(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub waypoints: Vec<[f64; 2]>,
    #[serde(skip)]
    pub cells: Vec<Cell>,
    /// Length in m plus the inflation penalty, in the same unit.
    pub cost: f64,
    #[serde(skip)]
    pub cost_units: u64,
}

impl PlannedPath {
    pub fn from_points(waypoints: Vec<[f64; 2]>) -> Self {
        let cost = polyline_length(&waypoints);
        Self {
            waypoints,
            cells: Vec::new(),
            cost,
            cost_units: 0,
        }
    }

    pub fn goal(&self) -> [f64; 2] {
        *self.waypoints.last().expect("path is never empty")
    }

    /// The part of the path from the point nearest `(x, y)` onward, cut off
    /// after `ahead` metres.
    pub fn window(&self, x: f64, y: f64, ahead: f64) -> PlannedPath {
        let Some(n) = nearest_on_polyline(&self.waypoints, x, y) else {
            return self.clone();
        };
        let mut pts = vec![n.point];
        let mut left = ahead;
        let mut prev = n.point;
        for &w in &self.waypoints[n.segment + 1..] {
            let d = (w[0] - prev[0]).hypot(w[1] - prev[1]);
            if d >= left {
                let t = left / d;
                pts.push([prev[0] + t * (w[0] - prev[0]), prev[1] + t * (w[1] - prev[1])]);
                return PlannedPath::from_points(pts);
            }
            left -= d;
            pts.push(w);
            prev = w;
        }
        PlannedPath::from_points(pts)
    }
}

pub fn polyline_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub distance: f64,
    pub point: [f64; 2],
    /// Index of the segment start; 0 for a single-point polyline.
    pub segment: usize,
    /// Direction of that segment, or `None` for a single point.
    pub heading: Option<f64>,
}

/// Closest point on a polyline. Ties go to the earliest segment.
pub fn nearest_on_polyline(points: &[[f64; 2]], x: f64, y: f64) -> Option<Nearest> {
    match points {
        [] => None,
        [p] => Some(Nearest {
            distance: (x - p[0]).hypot(y - p[1]),
            point: *p,
            segment: 0,
            heading: None,
        }),
        _ => {
            let mut best: Option<Nearest> = None;
            for (i, w) in points.windows(2).enumerate() {
                let (a, b) = (w[0], w[1]);
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [a[0] + t * dx, a[1] + t * dy];
                // perpendicular distance via the cross product is exact for
                // points on the segment line
                let d = if t > 0.0 && t < 1.0 {
                    ((x - a[0]) * dy - (y - a[1]) * dx).abs() / len2.sqrt()
                } else {
                    (x - q[0]).hypot(y - q[1])
                };
                if best.map_or(true, |b| d < b.distance) {
                    best = Some(Nearest {
                        distance: d,
                        point: q,
                        segment: i,
                        heading: (len2 > 0.0).then(|| dy.atan2(dx)),
                    });
                }
            }
            best
        }
    }
}

/// Squared distance to the nearest polyline point; cheaper inner loop for
/// rollout scoring.
fn dist2_to_polyline(points: &[[f64; 2]], x: f64, y: f64) -> f64 {
    if points.len() == 1 {
        return (x - points[0][0]).powi(2) + (y - points[0][1]).powi(2);
    }
    let mut best = f64::INFINITY;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (ex, ey) = (x - a[0] - t * dx, y - a[1] - t * dy);
        best = best.min(ex * ex + ey * ey);
    }
    best
}

/// Penalty for entering a cell of the given (non-lethal) cost.
pub fn cell_penalty_units(cost: u8, alpha: f64) -> u64 {
    (alpha * UNITS_PER_CELL as f64 * cost as f64 / COST_MAX_INFLATED as f64).round() as u64
}

pub fn step_units(dc: i64, dr: i64) -> u64 {
    if dc != 0 && dr != 0 {
        DIAGONAL_UNITS
    } else {
        UNITS_PER_CELL
    }
}

/// ⌊euclidean cell distance · 10⁶⌋, computed exactly.
pub fn heuristic_units(a: Cell, b: Cell) -> u64 {
    let (dc, dr) = ((a.col - b.col) as i128, (a.row - b.row) as i128);
    isqrt((dc * dc + dr * dr) as u128 * (UNITS_PER_CELL as u128).pow(2)) as u64
}

fn isqrt(n: u128) -> u128 {
    let mut x = (n as f64).sqrt() as u128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

const NEIGHBORS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Expansion record reported to the observer passed to [`astar_cells`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expansion {
    pub cell: Cell,
    pub g: u64,
    pub h: u64,
}

/// 8-connected A* over costmap cells. Returns the cell path and its cost in
/// units. Ties on f break on h, then on cell index.
pub fn astar_cells(
    c: &Costmap,
    start: Cell,
    goal: Cell,
    p: &AstarParams,
    mut observe: impl FnMut(Expansion),
) -> Result<(Vec<Cell>, u64), PlanError> {
    let geo = c.geometry;
    let s = geo.index(start).filter(|&i| c.cost[i] != COST_LETHAL).ok_or(PlanError::InvalidEndpoint("start"))?;
    let g_idx = geo.index(goal).filter(|&i| c.cost[i] != COST_LETHAL).ok_or(PlanError::InvalidEndpoint("goal"))?;

    let n = geo.len();
    let mut g = vec![u64::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[s] = 0;
    let h0 = heuristic_units(start, goal);
    open.push(Reverse((h0, h0, s)));

    while let Some(Reverse((_, h, i))) = open.pop() {
        if closed[i] {
            continue;
        }
        closed[i] = true;
        let cell = geo.cell_at(i);
        observe(Expansion { cell, g: g[i], h });
        if i == g_idx {
            let mut cells = vec![cell];
            let mut j = i;
            while parent[j] != usize::MAX {
                j = parent[j];
                cells.push(geo.cell_at(j));
            }
            cells.reverse();
            return Ok((cells, g[i]));
        }
        for (dc, dr) in NEIGHBORS {
            let nc = Cell {
                col: cell.col + dc,
                row: cell.row + dr,
            };
            let Some(ni) = geo.index(nc) else { continue };
            if closed[ni] || c.cost[ni] == COST_LETHAL {
                continue;
            }
            let tentative = g[i] + step_units(dc, dr) + cell_penalty_units(c.cost[ni], p.alpha);
            if tentative < g[ni] {
                g[ni] = tentative;
                parent[ni] = i;
                let nh = heuristic_units(nc, goal);
                open.push(Reverse((tentative + nh, nh, ni)));
            }
        }
    }
    Err(PlanError::NoPath)
}

/// A* between world points; waypoints are the centres of the path cells.
pub fn astar(c: &Costmap, start: [f64; 2], goal: [f64; 2], p: &AstarParams) -> Result<PlannedPath, PlanError> {
    let geo = c.geometry;
    let (cells, units) = astar_cells(c, geo.cell_of(start[0], start[1]), geo.cell_of(goal[0], goal[1]), p, |_| {})?;
    Ok(PlannedPath {
        waypoints: cells.iter().map(|&cell| geo.center(cell)).collect(),
        cells,
        cost: units as f64 / UNITS_PER_CELL as f64 * geo.resolution,
        cost_units: units,
    })
}

/// Closest non-lethal cell within `max_cells` (Chebyshev rings, scanned in
/// index order), used when an estimate drifts into a lethal cell.
pub fn nearest_free_cell(c: &Costmap, from: Cell, max_cells: i64) -> Option<Cell> {
    for ring in 0..=max_cells {
        let mut best: Option<(i64, Cell)> = None;
        for dr in -ring..=ring {
            for dc in -ring..=ring {
                if dc.abs().max(dr.abs()) != ring {
                    continue;
                }
                let cell = Cell {
                    col: from.col + dc,
                    row: from.row + dr,
                };
                if c.cost_at(cell).is_some_and(|v| v != COST_LETHAL) {
                    let d2 = dc * dc + dr * dr;
                    if best.map_or(true, |(b, _)| d2 < b) {
                        best = Some((d2, cell));
                    }
                }
            }
        }
        if let Some((_, cell)) = best {
            return Some(cell);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedObstacle {
    pub id: u32,
    pub class: ObjectClass,
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub footprint: [f64; 2],
    pub history_len: usize,
}

impl TrackedObstacle {
    pub fn extrapolate(&self, tau: f64) -> [f64; 2] {
        [self.center[0] + self.velocity[0] * tau, self.center[1] + self.velocity[1] * tau]
    }

    /// Footprint at `tau`, grown by `margin` on every side.
    pub fn rect_at(&self, tau: f64, margin: f64) -> Rect {
        let c = self.extrapolate(tau);
        Rect::centered(c[0], c[1], self.footprint[0] + 2.0 * margin, self.footprint[1] + 2.0 * margin)
    }
}

/// Observation history of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackHistory {
    pub id: u32,
    pub class: ObjectClass,
    pub footprint: [f64; 2],
    /// `(t, center)` with strictly increasing `t`.
    pub samples: Vec<(f64, [f64; 2])>,
}

/// Constant-velocity tracks: velocity is the finite difference of the last
/// two observations, zero with fewer than two.
pub fn predict_tracks(history: &[TrackHistory]) -> Vec<TrackedObstacle> {
    history
        .iter()
        .filter_map(|h| {
            let &(t1, c1) = h.samples.last()?;
            let velocity = match h.samples.len() {
                0 | 1 => [0.0, 0.0],
                n => {
                    let (t0, c0) = h.samples[n - 2];
                    let dt = t1 - t0;
                    [(c1[0] - c0[0]) / dt, (c1[1] - c0[1]) / dt]
                }
            };
            Some(TrackedObstacle {
                id: h.id,
                class: h.class,
                center: c1,
                velocity,
                footprint: h.footprint,
                history_len: h.samples.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Association gate, m.
    pub gate: f64,
    /// Tracks unseen for longer than this are dropped, s.
    pub max_age: f64,
    /// Minimum time between the two observations used for velocity, s.
    /// Differencing consecutive noisy detections amplifies their noise.
    pub baseline: f64,
    pub max_history: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            gate: 1.0,
            max_age: 1.0,
            baseline: 0.5,
            max_history: 32,
        }
    }
}

/// Associates anonymous detections into tracks: greedy nearest neighbour of
/// the same class inside the gate, in detection order.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub params: TrackerParams,
    tracks: Vec<TrackHistory>,
    next_id: u32,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn update(&mut self, t: f64, detections: &[Detection]) {
        let predicted: Vec<[f64; 2]> = self
            .velocity_histories()
            .iter()
            .zip(predict_tracks(&self.velocity_histories()))
            .map(|(h, tr)| tr.extrapolate(t - h.samples.last().map_or(t, |s| s.0)))
            .collect();
        let mut taken = vec![false; self.tracks.len()];
        for d in detections {
            let best = self
                .tracks
                .iter()
                .enumerate()
                .filter(|(i, tr)| !taken[*i] && tr.class == d.class)
                .map(|(i, _)| (i, (predicted[i][0] - d.center[0]).hypot(predicted[i][1] - d.center[1])))
                .filter(|&(_, dist)| dist <= self.params.gate)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    let tr = &mut self.tracks[i];
                    if tr.samples.last().map_or(true, |s| t > s.0) {
                        tr.samples.push((t, d.center));
                    }
                    tr.footprint = d.footprint;
                    if tr.samples.len() > self.params.max_history {
                        tr.samples.remove(0);
                    }
                }
                None => {
                    self.tracks.push(TrackHistory {
                        id: self.next_id,
                        class: d.class,
                        footprint: d.footprint,
                        samples: vec![(t, d.center)],
                    });
                    taken.push(true);
                    self.next_id += 1;
                }
            }
        }
        let max_age = self.params.max_age;
        self.tracks.retain(|tr| tr.samples.last().is_some_and(|s| t - s.0 <= max_age));
    }

    /// Two-point histories spanning at least the baseline where available.
    fn velocity_histories(&self) -> Vec<TrackHistory> {
        self.tracks
            .iter()
            .map(|tr| {
                let mut samples = Vec::with_capacity(2);
                if let Some(&last) = tr.samples.last() {
                    let prev = tr.samples[..tr.samples.len() - 1]
                        .iter()
                        .rev()
                        .find(|s| last.0 - s.0 >= self.params.baseline)
                        .or(tr.samples.first().filter(|s| s.0 < last.0));
                    samples.extend(prev.copied());
                    samples.push(last);
                }
                TrackHistory { samples, ..tr.clone() }
            })
            .collect()
    }

    /// Tracks with centres advanced to time `t`.
    pub fn predict(&self, t: f64) -> Vec<TrackedObstacle> {
        let hist = self.velocity_histories();
        predict_tracks(&hist)
            .into_iter()
            .zip(&self.tracks)
            .map(|(mut tr, full)| {
                let age = t - full.samples.last().map_or(t, |s| s.0);
                tr.center = tr.extrapolate(age);
                tr.history_len = full.samples.len();
                tr
            })
            .collect()
    }
}

/// Cost added for every rollout step whose footprint touches a lethal cell
/// or a predicted obstacle.
pub const HARD_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MppiParams {
    pub k: usize,
    pub h: usize,
    pub dt: f64,
    pub lambda: f64,
    pub sigma_v: f64,
    pub sigma_omega: f64,
    pub w_obs: f64,
    pub w_path: f64,
    pub w_goal: f64,
    pub w_ctrl: f64,
    pub v_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
    /// Robot footprint (length, width) checked against lethal cells, m.
    pub footprint: [f64; 2],
    /// Clearance kept from predicted obstacle footprints, m.
    pub track_margin: f64,
}

impl Default for MppiParams {
    fn default() -> Self {
        Self {
            k: 256,
            h: 30,
            dt: 0.1,
            lambda: 1.0,
            sigma_v: 0.3,
            sigma_omega: 0.5,
            w_obs: 10.0,
            w_path: 2.0,
            w_goal: 5.0,
            w_ctrl: 0.1,
            v_bounds: [-0.2, 0.8],
            omega_bounds: [-1.5, 1.5],
            footprint: [0.55, 0.54],
            track_margin: 0.15,
        }
    }
}

impl MppiParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 || self.h == 0 {
            return Err("mppi.k and mppi.h must be at least 1".into());
        }
        if !(self.dt > 0.0) || !(self.lambda > 0.0) {
            return Err("mppi.dt and mppi.lambda must be positive".into());
        }
        if !(self.sigma_v >= 0.0 && self.sigma_omega >= 0.0) {
            return Err("mppi sigmas must be >= 0".into());
        }
        if ![self.w_obs, self.w_path, self.w_goal, self.w_ctrl].iter().all(|w| *w >= 0.0) {
            return Err("mppi weights must be >= 0".into());
        }
        if !(self.v_bounds[0] <= self.v_bounds[1] && self.omega_bounds[0] <= self.omega_bounds[1]) {
            return Err("mppi bounds must be ordered [min, max]".into());
        }
        Ok(())
    }

    fn clamp(&self, u: Twist2D) -> Twist2D {
        Twist2D {
            v: u.v.clamp(self.v_bounds[0], self.v_bounds[1]),
            omega: u.omega.clamp(self.omega_bounds[0], self.omega_bounds[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MppiDiagnostics {
    pub min_cost: f64,
    pub mean_cost: f64,
    /// Effective sample size 1/Σwᵢ².
    pub ess: f64,
    pub safe_stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiOutput {
    pub command: Twist2D,
    /// Receding-horizon warm start for the next call.
    pub nominal: Vec<Twist2D>,
    pub diagnostics: MppiDiagnostics,
}

/// Normalized importance weights exp(−(cᵢ − min c)/λ).
pub fn mppi_weights(costs: &[f64], lambda: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-(c - min) / lambda).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Perturbed, clamped control sequence of rollout `k`.
pub fn sample_rollout_controls(nominal: &[Twist2D], p: &MppiParams, base_seed: u64, k: usize) -> Vec<Twist2D> {
    let mut r = rng::keyed(base_seed, Stream::Mppi as u64, k as u64);
    nominal
        .iter()
        .map(|u| {
            let dv = gaussian(&mut r, p.sigma_v);
            let dw = gaussian(&mut r, p.sigma_omega);
            p.clamp(Twist2D::new(u.v + dv, u.omega + dw))
        })
        .collect()
}

/// Points along the footprint outline, spaced at most one cell apart.
fn outline_offsets(footprint: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let corners = footprint_corners(Pose2D::default(), footprint[0], footprint[1]);
    let mut out = Vec::new();
    for i in 0..4 {
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        let n = ((a[0] - b[0]).hypot(a[1] - b[1]) / spacing).ceil().max(1.0) as usize;
        for j in 0..n {
            let t = j as f64 / n as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

struct RolloutScene<'a> {
    path: &'a [[f64; 2]],
    goal: [f64; 2],
    costmap: &'a Costmap,
    tracks: &'a [TrackedObstacle],
    outline: Vec<[f64; 2]>,
}

impl RolloutScene<'_> {
    fn collides(&self, pose: Pose2D, tau: f64, p: &MppiParams) -> bool {
        let (s, c) = pose.theta.sin_cos();
        let hits_map = self.outline.iter().any(|o| {
            let (x, y) = (pose.x + o[0] * c - o[1] * s, pose.y + o[0] * s + o[1] * c);
            self.costmap.cost_world(x, y) == COST_LETHAL
        });
        if hits_map {
            return true;
        }
        if self.tracks.is_empty() {
            return false;
        }
        let quad = footprint_corners(pose, p.footprint[0], p.footprint[1]);
        self.tracks.iter().any(|t| quad_overlaps_rect(&quad, &t.rect_at(tau, p.track_margin)))
    }

    fn cost(&self, start: Pose2D, controls: &[Twist2D], p: &MppiParams) -> f64 {
        let mut pose = start;
        let mut total = 0.0;
        for (i, u) in controls.iter().enumerate() {
            pose = integrate_pose(pose, *u, p.dt);
            let tau = (i + 1) as f64 * p.dt;
            if self.collides(pose, tau, p) {
                total += HARD_PENALTY;
            } else {
                let cell = self.costmap.cost_world(pose.x, pose.y) as f64;
                total += p.w_obs * cell / COST_MAX_INFLATED as f64;
            }
            total += p.w_path * dist2_to_polyline(self.path, pose.x, pose.y);
            total += p.w_ctrl * (u.v * u.v + u.omega * u.omega);
        }
        total + p.w_goal * ((pose.x - self.goal[0]).powi(2) + (pose.y - self.goal[1]).powi(2))
    }
}

/// Total cost of one rollout; exposed for diagnostics and tests.
pub fn rollout_cost(
    state: Pose2D,
    controls: &[Twist2D],
    path: &PlannedPath,
    c: &Costmap,
    tracks: &[TrackedObstacle],
    p: &MppiParams,
) -> f64 {
    let scene = RolloutScene {
        path: &path.waypoints,
        goal: path.goal(),
        costmap: c,
        tracks,
        outline: outline_offsets(p.footprint, c.geometry.resolution),
    };
    scene.cost(state, controls, p)
}

/// One MPPI iteration. `nominal` is resized to `p.h` (zero-padded) before
/// sampling. Rollout `k` draws its noise from its own stream keyed by a
/// single value taken from `rng`, and results are reduced in index order.
pub fn mppi_plan<R: RngCore + ?Sized>(
    state: Pose2D,
    nominal: &[Twist2D],
    path: &PlannedPath,
    c: &Costmap,
    tracks: &[TrackedObstacle],
    p: &MppiParams,
    rng: &mut R,
) -> MppiOutput {
    let mut base: Vec<Twist2D> = nominal.iter().take(p.h).map(|u| p.clamp(*u)).collect();
    base.resize(p.h, Twist2D::ZERO);
    let seed = rng.next_u64();
    let scene = RolloutScene {
        path: &path.waypoints,
        goal: path.goal(),
        costmap: c,
        tracks,
        outline: outline_offsets(p.footprint, c.geometry.resolution),
    };

    let samples: Vec<Vec<Twist2D>> = (0..p.k).map(|k| sample_rollout_controls(&base, p, seed, k)).collect();
    let costs: Vec<f64> = samples.iter().map(|u| scene.cost(state, u, p)).collect();
    let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;

    if min_cost >= HARD_PENALTY {
        return MppiOutput {
            command: Twist2D::ZERO,
            nominal: vec![Twist2D::ZERO; p.h],
            diagnostics: MppiDiagnostics {
                min_cost,
                mean_cost,
                ess: 0.0,
                safe_stop: true,
            },
        };
    }

    let weights = mppi_weights(&costs, p.lambda);
    let mut updated = base.clone();
    for (h, u) in updated.iter_mut().enumerate() {
        let (mut dv, mut dw) = (0.0, 0.0);
        for (w, s) in weights.iter().zip(&samples) {
            dv += w * (s[h].v - base[h].v);
            dw += w * (s[h].omega - base[h].omega);
        }
        *u = p.clamp(Twist2D::new(base[h].v + dv, base[h].omega + dw));
    }
    let command = updated[0];
    let last = *updated.last().expect("h >= 1");
    updated.remove(0);
    updated.push(last);
    MppiOutput {
        command,
        nominal: updated,
        diagnostics: MppiDiagnostics {
            min_cost,
            mean_cost,
            ess: 1.0 / weights.iter().map(|w| w * w).sum::<f64>(),
            safe_stop: false,
        },
    }
}
