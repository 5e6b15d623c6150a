//! Log-odds occupancy grid built from LiDAR scans, and the inflated costmap
//! the planners consume.

use serde::{Deserialize, Serialize};

use crate::kinematics::Pose2D;
use crate::plant::LidarParams;

pub const COST_FREE: u8 = 0;
pub const COST_LETHAL: u8 = 255;
/// Highest non-lethal cost.
pub const COST_MAX_INFLATED: u8 = 254;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub resolution: f64,
    pub l_occ: f64,
    pub l_free: f64,
    pub l_max: f64,
    pub occ_threshold: f64,
    /// Robot half-width plus safety margin, m.
    pub inflation_radius: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            l_occ: 0.85,
            l_free: -0.40,
            l_max: 10.0,
            occ_threshold: 2.0,
            inflation_radius: 0.27 + 0.1,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.resolution > 0.0) {
            return Err("map.resolution must be positive".into());
        }
        if !(self.l_occ > 0.0 && self.l_free < 0.0 && self.l_max > 0.0) {
            return Err("map log-odds increments need l_occ > 0, l_free < 0, l_max > 0".into());
        }
        if !(self.inflation_radius >= 0.0) {
            return Err("map.inflation_radius must be >= 0".into());
        }
        Ok(())
    }
}

/// Integer cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub col: i64,
    pub row: i64,
}

/// Grid geometry shared by the occupancy grid and the costmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// World position of the outer corner of cell (0, 0), m.
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn covering(min: [f64; 2], max: [f64; 2], resolution: f64) -> Self {
        Self {
            origin: min,
            resolution,
            width: ((max[0] - min[0]) / resolution).ceil().max(1.0) as usize,
            height: ((max[1] - min[1]) / resolution).ceil().max(1.0) as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Cell {
        Cell {
            col: ((x - self.origin[0]) / self.resolution).floor() as i64,
            row: ((y - self.origin[1]) / self.resolution).floor() as i64,
        }
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.col >= 0 && c.row >= 0 && (c.col as usize) < self.width && (c.row as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        self.contains(c).then(|| c.row as usize * self.width + c.col as usize)
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell {
            col: (index % self.width) as i64,
            row: (index / self.width) as i64,
        }
    }

    pub fn center(&self, c: Cell) -> [f64; 2] {
        [
            self.origin[0] + (c.col as f64 + 0.5) * self.resolution,
            self.origin[1] + (c.row as f64 + 0.5) * self.resolution,
        ]
    }
}

/// Cells on the integer line from `a` to `b`, both included.
pub fn line_cells(a: Cell, b: Cell) -> Vec<Cell> {
    let dx = (b.col - a.col).abs();
    let dy = -(b.row - a.row).abs();
    let sx = if a.col < b.col { 1 } else { -1 };
    let sy = if a.row < b.row { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (a.col, a.row);
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push(Cell { col: x, row: y });
        if x == b.col && y == b.row {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub params: GridParams,
    pub log_odds: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(geometry: GridGeometry, params: GridParams) -> Self {
        Self {
            geometry,
            params,
            log_odds: vec![0.0; geometry.len()],
        }
    }

    pub fn value(&self, c: Cell) -> Option<f64> {
        self.geometry.index(c).map(|i| self.log_odds[i])
    }

    pub fn is_occupied(&self, index: usize) -> bool {
        self.log_odds[index] > self.params.occ_threshold
    }

    fn add(&mut self, c: Cell, delta: f64) {
        if let Some(i) = self.geometry.index(c) {
            let l = self.params.l_max;
            self.log_odds[i] = (self.log_odds[i] + delta).clamp(-l, l);
        }
    }

    /// Integrates one scan taken at `pose`.
    ///
    /// Cells between the sensor and each beam endpoint get `l_free`; the
    /// endpoint cell gets `l_occ` unless the beam reported `max_range`, in
    /// which case the whole ray, endpoint included, is free. Rays are clipped
    /// where they leave the grid.
    pub fn update(&mut self, pose: Pose2D, ranges: &[f64], lidar: &LidarParams) {
        let origin = self.geometry.cell_of(pose.x, pose.y);
        if !self.geometry.contains(origin) {
            return;
        }
        for (k, &range) in ranges.iter().enumerate() {
            let angle = pose.theta + lidar.beam_offset(k);
            let (s, c) = angle.sin_cos();
            let end = self.geometry.cell_of(pose.x + range * c, pose.y + range * s);
            let no_hit = range >= lidar.max_range;
            let cells = line_cells(origin, end);
            let (last, traversed) = cells.split_last().expect("line has at least one cell");
            for &cell in traversed {
                if !self.geometry.contains(cell) {
                    break;
                }
                self.add(cell, self.params.l_free);
            }
            if no_hit {
                if traversed.iter().all(|&c| self.geometry.contains(c)) {
                    self.add(*last, self.params.l_free);
                }
            } else if traversed.iter().all(|&c| self.geometry.contains(c)) {
                self.add(*last, self.params.l_occ);
            }
        }
    }

    pub fn occupied_count(&self) -> usize {
        (0..self.log_odds.len()).filter(|&i| self.is_occupied(i)).count()
    }

    /// Ternary, run-length encoded snapshot for telemetry.
    pub fn snapshot(&self, id: u32) -> GridSnapshot {
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for (i, &l) in self.log_odds.iter().enumerate() {
            let code = if self.is_occupied(i) {
                CELL_OCCUPIED
            } else if l < 0.0 {
                CELL_FREE
            } else {
                CELL_UNKNOWN
            };
            match runs.last_mut() {
                Some((c, n)) if *c == code => *n += 1,
                _ => runs.push((code, 1)),
            }
        }
        GridSnapshot {
            id,
            origin: self.geometry.origin,
            resolution: self.geometry.resolution,
            width: self.geometry.width,
            height: self.geometry.height,
            runs,
        }
    }
}

/// Functional form of [`OccupancyGrid::update`].
pub fn update_grid(g: &OccupancyGrid, pose: Pose2D, ranges: &[f64], lidar: &LidarParams) -> OccupancyGrid {
    let mut next = g.clone();
    next.update(pose, ranges, lidar);
    next
}

pub const CELL_FREE: u8 = 0;
pub const CELL_UNKNOWN: u8 = 1;
pub const CELL_OCCUPIED: u8 = 2;

/// Row-major run-length encoded grid: `runs` is a list of `[code, count]`
/// with codes 0 = free, 1 = unknown, 2 = occupied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub id: u32,
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub runs: Vec<(u8, u32)>,
}

impl GridSnapshot {
    pub fn decode(&self) -> Vec<u8> {
        self.runs
            .iter()
            .flat_map(|&(code, n)| std::iter::repeat(code).take(n as usize))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub geometry: GridGeometry,
    pub cost: Vec<u8>,
    pub inflation_radius: f64,
}

impl Costmap {
    pub fn empty(geometry: GridGeometry, inflation_radius: f64) -> Self {
        Self {
            geometry,
            cost: vec![COST_FREE; geometry.len()],
            inflation_radius,
        }
    }

    pub fn cost_at(&self, c: Cell) -> Option<u8> {
        self.geometry.index(c).map(|i| self.cost[i])
    }

    /// Cost at a world point; outside the grid counts as lethal.
    pub fn cost_world(&self, x: f64, y: f64) -> u8 {
        self.cost_at(self.geometry.cell_of(x, y)).unwrap_or(COST_LETHAL)
    }

    pub fn is_lethal(&self, c: Cell) -> bool {
        self.cost_at(c).map_or(true, |v| v == COST_LETHAL)
    }

    /// Marks `index` lethal and spreads the inflation kernel around it.
    pub fn stamp_lethal(&mut self, index: usize, kernel: &[(i64, i64, u8)]) {
        let center = self.geometry.cell_at(index);
        for &(dc, dr, cost) in kernel {
            let c = Cell {
                col: center.col + dc,
                row: center.row + dr,
            };
            if let Some(i) = self.geometry.index(c) {
                if cost > self.cost[i] {
                    self.cost[i] = cost;
                }
            }
        }
    }
}

/// Cost as a function of centre distance from a lethal cell: 255 at the
/// cell, then linear from 254 down to 1 at `radius`, 0 beyond.
pub fn inflation_cost(distance: f64, radius: f64) -> u8 {
    if distance <= 0.0 {
        return COST_LETHAL;
    }
    if distance > radius + 1e-12 {
        return COST_FREE;
    }
    (1.0 + 253.0 * (1.0 - distance / radius)).round() as u8
}

/// Offsets within `radius` of a cell and their inflation cost.
pub fn inflation_kernel(radius: f64, resolution: f64) -> Vec<(i64, i64, u8)> {
    let reach = (radius / resolution).floor() as i64;
    let mut kernel = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let d = ((dc * dc + dr * dr) as f64).sqrt() * resolution;
            let cost = inflation_cost(d, radius);
            if cost > 0 {
                kernel.push((dc, dr, cost));
            }
        }
    }
    kernel
}

/// Builds the planning costmap: occupied cells are lethal and every cell
/// takes the maximum kernel cost over nearby lethal cells.
pub fn inflate(g: &OccupancyGrid) -> Costmap {
    let radius = g.params.inflation_radius;
    let kernel = inflation_kernel(radius, g.geometry.resolution);
    let mut map = Costmap::empty(g.geometry, radius);
    for i in 0..g.log_odds.len() {
        if g.is_occupied(i) {
            map.stamp_lethal(i, &kernel);
        }
    }
    map
}
