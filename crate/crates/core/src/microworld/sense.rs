use super::{ScenarioSpec, WorldState, R_MAX};
use crate::geometry::{point_in_polygon, ray_segment, Pose, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Drivable = 0,
    Agents = 1,
    Ego = 2,
}

/// Raster layout. The ego sits on the centre column, `forward_cells` rows
/// below the top edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub forward_cells: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, resolution: f64) -> Self {
        Self {
            height,
            width,
            resolution,
            forward_cells: height * 3 / 4,
        }
    }

    /// Centre of cell `(row, col)` in the ego frame.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (self.forward_cells as f64 - row as f64 - 0.5) * self.resolution,
            (col as f64 + 0.5 - self.width as f64 / 2.0) * self.resolution,
        )
    }

    /// Cell containing an ego-frame point, if inside the raster.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let r = self.forward_cells as f64 - p.x / self.resolution;
        let c = p.y / self.resolution + self.width as f64 / 2.0;
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(64, 64, 0.5)
    }
}

/// Three binary channels, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub const CHANNELS: usize = 3;

    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: vec![0; Self::CHANNELS * spec.height * spec.width],
        }
    }

    fn index(&self, ch: Channel, row: usize, col: usize) -> usize {
        (ch as usize * self.spec.height + row) * self.spec.width + col
    }

    pub fn get(&self, ch: Channel, row: usize, col: usize) -> u8 {
        self.cells[self.index(ch, row, col)]
    }

    pub fn set(&mut self, ch: Channel, row: usize, col: usize, v: u8) {
        let i = self.index(ch, row, col);
        self.cells[i] = v;
    }

    pub fn channel(&self, ch: Channel) -> &[u8] {
        let n = self.spec.height * self.spec.width;
        &self.cells[ch as usize * n..(ch as usize + 1) * n]
    }

    pub fn count(&self, ch: Channel) -> usize {
        self.channel(ch).iter().map(|&v| v as usize).sum()
    }
}

/// Renders `state` in the frame of its own ego pose.
pub fn render_bev(spec: &ScenarioSpec, state: &WorldState, grid: &GridSpec) -> OccupancyGrid {
    render_bev_in(spec, state, &state.ego.pose, grid)
}

/// Renders `state` in an arbitrary `frame` (used for future frames, which
/// stay anchored at the starting pose).
pub fn render_bev_in(spec: &ScenarioSpec, state: &WorldState, frame: &Pose, grid: &GridSpec) -> OccupancyGrid {
    let mut out = OccupancyGrid::empty(*grid);
    // Pull every shape into the frame once.
    let polys: Vec<Vec<Vec2>> = spec
        .map
        .drivable
        .iter()
        .map(|p| p.iter().map(|&v| frame.to_local(v)).collect())
        .collect();
    let to_local_rect = |r: crate::geometry::OrientedRect| {
        crate::geometry::OrientedRect::new(frame.to_local(r.center), r.heading - frame.heading, r.length, r.width)
    };
    let agents: Vec<_> = state.agents.iter().map(|a| to_local_rect(a.footprint())).collect();
    let ego = to_local_rect(state.ego.footprint());
    for row in 0..grid.height {
        for col in 0..grid.width {
            let c = grid.cell_center(row, col);
            if polys.iter().any(|p| point_in_polygon(c, p)) {
                out.set(Channel::Drivable, row, col, 1);
            }
            if agents.iter().any(|r| r.contains(c)) {
                out.set(Channel::Agents, row, col, 1);
            }
            if ego.contains(c) {
                out.set(Channel::Ego, row, col, 1);
            }
        }
    }
    out
}

/// Range to the nearest agent or road edge along `n_rays` evenly spaced
/// directions, ray 0 straight ahead, capped at the sensor range.
pub fn raycast_ranges(spec: &ScenarioSpec, state: &WorldState, n_rays: usize) -> Vec<f64> {
    let origin = state.ego.pose.position();
    let mut segments: Vec<(Vec2, Vec2, usize)> = Vec::new();
    for (pi, poly) in spec.map.drivable.iter().enumerate() {
        for i in 0..poly.len() {
            segments.push((poly[i], poly[(i + 1) % poly.len()], pi));
        }
    }
    let agent_edges: Vec<(Vec2, Vec2)> = state
        .agents
        .iter()
        .flat_map(|a| {
            let c = a.footprint().corners();
            (0..4).map(move |i| (c[i], c[(i + 1) % 4]))
        })
        .collect();
    (0..n_rays)
        .map(|i| {
            let theta = state.ego.pose.heading + std::f64::consts::TAU * i as f64 / n_rays as f64;
            let dir = Vec2::from_angle(theta);
            let mut best = R_MAX;
            for &(a, b) in &agent_edges {
                if let Some(t) = ray_segment(origin, dir, a, b) {
                    best = best.min(t);
                }
            }
            for &(a, b, pi) in &segments {
                if let Some(t) = ray_segment(origin, dir, a, b) {
                    if t >= best {
                        continue;
                    }
                    let hit = origin + dir * t;
                    // Edges shared with, or buried inside, another road piece
                    // are not boundaries of the union.
                    let interior = spec
                        .map
                        .drivable
                        .iter()
                        .enumerate()
                        .any(|(pj, p)| pj != pi && point_in_polygon(hit, p));
                    if !interior {
                        best = t;
                    }
                }
            }
            best
        })
        .collect()
}
