//! Deterministic 2-D driving microworld: scripted agents, a kinematic
//! bicycle ego, BEV rendering, range sensing and an expert driver.

mod expert;
mod scenario;
mod sense;
mod sim;

use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedRect, Polyline, Pose, Vec2};

pub use expert::{expert_control, rollout_expert, rollout_future, FutureRollout};
pub use scenario::{generate_counted, generate_scenario, ScenarioKind, FORMAT_VERSION};
pub use sense::{raycast_ranges, render_bev, render_bev_in, GridSpec, OccupancyGrid, Channel};
pub use sim::{step_agents, step_ego, Control, StepOutcome};

pub const WHEELBASE: f64 = 2.7;
pub const STEER_MAX: f64 = 0.5;
pub const ACCEL_MAX: f64 = 5.0;
pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 1.9;
pub const LANE_WIDTH: f64 = 3.5;
pub const R_MAX: f64 = 50.0;
pub const DEFAULT_DT: f64 = 0.5;
pub const PLAN_STEPS: usize = 8;
/// Route heading change over this look-ahead decides the driving command.
pub const COMMAND_LOOKAHEAD: f64 = 20.0;
pub const COMMAND_THRESHOLD: f64 = 0.3;
pub const SPEED_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Keep,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Keep, Command::Left, Command::Right];

    pub fn index(self) -> usize {
        match self {
            Command::Keep => 0,
            Command::Left => 1,
            Command::Right => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Braking {
    pub trigger_step: usize,
    pub decel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub length: f64,
    pub width: f64,
    pub waypoints: Vec<Vec2>,
    pub speed: f64,
    pub braking: Option<Braking>,
}

impl AgentSpec {
    pub fn path(&self) -> Polyline {
        Polyline::new(self.waypoints.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    /// Union of simple polygons, vertices in order.
    pub drivable: Vec<Vec<Vec2>>,
    pub route: Vec<Vec2>,
}

impl MapSpec {
    pub fn route_line(&self) -> Polyline {
        Polyline::new(self.route.clone())
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.drivable
            .iter()
            .any(|poly| crate::geometry::point_in_polygon(p, poly))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoInit {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl EgoInit {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }
}

/// Complete, serialisable scenario description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub format_version: u32,
    pub seed: u64,
    pub kind: ScenarioKind,
    pub map: MapSpec,
    pub ego_init: EgoInit,
    pub agents: Vec<AgentSpec>,
    pub horizon_steps: usize,
    pub dt: f64,
}

impl ScenarioSpec {
    /// Structural invariants every scenario must satisfy.
    pub fn check(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::CoreError::InvalidScenario(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon_steps < PLAN_STEPS {
            return bad(format!(
                "horizon_steps {} shorter than the planning horizon {PLAN_STEPS}",
                self.horizon_steps
            ));
        }
        if self.map.route.len() < 2 || self.map.drivable.is_empty() {
            return bad("map needs a route and at least one drivable polygon".into());
        }
        if self.map.drivable.iter().any(|p| p.len() < 3) {
            return bad("drivable polygon with fewer than 3 vertices".into());
        }
        let ego = self.ego_init;
        if !self.map.contains(Vec2::new(ego.x, ego.y)) {
            return bad("ego_init outside the drivable area".into());
        }
        if !(ego.speed >= 0.0 && ego.speed.is_finite()) {
            return bad("ego speed must be finite and non-negative".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.waypoints.len() < 2 || a.length <= 0.0 || a.width <= 0.0 || a.speed < 0.0 {
                return bad(format!("agent {i} has an invalid script"));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> WorldState {
        WorldState {
            time_step: 0,
            ego: EgoState {
                pose: self.ego_init.pose(),
                speed: self.ego_init.speed,
                accel: 0.0,
                yaw_rate: 0.0,
            },
            agents: self
                .agents
                .iter()
                .map(|a| {
                    let path = a.path();
                    AgentState::at(a, &path, 0.0, a.speed)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
}

impl EgoState {
    pub fn footprint(&self) -> OrientedRect {
        OrientedRect::new(self.pose.position(), self.pose.heading, EGO_LENGTH, EGO_WIDTH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pose: Pose,
    pub speed: f64,
    /// Arc length travelled along the script.
    pub progress: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub(crate) fn at(spec: &AgentSpec, path: &Polyline, progress: f64, speed: f64) -> Self {
        let p = path.point_at(progress);
        Self {
            pose: Pose::new(p.x, p.y, path.heading_at(progress)),
            speed,
            progress,
            length: spec.length,
            width: spec.width,
        }
    }

    pub fn footprint(&self) -> OrientedRect {
        OrientedRect::new(self.pose.position(), self.pose.heading, self.length, self.width)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.pose.heading) * self.speed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub time_step: usize,
    pub ego: EgoState,
    pub agents: Vec<AgentState>,
}

/// Ego status as seen by the planner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoStatus {
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
    pub command: Command,
}

/// Command implied by the route's heading change ahead of `position`.
pub fn route_command(route: &Polyline, position: Vec2) -> Command {
    let (s, _) = route.project(position);
    let ahead = (s + COMMAND_LOOKAHEAD).min(route.length());
    let turn = crate::geometry::wrap_angle(route.heading_at(ahead) - route.heading_at(s));
    if turn < -COMMAND_THRESHOLD {
        Command::Left
    } else if turn > COMMAND_THRESHOLD {
        Command::Right
    } else {
        Command::Keep
    }
}

pub fn ego_status(spec: &ScenarioSpec, state: &WorldState) -> EgoStatus {
    EgoStatus {
        speed: state.ego.speed,
        accel: state.ego.accel,
        yaw_rate: state.ego.yaw_rate,
        command: route_command(&spec.map.route_line(), state.ego.pose.position()),
    }
}

/// Waypoints in the ego frame at the start of the plan, one per `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub headings: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self {
            points,
            headings: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    /// Re-express every waypoint (and heading) through `pose`.
    pub fn to_world(&self, pose: &Pose) -> Trajectory {
        Trajectory {
            points: self.points.iter().map(|&p| pose.to_world(p)).collect(),
            headings: self
                .headings
                .as_ref()
                .map(|h| h.iter().map(|&a| a + pose.heading).collect()),
        }
    }

    pub fn to_local(&self, pose: &Pose) -> Trajectory {
        Trajectory {
            points: self.points.iter().map(|&p| pose.to_local(p)).collect(),
            headings: self
                .headings
                .as_ref()
                .map(|h| h.iter().map(|&a| a - pose.heading).collect()),
        }
    }
}
