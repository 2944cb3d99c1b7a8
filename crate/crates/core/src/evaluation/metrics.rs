//! Closed-loop sub-scores, the aggregate driving score and open-loop metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, OrientedRect, Vec2};
use crate::microworld::{
    rollout_expert, AgentState, ScenarioSpec, Trajectory, EGO_LENGTH, EGO_WIDTH,
};
use crate::{CoreError, Result};

pub const TTC_WINDOW: f64 = 1.0;
pub const COMFORT_ACCEL: f64 = 3.0;
pub const COMFORT_JERK: f64 = 6.0;
pub const COMFORT_YAW_RATE: f64 = 0.6;
/// Waypoint indices for the 1 s, 2 s and 3 s open-loop horizons at 2 Hz.
pub const OPEN_LOOP_STEPS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comf: f64,
    pub ep: f64,
}

impl SubScores {
    pub const PERFECT: SubScores = SubScores {
        nc: 1.0,
        dac: 1.0,
        ttc: 1.0,
        comf: 1.0,
        ep: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.nc, self.dac, self.ttc, self.comf, self.ep]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmsWeights {
    pub w_ttc: f64,
    pub w_comf: f64,
    pub w_ep: f64,
}

impl Default for PdmsWeights {
    fn default() -> Self {
        Self {
            w_ttc: 5.0,
            w_comf: 2.0,
            w_ep: 5.0,
        }
    }
}

/// Gated weighted score in `[0, 1]`.
pub fn pdms(s: &SubScores, w: &PdmsWeights) -> f64 {
    let inner = (w.w_ttc * s.ttc + w.w_comf * s.comf + w.w_ep * s.ep) / (w.w_ttc + w.w_comf + w.w_ep);
    s.nc * s.dac * inner
}

/// Non-reactive agent states and the expert's executed path for one scenario.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    /// `agents[k]` holds every agent at step `k`, for `k = 0..=horizon`.
    pub agents: Vec<Vec<AgentState>>,
    /// Expert positions at steps `1..=horizon`, world frame.
    pub expert: Trajectory,
}

impl EpisodeTrace {
    pub fn new(spec: &ScenarioSpec) -> Self {
        let ep = rollout_expert(spec, &spec.initial_state(), spec.horizon_steps);
        Self {
            agents: ep.states.iter().map(|s| s.agents.clone()).collect(),
            expert: Trajectory::new(ep.states[1..].iter().map(|s| s.ego.pose.position()).collect()),
        }
    }
}

/// Ego kinematics recovered from positions by finite differences.
#[derive(Clone, Debug)]
pub struct EgoMotion {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub headings: Vec<f64>,
    pub accel: Vec<f64>,
    pub jerk: Vec<f64>,
    pub yaw_rate: Vec<f64>,
}

impl EgoMotion {
    /// `points` are the world positions at steps `1..=n`. A virtual past at
    /// constant initial velocity seeds the differences at step 0.
    pub fn new(spec: &ScenarioSpec, points: &[Vec2]) -> Self {
        let dt = spec.dt;
        let init = spec.ego_init;
        let h0 = Vec2::from_angle(init.heading);
        let mut positions = vec![init.pose().position()];
        positions.extend_from_slice(points);
        let n = positions.len();
        let mut velocities = vec![h0 * init.speed];
        let mut headings = vec![init.heading];
        for k in 1..n {
            let v = (positions[k] - positions[k - 1]) * (1.0 / dt);
            let h = if v.norm() > 1e-6 { v.angle() } else { headings[k - 1] };
            velocities.push(v);
            headings.push(h);
        }
        let mut accel = vec![0.0];
        let mut jerk = vec![0.0];
        let mut yaw_rate = vec![0.0];
        for k in 1..n {
            accel.push((velocities[k].norm() - velocities[k - 1].norm()) / dt);
            jerk.push((accel[k] - accel[k - 1]) / dt);
            yaw_rate.push(wrap_angle(headings[k] - headings[k - 1]) / dt);
        }
        Self {
            positions,
            velocities,
            headings,
            accel,
            jerk,
            yaw_rate,
        }
    }

    pub fn footprint(&self, k: usize) -> OrientedRect {
        OrientedRect::new(self.positions[k], self.headings[k], EGO_LENGTH, EGO_WIDTH)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Sub-scores plus diagnostics the scenario validator needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreDetail {
    pub scores: SubScores,
    /// Any overlap with an agent, at fault or not.
    pub any_contact: bool,
    pub progress: f64,
}

fn route_progress(spec: &ScenarioSpec, from: Vec2, to: Vec2) -> f64 {
    let route = spec.map.route_line();
    route.project(to).0 - route.project(from).0
}

/// Scores an executed world-frame trajectory against the scripted agents.
pub fn score_detail(executed: &Trajectory, spec: &ScenarioSpec, trace: &EpisodeTrace) -> Result<ScoreDetail> {
    let n = spec.horizon_steps;
    if executed.len() < n {
        return Err(CoreError::Contract(format!(
            "executed trajectory has {} points, horizon is {n}",
            executed.len()
        )));
    }
    if trace.agents.len() < n + 1 {
        return Err(CoreError::Contract("episode trace shorter than the horizon".into()));
    }
    if !executed.is_finite() {
        return Err(CoreError::Numeric("executed trajectory is not finite".into()));
    }
    let motion = EgoMotion::new(spec, &executed.points[..n]);

    let mut nc = 1.0;
    let mut any_contact = false;
    let mut ttc = 1.0;
    let mut dac = 1.0;
    for k in 0..=n {
        let ego = motion.footprint(k);
        let v = motion.velocities[k];
        for a in &trace.agents[k] {
            let rect = a.footprint();
            if ego.intersects(&rect) {
                any_contact = true;
                if v.dot(rect.center - ego.center) > 0.0 {
                    nc = 0.0;
                }
            }
            if ego.sweep_intersects(v, &rect, a.velocity(), TTC_WINDOW) {
                ttc = 0.0;
            }
        }
        if ego.corners().iter().any(|&c| !spec.map.contains(c)) {
            dac = 0.0;
        }
    }
    let comfortable = (1..=n).all(|k| {
        motion.accel[k].abs() <= COMFORT_ACCEL
            && motion.jerk[k].abs() <= COMFORT_JERK
            && motion.yaw_rate[k].abs() <= COMFORT_YAW_RATE
    });
    let start = motion.positions[0];
    let progress = route_progress(spec, start, motion.positions[n]);
    let expert_end = trace.expert.points[n - 1];
    let expert_progress = route_progress(spec, start, expert_end);
    let ep = if expert_progress.abs() < 1e-6 {
        1.0
    } else {
        (progress / expert_progress).clamp(0.0, 1.0)
    };
    Ok(ScoreDetail {
        scores: SubScores {
            nc,
            dac,
            ttc,
            comf: if comfortable { 1.0 } else { 0.0 },
            ep,
        },
        any_contact,
        progress,
    })
}

pub fn score_scenario(executed: &Trajectory, spec: &ScenarioSpec, trace: &EpisodeTrace) -> Result<SubScores> {
    Ok(score_detail(executed, spec, trace)?.scores)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [f64; 3],
    pub collision_avg: f64,
}

/// `pred` and `gt` are ego-frame plans from the initial state; collisions
/// are checked against the trace's agents at the matching steps.
pub fn open_loop_metrics(pred: &Trajectory, gt: &Trajectory, spec: &ScenarioSpec, trace: &EpisodeTrace) -> Result<OpenLoopMetrics> {
    if pred.len() != gt.len() {
        return Err(CoreError::Contract(format!(
            "horizon mismatch: prediction {} vs ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let last = *OPEN_LOOP_STEPS.last().unwrap();
    if pred.len() <= last {
        return Err(CoreError::Contract(format!(
            "open-loop metrics need at least {} waypoints",
            last + 1
        )));
    }
    let pose = spec.ego_init.pose();
    let world = pred.to_world(&pose);
    let mut heading = pose.heading;
    let mut prev = pose.position();
    let mut hit = Vec::with_capacity(pred.len());
    for (j, &p) in world.points.iter().enumerate() {
        let d = p - prev;
        if d.norm() > 1e-6 {
            heading = d.angle();
        }
        prev = p;
        let ego = OrientedRect::new(p, heading, EGO_LENGTH, EGO_WIDTH);
        let agents = trace.agents.get(j + 1).map(|a| a.as_slice()).unwrap_or(&[]);
        hit.push(agents.iter().any(|a| ego.intersects(&a.footprint())));
    }
    let mut m = OpenLoopMetrics::default();
    for (h, &idx) in OPEN_LOOP_STEPS.iter().enumerate() {
        m.l2[h] = (pred.points[idx] - gt.points[idx]).norm();
        m.collision[h] = if hit[..=idx].iter().any(|&b| b) { 1.0 } else { 0.0 };
    }
    m.l2_avg = m.l2.iter().sum::<f64>() / 3.0;
    m.collision_avg = m.collision.iter().sum::<f64>() / 3.0;
    Ok(m)
}
