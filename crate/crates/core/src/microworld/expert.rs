//! Pure-pursuit steering with IDM speed keeping.

use super::sense::{render_bev_in, GridSpec, OccupancyGrid};
use super::{AgentState, Control, EgoState, ScenarioSpec, Trajectory, WorldState, EGO_LENGTH, EGO_WIDTH, STEER_MAX, WHEELBASE};
use crate::geometry::{Polyline, Pose, Vec2};
use crate::{CoreError, Result};

const IDM_ACCEL: f64 = 1.5;
const IDM_COMFORT_DECEL: f64 = 2.0;
const IDM_MIN_GAP: f64 = 2.5;
const IDM_HEADWAY: f64 = 1.0;
const ACCEL_MIN: f64 = -2.8;
const ACCEL_MAX: f64 = 1.5;
/// Largest change in commanded acceleration per step.
const ACCEL_STEP: f64 = 2.0;
/// Constant-velocity look-ahead used to anticipate agents entering the lane.
const PREDICT_HORIZON: f64 = 3.0;
const PREDICT_STEP: f64 = 0.5;
const LATERAL_MARGIN: f64 = 0.5;

fn lookahead(speed: f64) -> f64 {
    (1.5 + 0.5 * speed).clamp(3.0, 6.0)
}

/// Nearest obstacle ahead along the route: (bumper gap, speed along route,
/// decelerating).
fn lead_obstacle(route: &Polyline, ego: &EgoState, agents: &[AgentState], prev: Option<&[AgentState]>) -> Option<(f64, f64, bool)> {
    let (s_ego, _) = route.project(ego.pose.position());
    let mut best: Option<(f64, f64, bool)> = None;
    for (i, a) in agents.iter().enumerate() {
        let braking = prev.map_or(false, |p| a.speed < p[i].speed - 1e-9) || a.speed < 0.1;
        let mut tau = 0.0;
        while tau <= PREDICT_HORIZON + 1e-9 {
            let c = a.pose.position() + a.velocity() * tau;
            let (s, d) = route.project(c);
            let tangent = Vec2::from_angle(route.heading_at(s));
            let normal = tangent.perp();
            let f = Vec2::from_angle(a.pose.heading);
            let half = 0.5 * a.length * f.dot(normal).abs() + 0.5 * a.width * f.perp().dot(normal).abs();
            let band = 0.5 * EGO_WIDTH + half + LATERAL_MARGIN;
            if d.abs() < band {
                let ahead = s - s_ego;
                if ahead > 0.0 {
                    let lead_speed = if tau == 0.0 { a.velocity().dot(tangent).max(0.0) } else { 0.0 };
                    let gap = ahead - 0.5 * (EGO_LENGTH + a.length);
                    if best.map_or(true, |b| gap < b.0) {
                        best = Some((gap, lead_speed, braking || tau > 0.0));
                    }
                }
                break;
            }
            tau += PREDICT_STEP;
        }
    }
    best
}

fn idm(v: f64, v_des: f64, lead: Option<(f64, f64, bool)>) -> f64 {
    let free = 1.0 - (v / v_des.max(0.1)).powi(4);
    match lead {
        None => IDM_ACCEL * free,
        Some((gap, v_lead, _)) => {
            let dv = v - v_lead;
            let s_star = IDM_MIN_GAP + (v * IDM_HEADWAY + v * dv / (2.0 * (IDM_ACCEL * IDM_COMFORT_DECEL).sqrt())).max(0.0);
            let gap = gap.max(0.1);
            IDM_ACCEL * (free - (s_star / gap).powi(2))
        }
    }
}

/// Expert control for the current state. `prev_agents` lets the expert tell
/// a braking lead from a steady one.
pub fn expert_control(spec: &ScenarioSpec, state: &WorldState, prev_agents: Option<&[AgentState]>, prev_accel: f64) -> Control {
    let route = spec.map.route_line();
    let ego = &state.ego;
    let (s, _) = route.project(ego.pose.position());
    let ld = lookahead(ego.speed);
    let target = ego.pose.to_local(route.point_at(s + ld));
    let alpha = target.y.atan2(target.x);
    let steer = (2.0 * WHEELBASE * alpha.sin() / ld).atan().clamp(-STEER_MAX, STEER_MAX);

    let lead = lead_obstacle(&route, ego, &state.agents, prev_agents);
    let mut accel = idm(ego.speed, spec.ego_init.speed, lead);
    if let Some((_, _, slowing)) = lead {
        if slowing {
            // Never speed up towards a braking, stopped or merging obstacle.
            accel = accel.min(0.0);
        }
    }
    let accel = accel
        .clamp(ACCEL_MIN, ACCEL_MAX)
        .clamp(prev_accel - ACCEL_STEP, prev_accel + ACCEL_STEP);
    // Hold still rather than request negative speed.
    let accel = if ego.speed <= 0.0 { accel.max(0.0) } else { accel };
    Control { accel, steer }
}

/// Simulated expert episode from `state` for `steps` steps.
#[derive(Clone, Debug)]
pub struct ExpertEpisode {
    pub states: Vec<WorldState>,
    pub controls: Vec<Control>,
}

pub fn rollout_expert(spec: &ScenarioSpec, start: &WorldState, steps: usize) -> ExpertEpisode {
    let mut states = vec![start.clone()];
    let mut controls = Vec::with_capacity(steps);
    let mut prev_accel = start.ego.accel;
    for k in 0..steps {
        let cur = &states[k];
        let prev = if k > 0 { Some(states[k - 1].agents.as_slice()) } else { None };
        let c = expert_control(spec, cur, prev, prev_accel);
        prev_accel = c.accel;
        let (next, _) = cur.step(spec, c);
        controls.push(c);
        states.push(next);
    }
    ExpertEpisode { states, controls }
}

/// Ground-truth future from the expert: grids rendered in the frame of the
/// starting ego pose, and the expert's positions in that frame.
#[derive(Clone, Debug)]
pub struct FutureRollout {
    pub grids: Vec<OccupancyGrid>,
    pub expert: Trajectory,
    pub episode: ExpertEpisode,
}

pub fn rollout_future(spec: &ScenarioSpec, state: &WorldState, t_wm: usize, grid: &GridSpec) -> Result<FutureRollout> {
    let remaining = spec.horizon_steps.saturating_sub(state.time_step);
    if t_wm > remaining {
        return Err(CoreError::Contract(format!(
            "requested {t_wm} future steps but only {remaining} remain"
        )));
    }
    let episode = rollout_expert(spec, state, t_wm);
    let frame: Pose = state.ego.pose;
    for (k, st) in episode.states.iter().enumerate().skip(1) {
        for corner in st.ego.footprint().corners() {
            if !spec.map.contains(corner) {
                return Err(CoreError::InvalidScenario(format!(
                    "expert leaves the drivable area at step {k}"
                )));
            }
        }
    }
    let grids = episode.states[1..]
        .iter()
        .map(|st| render_bev_in(spec, st, &frame, grid))
        .collect();
    let expert = Trajectory {
        points: episode.states[1..]
            .iter()
            .map(|st| frame.to_local(st.ego.pose.position()))
            .collect(),
        headings: Some(
            episode.states[1..]
                .iter()
                .map(|st| st.ego.pose.heading - frame.heading)
                .collect(),
        ),
    };
    Ok(FutureRollout {
        grids,
        expert,
        episode,
    })
}
