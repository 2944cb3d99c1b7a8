use super::{AgentState, EgoState, ScenarioSpec, WorldState, ACCEL_MAX, STEER_MAX, WHEELBASE};
use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Control {
    pub accel: f64,
    pub steer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub ego: EgoState,
    /// Set when the requested control exceeded its bounds and was clamped.
    pub clamped: bool,
}

/// One explicit-Euler step of the kinematic bicycle.
pub fn step_ego(ego: &EgoState, control: Control, dt: f64) -> StepOutcome {
    let accel = control.accel.clamp(-ACCEL_MAX, ACCEL_MAX);
    let steer = control.steer.clamp(-STEER_MAX, STEER_MAX);
    let clamped = accel != control.accel || steer != control.steer;
    let (x, y, th, v) = (ego.pose.x, ego.pose.y, ego.pose.heading, ego.speed);
    let yaw_rate = v * steer.tan() / WHEELBASE;
    let new_v = (v + accel * dt).max(0.0);
    StepOutcome {
        ego: EgoState {
            pose: Pose::new(x + v * th.cos() * dt, y + v * th.sin() * dt, th + yaw_rate * dt),
            speed: new_v,
            accel: (new_v - v) / dt,
            yaw_rate,
        },
        clamped,
    }
}

/// Advances every scripted agent by one step.
pub fn step_agents(spec: &ScenarioSpec, state: &WorldState) -> Vec<AgentState> {
    let dt = spec.dt;
    spec.agents
        .iter()
        .zip(&state.agents)
        .map(|(script, cur)| {
            let path = script.path();
            let v = cur.speed;
            let (mut v_next, mut ds) = match script.braking {
                Some(b) if state.time_step >= b.trigger_step && b.decel > 0.0 => {
                    let v_next = (v - b.decel * dt).max(0.0);
                    let ds = if v_next == 0.0 {
                        v * v / (2.0 * b.decel)
                    } else {
                        0.5 * (v + v_next) * dt
                    };
                    (v_next, ds)
                }
                _ => (v, v * dt),
            };
            let remaining = path.length() - cur.progress;
            if ds >= remaining {
                ds = remaining.max(0.0);
                v_next = 0.0;
            }
            AgentState::at(script, &path, cur.progress + ds, v_next)
        })
        .collect()
}

impl WorldState {
    /// Advances agents and ego together.
    pub fn step(&self, spec: &ScenarioSpec, control: Control) -> (WorldState, bool) {
        let agents = step_agents(spec, self);
        let out = step_ego(&self.ego, control, spec.dt);
        (
            WorldState {
                time_step: self.time_step + 1,
                ego: out.ego,
                agents,
            },
            out.clamped,
        )
    }
}
