//! Seeded scenario generation.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentSpec, Braking, EgoInit, MapSpec, ScenarioSpec, DEFAULT_DT, EGO_LENGTH, LANE_WIDTH, PLAN_STEPS};
use crate::evaluation::{score_detail, EpisodeTrace, SubScores};
use crate::geometry::{Polyline, Pose, Vec2};

pub const FORMAT_VERSION: u32 = 1;

/// Road edges relative to the ego-lane centreline (negative is left).
const LEFT_EDGE: f64 = -1.5 * LANE_WIDTH;
const RIGHT_EDGE: f64 = 0.5 * LANE_WIDTH + 1.25;
const AGENT_LENGTH: f64 = 4.5;
const AGENT_WIDTH: f64 = 1.9;
const MAX_ATTEMPTS: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    LeadBrake,
    Crossing,
    Congestion,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::LeadBrake,
        ScenarioKind::Crossing,
        ScenarioKind::Congestion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeftTurn => "left_turn",
            ScenarioKind::RightTurn => "right_turn",
            ScenarioKind::LeadBrake => "lead_brake",
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::Congestion => "congestion",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario kind '{s}'"))
    }
}

fn mix(seed: u64, kind: ScenarioKind, attempt: u32) -> u64 {
    // splitmix64 finaliser over the three inputs
    let mut z = seed
        .wrapping_add(kind.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn straight_route() -> Vec<Vec2> {
    (0..=24).map(|i| Vec2::new(-30.0 + 5.0 * i as f64, 0.0)).collect()
}

/// Straight run of `d0` metres, a quarter arc of radius `r`, then a straight
/// exit. `side` is +1 for a right turn, -1 for a left turn.
fn turn_route(d0: f64, r: f64, side: f64) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = Vec::new();
    let mut x = -30.0;
    while x < d0 - 1e-9 {
        pts.push(Vec2::new(x, 0.0));
        x += 5.0;
    }
    let arc_steps = 30;
    for i in 0..=arc_steps {
        let phi = FRAC_PI_2 * i as f64 / arc_steps as f64;
        pts.push(Vec2::new(d0 + r * phi.sin(), side * (r - r * phi.cos())));
    }
    for i in 1..=10 {
        pts.push(Vec2::new(d0 + r, side * (r + 5.0 * i as f64)));
    }
    pts
}

fn corridor(route: &Polyline) -> Vec<Vec2> {
    let mut poly = route.offset(LEFT_EDGE);
    let mut right = route.offset(RIGHT_EDGE);
    right.reverse();
    poly.extend(right);
    poly
}

fn agent(waypoints: Vec<Vec2>, speed: f64, braking: Option<Braking>) -> AgentSpec {
    AgentSpec {
        length: AGENT_LENGTH,
        width: AGENT_WIDTH,
        waypoints,
        speed,
        braking,
    }
}

/// Opposite-lane path (driving against the route), starting `start` metres
/// along it.
fn oncoming_path(route: &Polyline, start: f64) -> Vec<Vec2> {
    let mut lane = route.offset(-LANE_WIDTH);
    lane.reverse();
    let lane = Polyline::new(lane);
    let mut pts = vec![lane.point_at(start)];
    let mut acc = 0.0;
    for w in lane.points().windows(2) {
        acc += (w[1] - w[0]).norm();
        if acc > start + 1e-6 {
            pts.push(w[1]);
        }
    }
    pts
}

fn build(seed: u64, kind: ScenarioKind, rng: &mut ChaCha8Rng) -> ScenarioSpec {
    let speed = rng.gen_range(3.0..5.0);
    let mut extra_polys: Vec<Vec<Vec2>> = Vec::new();
    let mut agents = Vec::new();
    let route_pts = match kind {
        ScenarioKind::LeftTurn | ScenarioKind::RightTurn => {
            let side = if kind == ScenarioKind::RightTurn { 1.0 } else { -1.0 };
            let d0 = rng.gen_range(4.0..10.0);
            let r = rng.gen_range(15.0..22.0);
            turn_route(d0, r, side)
        }
        _ => straight_route(),
    };
    let route = Polyline::new(route_pts.clone());
    match kind {
        ScenarioKind::Straight => {
            let n = rng.gen_range(0..=2);
            for _ in 0..n {
                let x0 = rng.gen_range(10.0..70.0);
                let v = rng.gen_range(3.0..7.0);
                agents.push(agent(vec![Vec2::new(x0, -LANE_WIDTH), Vec2::new(-40.0, -LANE_WIDTH)], v, None));
            }
        }
        ScenarioKind::LeftTurn | ScenarioKind::RightTurn => {
            if rng.gen_bool(0.6) {
                let total = route.length();
                let start = rng.gen_range(0.0..(total - 50.0));
                let v = rng.gen_range(2.0..5.0);
                agents.push(agent(oncoming_path(&route, start), v, None));
            }
        }
        ScenarioKind::LeadBrake => {
            let gap = rng.gen_range(10.0..16.0);
            let x = EGO_LENGTH + gap;
            let braking = Braking {
                trigger_step: rng.gen_range(1..=6),
                decel: rng.gen_range(1.5..3.0),
            };
            agents.push(agent(vec![Vec2::new(x, 0.0), Vec2::new(200.0, 0.0)], speed, Some(braking)));
        }
        ScenarioKind::Crossing => {
            let xc = rng.gen_range(18.0..28.0);
            let k_c: usize = rng.gen_range(2..=5);
            let v = rng.gen_range(2.5..5.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // The agent reaches the lane centre exactly at step k_c.
            let y0 = v * k_c as f64 * DEFAULT_DT;
            agents.push(agent(
                vec![Vec2::new(xc, -side * y0), Vec2::new(xc, 0.0), Vec2::new(xc, side * 40.0)],
                v,
                None,
            ));
            let hw = 0.5 * LANE_WIDTH * 2.0;
            extra_polys.push(vec![
                Vec2::new(xc - hw, -45.0),
                Vec2::new(xc + hw, -45.0),
                Vec2::new(xc + hw, 45.0),
                Vec2::new(xc - hw, 45.0),
            ]);
        }
        ScenarioKind::Congestion => {
            let n = rng.gen_range(2..=3);
            let v = rng.gen_range(1.0..3.0);
            let mut x = EGO_LENGTH + rng.gen_range(8.0..14.0);
            for _ in 0..n {
                agents.push(agent(vec![Vec2::new(x, 0.0), Vec2::new(200.0, 0.0)], v, None));
                x += AGENT_LENGTH + rng.gen_range(6.0..10.0);
            }
        }
    }
    let mut drivable = vec![corridor(&route)];
    drivable.extend(extra_polys);

    // Place the whole scene at a random world pose.
    let frame = Pose::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-PI..PI));
    let tf = |p: Vec2| frame.to_world(p);
    ScenarioSpec {
        format_version: FORMAT_VERSION,
        seed,
        kind,
        map: MapSpec {
            drivable: drivable.into_iter().map(|p| p.into_iter().map(tf).collect()).collect(),
            route: route_pts.into_iter().map(tf).collect(),
        },
        ego_init: EgoInit {
            x: frame.x,
            y: frame.y,
            heading: frame.heading,
            speed,
        },
        agents: agents
            .into_iter()
            .map(|mut a| {
                a.waypoints = a.waypoints.into_iter().map(tf).collect();
                a
            })
            .collect(),
        horizon_steps: PLAN_STEPS,
        dt: DEFAULT_DT,
    }
}

/// Whether the expert drives `spec` perfectly: full sub-scores, no contact.
pub(crate) fn expert_is_clean(spec: &ScenarioSpec) -> bool {
    if spec.check().is_err() {
        return false;
    }
    let trace = EpisodeTrace::new(spec);
    match score_detail(&trace.expert, spec, &trace) {
        Ok(d) => d.scores == SubScores::PERFECT && !d.any_contact,
        Err(_) => false,
    }
}

/// Deterministic in `(seed, kind)`. Candidates the expert cannot drive
/// cleanly are redrawn from the next attempt's stream.
pub fn generate_scenario(seed: u64, kind: ScenarioKind) -> ScenarioSpec {
    generate_counted(seed, kind).0
}

/// Like [`generate_scenario`], also reporting how many candidates were drawn.
pub fn generate_counted(seed: u64, kind: ScenarioKind) -> (ScenarioSpec, u32) {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, kind, attempt));
        let spec = build(seed, kind, &mut rng);
        if expert_is_clean(&spec) {
            return (spec, attempt + 1);
        }
    }
    panic!("no valid {kind} scenario for seed {seed} after {MAX_ATTEMPTS} attempts");
}
