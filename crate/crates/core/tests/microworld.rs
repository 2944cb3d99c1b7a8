use std::f64::consts::PI;

use proptest::prelude::*;
use wa_core::geometry::{point_in_polygon, Pose, Vec2};
use wa_core::microworld::{
    ego_status, generate_scenario, raycast_ranges, render_bev, render_bev_in, rollout_expert, rollout_future, step_agents,
    AgentSpec, Braking, Channel, Command, EgoInit, GridSpec, MapSpec, ScenarioKind, ScenarioSpec, FORMAT_VERSION, R_MAX,
};

fn square(half: f64) -> Vec<Vec2> {
    vec![
        Vec2::new(-half, -half),
        Vec2::new(half, -half),
        Vec2::new(half, half),
        Vec2::new(-half, half),
    ]
}

fn open_spec(agents: Vec<AgentSpec>, drivable: Vec<Vec<Vec2>>) -> ScenarioSpec {
    ScenarioSpec {
        format_version: FORMAT_VERSION,
        seed: 0,
        kind: ScenarioKind::Straight,
        map: MapSpec {
            drivable,
            route: vec![Vec2::new(-10.0, 0.0), Vec2::new(200.0, 0.0)],
        },
        ego_init: EgoInit {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
        },
        agents,
        horizon_steps: 8,
        dt: 0.5,
    }
}

fn parked(x: f64, y: f64, heading: f64) -> AgentSpec {
    let f = Vec2::from_angle(heading);
    AgentSpec {
        length: 4.0,
        width: 2.0,
        waypoints: vec![Vec2::new(x, y), Vec2::new(x, y) + f],
        speed: 0.0,
        braking: None,
    }
}

fn kind_of(i: u64) -> ScenarioKind {
    ScenarioKind::ALL[(i % 6) as usize]
}

#[test]
fn constant_speed_agent_advances_speed_times_dt() {
    let a = AgentSpec {
        length: 4.0,
        width: 2.0,
        waypoints: vec![Vec2::new(0.0, 10.0), Vec2::new(100.0, 10.0)],
        speed: 3.0,
        braking: None,
    };
    let spec = open_spec(vec![a], vec![square(300.0)]);
    let mut state = spec.initial_state();
    for _ in 0..6 {
        let next = step_agents(&spec, &state);
        assert!((next[0].progress - state.agents[0].progress - 1.5).abs() < 1e-12);
        state.agents = next;
        state.time_step += 1;
    }
}

#[test]
fn agent_at_script_end_stays_put() {
    let a = AgentSpec {
        length: 4.0,
        width: 2.0,
        waypoints: vec![Vec2::new(0.0, 10.0), Vec2::new(4.0, 10.0)],
        speed: 3.0,
        braking: None,
    };
    let spec = open_spec(vec![a], vec![square(300.0)]);
    let mut state = spec.initial_state();
    for _ in 0..5 {
        state.agents = step_agents(&spec, &state);
        state.time_step += 1;
    }
    let end = state.agents[0];
    assert_eq!(end.pose.position(), Vec2::new(4.0, 10.0));
    assert_eq!(end.speed, 0.0);
    let again = step_agents(&spec, &state);
    assert_eq!(again[0].pose.position(), end.pose.position());
}

#[test]
fn braking_agent_slows_from_trigger_step() {
    let a = AgentSpec {
        length: 4.0,
        width: 2.0,
        waypoints: vec![Vec2::new(10.0, 0.0), Vec2::new(200.0, 0.0)],
        speed: 4.0,
        braking: Some(Braking {
            trigger_step: 2,
            decel: 2.0,
        }),
    };
    let spec = open_spec(vec![a], vec![square(300.0)]);
    let mut state = spec.initial_state();
    let mut speeds = vec![state.agents[0].speed];
    for _ in 0..6 {
        state.agents = step_agents(&spec, &state);
        state.time_step += 1;
        speeds.push(state.agents[0].speed);
    }
    assert_eq!(speeds, [4.0, 4.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
}

#[test]
fn crossing_agent_reaches_lane_centre_at_its_scripted_step() {
    let mut seen = 0;
    for seed in 0..60 {
        let spec = generate_scenario(seed, ScenarioKind::Crossing);
        let a = &spec.agents[0];
        let approach = (a.waypoints[1] - a.waypoints[0]).norm();
        let steps = approach / (a.speed * spec.dt);
        let k = steps.round();
        assert!((steps - k).abs() < 1e-9, "conflict step {steps} is not integral");
        let ep = rollout_expert(&spec, &spec.initial_state(), k as usize);
        let at = ep.states[k as usize].agents[0].pose.position();
        assert!((at - a.waypoints[1]).norm() < 1e-9);
        seen += 1;
    }
    assert_eq!(seen, 60);
}

#[test]
fn empty_scene_has_no_agent_cells() {
    let spec = open_spec(vec![], vec![square(300.0)]);
    let g = render_bev(&spec, &spec.initial_state(), &GridSpec::default());
    assert_eq!(g.count(Channel::Agents), 0);
    assert!(g.count(Channel::Ego) > 0);
    assert_eq!(g.count(Channel::Drivable), 64 * 64);
}

#[test]
fn agent_ahead_occupies_the_expected_block() {
    let spec = open_spec(vec![parked(5.0, 0.0, 0.0)], vec![square(300.0)]);
    let grid = GridSpec::default();
    let g = render_bev(&spec, &spec.initial_state(), &grid);
    let mut expected = 0;
    for row in 0..grid.height {
        for col in 0..grid.width {
            let c = grid.cell_center(row, col);
            let inside = (c.x - 5.0).abs() < 2.0 && c.y.abs() < 1.0;
            expected += inside as usize;
            assert_eq!(g.get(Channel::Agents, row, col), inside as u8, "cell {row},{col}");
        }
    }
    // 4 m × 2 m at 0.5 m cells
    assert_eq!(expected, 8 * 4);
    // ego sits on the centre columns, forward_cells rows from the top
    assert_eq!(grid.cell_of(Vec2::new(5.0, 0.0)), Some((48 - 10, 32)));
}

#[test]
fn rotating_world_and_ego_together_leaves_grid_nearly_unchanged() {
    let grid = GridSpec::default();
    for seed in 0..12 {
        let spec = generate_scenario(seed, kind_of(seed));
        let angle = 0.3 + 0.4 * seed as f64;
        let rot = Pose::new(0.0, 0.0, angle);
        let mut turned = spec.clone();
        let tf = |p: Vec2| rot.to_world(p);
        turned.map.drivable = spec.map.drivable.iter().map(|p| p.iter().map(|&v| tf(v)).collect()).collect();
        turned.map.route = spec.map.route.iter().map(|&v| tf(v)).collect();
        for a in &mut turned.agents {
            a.waypoints = a.waypoints.iter().map(|&v| tf(v)).collect();
        }
        let e = tf(Vec2::new(spec.ego_init.x, spec.ego_init.y));
        turned.ego_init.x = e.x;
        turned.ego_init.y = e.y;
        turned.ego_init.heading = spec.ego_init.heading + angle;
        let a = render_bev(&spec, &spec.initial_state(), &grid);
        let b = render_bev(&turned, &turned.initial_state(), &grid);
        let differing = a.cells.iter().zip(&b.cells).filter(|(x, y)| x != y).count();
        assert!(differing as f64 <= 0.02 * a.cells.len() as f64, "seed {seed}: {differing} cells differ");
    }
}

#[test]
fn open_map_rays_reach_sensor_range() {
    let spec = open_spec(vec![], vec![square(500.0)]);
    let r = raycast_ranges(&spec, &spec.initial_state(), 16);
    assert!(r.iter().all(|&v| v == R_MAX));
}

#[test]
fn wall_ahead_is_hit_at_its_distance() {
    let spec = open_spec(
        vec![],
        vec![vec![
            Vec2::new(-100.0, -100.0),
            Vec2::new(10.0, -100.0),
            Vec2::new(10.0, 100.0),
            Vec2::new(-100.0, 100.0),
        ]],
    );
    let r = raycast_ranges(&spec, &spec.initial_state(), 8);
    assert!((r[0] - 10.0).abs() < 1e-9);
    // 45° ray meets the wall at 10·√2
    assert!((r[1] - 10.0 * 2f64.sqrt()).abs() < 1e-9);
}

fn blocked(spec: &ScenarioSpec, state: &wa_core::microworld::WorldState, p: Vec2) -> bool {
    !spec.map.drivable.iter().any(|poly| point_in_polygon(p, poly))
        || state.agents.iter().any(|a| a.footprint().contains(p))
}

#[test]
fn ranges_match_ray_marching() {
    const STEP: f64 = 0.02;
    for seed in 0..24 {
        let spec = generate_scenario(seed, kind_of(seed));
        let state = spec.initial_state();
        let n = 24;
        let ranges = raycast_ranges(&spec, &state, n);
        for (i, &r) in ranges.iter().enumerate() {
            let th = state.ego.pose.heading + 2.0 * PI * i as f64 / n as f64;
            let dir = Vec2::from_angle(th);
            let o = state.ego.pose.position();
            let mut t = 0.0;
            while t < R_MAX && !blocked(&spec, &state, o + dir * t) {
                t += STEP;
            }
            let marched = t.min(R_MAX);
            assert!((marched - r).abs() <= STEP + 1e-9, "seed {seed} ray {i}: {r} vs marched {marched}");
        }
    }
}

#[test]
fn ray_hits_show_up_in_the_grid() {
    let grid = GridSpec::default();
    for seed in 0..30 {
        let spec = generate_scenario(seed, kind_of(seed));
        let state = spec.initial_state();
        let g = render_bev(&spec, &state, &grid);
        let n = 32;
        for (i, &r) in raycast_ranges(&spec, &state, n).iter().enumerate() {
            let local = Vec2::from_angle(2.0 * PI * i as f64 / n as f64) * (r + 0.25);
            let Some((row, col)) = grid.cell_of(local) else { continue };
            if r >= R_MAX {
                continue;
            }
            let hit = (row.saturating_sub(1)..=(row + 1).min(grid.height - 1)).any(|rr| {
                (col.saturating_sub(1)..=(col + 1).min(grid.width - 1))
                    .any(|cc| g.get(Channel::Agents, rr, cc) == 1 || g.get(Channel::Drivable, rr, cc) == 0)
            });
            assert!(hit, "seed {seed} ray {i} at {r} m has no occupied or boundary cell");
        }
    }
}

#[test]
fn straight_expert_without_agents_is_collinear() {
    let mut checked = 0;
    for seed in 0..200 {
        let spec = generate_scenario(seed, ScenarioKind::Straight);
        if !spec.agents.is_empty() {
            continue;
        }
        let f = rollout_future(&spec, &spec.initial_state(), 8, &GridSpec::default()).unwrap();
        assert!(f.expert.points.iter().all(|p| p.y.abs() < 1e-6), "seed {seed}");
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn expert_never_speeds_up_after_lead_brakes() {
    for seed in 0..100 {
        let spec = generate_scenario(seed, ScenarioKind::LeadBrake);
        let trigger = spec.agents[0].braking.unwrap().trigger_step;
        let ep = rollout_expert(&spec, &spec.initial_state(), spec.horizon_steps);
        let speeds: Vec<f64> = ep.states.iter().map(|s| s.ego.speed).collect();
        // the expert sees the slowdown one step after it starts
        for k in trigger + 1..speeds.len() - 1 {
            assert!(speeds[k + 1] <= speeds[k] + 1e-12, "seed {seed} step {k}: {speeds:?}");
        }
    }
}

#[test]
fn future_grids_are_renders_of_the_rollout() {
    let grid = GridSpec::default();
    for seed in 0..12 {
        let spec = generate_scenario(seed, kind_of(seed));
        let start = spec.initial_state();
        let f = rollout_future(&spec, &start, 8, &grid).unwrap();
        assert_eq!(f.grids.len(), 8);
        for (k, g) in f.grids.iter().enumerate() {
            let st = &f.episode.states[k + 1];
            assert_eq!(*g, render_bev_in(&spec, st, &start.ego.pose, &grid));
            let local = start.ego.pose.to_local(st.ego.pose.position());
            assert_eq!(f.expert.points[k], local);
        }
    }
    let spec = generate_scenario(1, ScenarioKind::Straight);
    assert!(rollout_future(&spec, &spec.initial_state(), 9, &grid).is_err());
}

#[test]
fn scenarios_are_deterministic_in_seed_and_kind() {
    for seed in 0..30 {
        let kind = kind_of(seed);
        let a = serde_json::to_string(&generate_scenario(seed, kind)).unwrap();
        let b = serde_json::to_string(&generate_scenario(seed, kind)).unwrap();
        assert_eq!(a, b);
        let back: ScenarioSpec = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
        assert!(a.contains("\"format_version\":1"));
    }
}

#[test]
fn thousand_scenarios_satisfy_invariants() {
    for seed in 0..1000 {
        let spec = generate_scenario(seed, kind_of(seed));
        spec.check().unwrap();
        assert!(spec.horizon_steps >= 8 && spec.dt > 0.0);
        assert_eq!(spec.kind, kind_of(seed));
    }
}

#[test]
fn left_turn_route_bends_left() {
    for seed in 0..30 {
        for (kind, sign) in [(ScenarioKind::LeftTurn, -1.0), (ScenarioKind::RightTurn, 1.0)] {
            let spec = generate_scenario(seed, kind);
            let r = &spec.map.route;
            let bends = r.windows(3).any(|w| {
                let turn = wa_core::geometry::wrap_angle((w[2] - w[1]).angle() - (w[1] - w[0]).angle());
                turn * sign > 1e-3
            });
            assert!(bends, "{kind} seed {seed}");
            assert_eq!(
                ego_status(&spec, &spec.initial_state()).command,
                if sign < 0.0 { Command::Left } else { Command::Right }
            );
        }
        let spec = generate_scenario(seed, ScenarioKind::Straight);
        assert_eq!(ego_status(&spec, &spec.initial_state()).command, Command::Keep);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let good = open_spec(vec![], vec![square(50.0)]);
    good.check().unwrap();
    let mut s = good.clone();
    s.format_version = 2;
    assert!(s.check().is_err());
    let mut s = good.clone();
    s.dt = 0.0;
    assert!(s.check().is_err());
    let mut s = good.clone();
    s.horizon_steps = 5;
    assert!(s.check().is_err());
    let mut s = good.clone();
    s.ego_init.x = 80.0;
    assert!(s.check().is_err());
}

#[test]
fn episodes_replay_bit_identically() {
    for seed in 0..6 {
        let spec = generate_scenario(seed, kind_of(seed));
        let a = rollout_expert(&spec, &spec.initial_state(), 8);
        let b = rollout_expert(&spec, &spec.initial_state(), 8);
        assert_eq!(a.states, b.states);
        assert_eq!(a.controls, b.controls);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agent_count_is_constant(seed in 0u64..5000, k in 0usize..6) {
        let spec = generate_scenario(seed, ScenarioKind::ALL[k]);
        let ep = rollout_expert(&spec, &spec.initial_state(), spec.horizon_steps);
        prop_assert!(ep.states.iter().all(|s| s.agents.len() == spec.agents.len()));
    }

    #[test]
    fn grid_cells_are_binary_with_ego(seed in 0u64..5000, k in 0usize..6) {
        let spec = generate_scenario(seed, ScenarioKind::ALL[k]);
        let g = render_bev(&spec, &spec.initial_state(), &GridSpec::default());
        prop_assert!(g.cells.iter().all(|&c| c <= 1));
        prop_assert!(g.count(Channel::Ego) > 0);
    }
}
