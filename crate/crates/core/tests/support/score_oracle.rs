//! Brute-force scoring built from first principles: polygon clipping
//! for overlap area, winding numbers for containment, dense time
//! sampling for time-to-collision and dense arc-length search for route
//! progress.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wa_core::evaluation::{score_scenario, EpisodeTrace, SubScores, COMFORT_ACCEL, COMFORT_JERK, COMFORT_YAW_RATE, TTC_WINDOW};
use wa_core::geometry::Vec2;
use wa_core::microworld::{generate_scenario, ScenarioKind, ScenarioSpec, Trajectory, EGO_LENGTH, EGO_WIDTH};

pub struct Rect {
    pub corners: [Vec2; 4],
}

impl Rect {
    pub fn new(c: Vec2, heading: f64, length: f64, width: f64) -> Self {
        let (s, co) = heading.sin_cos();
        let f = Vec2::new(co, s);
        let r = Vec2::new(-s, co);
        let (hl, hw) = (length / 2.0, width / 2.0);
        let at = |a: f64, b: f64| Vec2::new(c.x + f.x * a + r.x * b, c.y + f.y * a + r.y * b);
        Self {
            corners: [at(hl, hw), at(hl, -hw), at(-hl, -hw), at(-hl, hw)],
        }
    }

    pub fn shifted(&self, d: Vec2) -> Self {
        Self {
            corners: self.corners.map(|p| Vec2::new(p.x + d.x, p.y + d.y)),
        }
    }

    /// Area of the intersection, by clipping `o` against each edge of
    /// `self` in turn.
    pub fn overlap_area(&self, o: &Rect) -> f64 {
        let mut poly: Vec<Vec2> = o.corners.to_vec();
        let ccw = area(&self.corners) > 0.0;
        for i in 0..4 {
            let (a, b) = (self.corners[i], self.corners[(i + 1) % 4]);
            let inside = |p: Vec2| if ccw { orient(a, b, p) >= 0.0 } else { orient(a, b, p) <= 0.0 };
            let mut out = Vec::new();
            for j in 0..poly.len() {
                let (p, q) = (poly[j], poly[(j + 1) % poly.len()]);
                if inside(p) {
                    out.push(p);
                }
                if inside(p) != inside(q) {
                    let (dp, dq) = (orient(a, b, p), orient(a, b, q));
                    let t = dp / (dp - dq);
                    out.push(Vec2::new(p.x + (q.x - p.x) * t, p.y + (q.y - p.y) * t));
                }
            }
            poly = out;
            if poly.is_empty() {
                return 0.0;
            }
        }
        area(&poly).abs()
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.overlap_area(o) > 1e-9
    }
}

fn area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i].x * poly[(i + 1) % n].y - poly[(i + 1) % n].x * poly[i].y)
        .sum::<f64>()
        / 2.0
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Winding number of `poly` around `p`.
fn winding(p: Vec2, poly: &[Vec2]) -> i32 {
    let mut w = 0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let side = orient(a, b, p);
        if a.y <= p.y {
            if b.y > p.y && side > 0.0 {
                w += 1;
            }
        } else if b.y <= p.y && side < 0.0 {
            w -= 1;
        }
    }
    w
}

pub fn on_map(spec: &ScenarioSpec, p: Vec2) -> bool {
    spec.map.drivable.iter().any(|poly| winding(p, poly) != 0)
}

/// Arc length of the route point nearest to `p`, by dense sampling.
pub fn route_station(spec: &ScenarioSpec, p: Vec2) -> f64 {
    let pts = &spec.map.route;
    let (mut best, mut best_s, mut base) = (f64::INFINITY, 0.0, 0.0);
    for w in pts.windows(2) {
        let seg = Vec2::new(w[1].x - w[0].x, w[1].y - w[0].y);
        let len = seg.norm();
        let n = (len / 0.001).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let q = Vec2::new(w[0].x + seg.x * t, w[0].y + seg.y * t);
            let d = ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt();
            if d < best {
                best = d;
                best_s = base + len * t;
            }
        }
        base += len;
    }
    best_s
}

pub const TTC_SAMPLES: usize = 2000;

pub fn scores(executed: &Trajectory, spec: &ScenarioSpec, trace: &EpisodeTrace) -> SubScores {
    let n = spec.horizon_steps;
    let dt = spec.dt;
    let init = spec.ego_init;
    let mut pos = vec![Vec2::new(init.x, init.y)];
    pos.extend_from_slice(&executed.points[..n]);
    let mut vel = vec![Vec2::new(init.heading.cos() * init.speed, init.heading.sin() * init.speed)];
    let mut head = vec![init.heading];
    for k in 1..=n {
        let v = Vec2::new((pos[k].x - pos[k - 1].x) / dt, (pos[k].y - pos[k - 1].y) / dt);
        head.push(if v.norm() > 1e-6 { v.y.atan2(v.x) } else { head[k - 1] });
        vel.push(v);
    }
    let (mut nc, mut ttc, mut dac) = (1.0, 1.0, 1.0);
    for k in 0..=n {
        let ego = Rect::new(pos[k], head[k], EGO_LENGTH, EGO_WIDTH);
        for a in &trace.agents[k] {
            let av = Vec2::new(a.pose.heading.cos() * a.speed, a.pose.heading.sin() * a.speed);
            let other = Rect::new(a.pose.position(), a.pose.heading, a.length, a.width);
            if ego.overlaps(&other) {
                let to = Vec2::new(a.pose.x - pos[k].x, a.pose.y - pos[k].y);
                if vel[k].x * to.x + vel[k].y * to.y > 0.0 {
                    nc = 0.0;
                }
            }
            let hit = (0..=TTC_SAMPLES).any(|s| {
                let t = TTC_WINDOW * s as f64 / TTC_SAMPLES as f64;
                ego.shifted(Vec2::new(vel[k].x * t, vel[k].y * t))
                    .overlaps(&other.shifted(Vec2::new(av.x * t, av.y * t)))
            });
            if hit {
                ttc = 0.0;
            }
        }
        if ego.corners.iter().any(|&c| !on_map(spec, c)) {
            dac = 0.0;
        }
    }
    let speed: Vec<f64> = vel.iter().map(|v| v.norm()).collect();
    let mut accel = vec![0.0];
    for k in 1..=n {
        accel.push((speed[k] - speed[k - 1]) / dt);
    }
    let comfortable = (1..=n).all(|k| {
        let jerk = (accel[k] - accel[k - 1]) / dt;
        let mut dh = head[k] - head[k - 1];
        while dh > std::f64::consts::PI {
            dh -= 2.0 * std::f64::consts::PI;
        }
        while dh <= -std::f64::consts::PI {
            dh += 2.0 * std::f64::consts::PI;
        }
        accel[k].abs() <= COMFORT_ACCEL && jerk.abs() <= COMFORT_JERK && (dh / dt).abs() <= COMFORT_YAW_RATE
    });
    let s0 = route_station(spec, pos[0]);
    let progress = route_station(spec, pos[n]) - s0;
    let expert = route_station(spec, trace.expert.points[n - 1]) - s0;
    let ep = if expert.abs() < 1e-6 { 1.0 } else { (progress / expert).clamp(0.0, 1.0) };
    SubScores {
        nc,
        dac,
        ttc,
        comf: if comfortable { 1.0 } else { 0.0 },
        ep,
    }
}

pub fn stationary(spec: &ScenarioSpec) -> Trajectory {
    let p = spec.ego_init.pose().position();
    Trajectory::new(vec![p; spec.horizon_steps])
}

/// Expert, stationary, constant-velocity and randomly perturbed plans.
pub fn candidate_plans(spec: &ScenarioSpec, trace: &EpisodeTrace, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Trajectory)> {
    let init = spec.ego_init;
    let dir = Vec2::new(init.heading.cos(), init.heading.sin());
    let straight = (1..=spec.horizon_steps)
        .map(|k| {
            let d = init.speed * spec.dt * k as f64;
            Vec2::new(init.x + dir.x * d, init.y + dir.y * d)
        })
        .collect();
    let amp = rng.gen_range(0.2..3.0);
    let stretch = rng.gen_range(0.6..1.4);
    let base = init.pose().position();
    let perturbed = trace
        .expert
        .points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let lat = amp * rng.gen_range(-1.0..1.0) * (k as f64 + 1.0) / spec.horizon_steps as f64;
            Vec2::new(
                base.x + (p.x - base.x) * stretch - dir.y * lat,
                base.y + (p.y - base.y) * stretch + dir.x * lat,
            )
        })
        .collect();
    vec![
        ("expert", trace.expert.clone()),
        ("stationary", stationary(spec)),
        ("straight", Trajectory::new(straight)),
        ("perturbed", Trajectory::new(perturbed)),
    ]
}

/// Outcome of comparing the scorer with the oracle over a batch of scenarios.
pub struct Sweep {
    pub disagreements: Vec<String>,
    /// Per sub-score, how many plans scored below 1.
    pub below_max: [usize; 5],
    pub plans: usize,
}

/// Scores every candidate plan for `count` scenarios seeded from
/// `first_seed` with both the scorer and the oracle.
pub fn sweep(first_seed: u64, count: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Sweep {
        disagreements: Vec::new(),
        below_max: [0; 5],
        plans: 0,
    };
    for i in 0..count {
        let seed = first_seed + i;
        let spec = generate_scenario(seed, ScenarioKind::ALL[(i % 6) as usize]);
        let trace = EpisodeTrace::new(&spec);
        for (name, plan) in candidate_plans(&spec, &trace, &mut rng) {
            let got = score_scenario(&plan, &spec, &trace).unwrap();
            let want = scores(&plan, &spec, &trace);
            let binary_match = got.nc == want.nc && got.dac == want.dac && got.ttc == want.ttc && got.comf == want.comf;
            if !binary_match || (got.ep - want.ep).abs() > 1e-3 {
                out.disagreements.push(format!("seed {seed} {name}: scorer {got:?} oracle {want:?}"));
            }
            for (k, v) in got.as_array().iter().enumerate() {
                out.below_max[k] += (*v < 1.0) as usize;
            }
            out.plans += 1;
        }
    }
    out
}
