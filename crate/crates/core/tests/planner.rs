use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wa_core::microworld::{generate_scenario, ScenarioKind};
use wa_core::nn::B;
use wa_core::perception::{CurrentObservation, PerceptionBatch};
use wa_core::planner::{
    attach_phase2, forward, future_tokens, has_phase2, init_phase1, plan_batch, select_mode, wm_qformer, ModelConfig,
};
use wa_core::world_model::FutureFeatures;
use wa_tensor::{Bound, ParamStore, Tape, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        modes: 3,
        plan_steps: 4,
        wm_frames: 3,
        wm_queries: 2,
        wm_channels: 4,
        n_rays: 8,
        enc_blocks: 1,
        ..ModelConfig::closed_loop()
    }
    .with_grid(16, 16, 2.0)
}

fn observe(seed: u64, cfg: &ModelConfig) -> CurrentObservation {
    let spec = generate_scenario(seed, ScenarioKind::ALL[(seed % 6) as usize]);
    CurrentObservation::capture(&spec, &spec.initial_state(), &cfg.grid, cfg.n_rays)
}

fn random_future(cfg: &ModelConfig, frames: usize, seed: u64) -> FutureFeatures {
    let shape = [frames, cfg.wm_channels, cfg.feature_rows(), cfg.feature_cols()];
    FutureFeatures {
        values: Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        t_d: 100,
        frame_times: (1..=frames).collect(),
    }
}

fn full_model(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut p = init_phase1(cfg, seed).unwrap();
    attach_phase2(&mut p, cfg, seed).unwrap();
    p
}

/// Moves every zero-initialised output projection off zero.
fn perturb_phase2(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names.iter().filter(|n| n.starts_with("qf.") || n.starts_with("plan.s2.")) {
        let t = store.get_mut(n).unwrap();
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
}

#[test]
fn output_shapes_across_the_configuration_matrix() {
    for modes in [1, 6, 8, 20] {
        for plan_steps in [6, 8] {
            for frames in [6, 8] {
                for heads in [2, 4] {
                    for dim in [32, 64] {
                        let cfg = ModelConfig {
                            dim,
                            heads,
                            modes,
                            plan_steps,
                            wm_frames: frames,
                            ..small()
                        };
                        let params = full_model(&cfg, 1);
                        let obs = [observe(1, &cfg), observe(2, &cfg)];
                        let fut = [random_future(&cfg, frames, 3), random_future(&cfg, frames, 4)];
                        let plans = plan_batch(&params, &cfg, &[&obs[0], &obs[1]], Some(&[&fut[0], &fut[1]])).unwrap();
                        assert_eq!(plans.len(), 2);
                        for p in &plans {
                            assert_eq!(p.trajectories.len(), modes);
                            assert!(p.trajectories.iter().all(|t| t.points.len() == plan_steps));
                            assert_eq!(p.mode_scores.len(), modes);
                            assert!(p.selected < modes);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn attaching_the_future_stage_preserves_outputs_exactly() {
    let cfg = small();
    let base = init_phase1(&cfg, 6).unwrap();
    let mut full = base.clone();
    attach_phase2(&mut full, &cfg, 6).unwrap();
    for seed in 0..6 {
        let obs = observe(seed, &cfg);
        let fut = random_future(&cfg, cfg.wm_frames, seed);
        let without = plan_batch(&base, &cfg, &[&obs], None).unwrap();
        let with = plan_batch(&full, &cfg, &[&obs], Some(&[&fut])).unwrap();
        assert_eq!(without, with);
    }
}

#[test]
fn permuting_mode_queries_permutes_plans() {
    let cfg = small();
    let mut params = full_model(&cfg, 2);
    perturb_phase2(&mut params, 2);
    let perm = [2, 0, 1];
    let t = cfg.plan_steps;
    let queries = params.get("plan.queries").unwrap().clone();
    let c = queries.cols();
    let data: Vec<f64> = perm
        .iter()
        .flat_map(|&m| queries.data()[m * t * c..(m + 1) * t * c].to_vec())
        .collect();
    let mut swapped = params.clone();
    *swapped.get_mut("plan.queries").unwrap() = Tensor::new(queries.shape(), data).unwrap();
    let obs = observe(3, &cfg);
    let fut = random_future(&cfg, cfg.wm_frames, 5);
    let a = plan_batch(&params, &cfg, &[&obs], Some(&[&fut])).unwrap().remove(0);
    let b = plan_batch(&swapped, &cfg, &[&obs], Some(&[&fut])).unwrap().remove(0);
    for (i, &m) in perm.iter().enumerate() {
        assert!((a.mode_scores[m] - b.mode_scores[i]).abs() < 1e-12);
        for (p, q) in a.trajectories[m].points.iter().zip(&b.trajectories[i].points) {
            assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
    }
}

#[test]
fn planner_gradients_match_finite_differences() {
    let cfg = small();
    let mut params = full_model(&cfg, 8);
    perturb_phase2(&mut params, 8);
    let obs = [observe(5, &cfg), observe(6, &cfg)];
    let fut = [random_future(&cfg, cfg.wm_frames, 1), random_future(&cfg, cfg.wm_frames, 2)];
    let batch = PerceptionBatch::new(&[&obs[0], &obs[1]], cfg.patch).unwrap();
    let tokens = future_tokens(&[&fut[0], &fut[1]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let rows = 2 * cfg.modes * cfg.plan_steps;
    let w_way = Tensor::randn(&[rows, 2], 1.0, &mut rng);
    let w_score = Tensor::randn(&[2, cfg.modes], 1.0, &mut rng);
    let w_bev = Tensor::randn(&[8, cfg.patch * cfg.patch], 1.0, &mut rng);
    let readout = |store: &ParamStore, trainable: bool| {
        let tape = Tape::new();
        let b: B = Bound::new(store, &tape, trainable);
        let out = forward(&b, &cfg, &batch, Some(&tokens)).unwrap();
        let l = out
            .decoded
            .waypoints
            .mul(tape.constant(w_way.clone()))
            .unwrap()
            .sum()
            .add(out.decoded.scores.mul(tape.constant(w_score.clone())).unwrap().sum())
            .unwrap()
            .add(out.bev_logits.mul(tape.constant(w_bev.clone())).unwrap().sum())
            .unwrap();
        let value = l.value().item();
        let grads = if trainable { Some(b.collect(&tape.backward(l).unwrap())) } else { None };
        (value, grads)
    };
    let grads = readout(&params, true).1.unwrap();
    let mut checked = 0;
    for name in params.names() {
        let g = &grads[name];
        let n = params.get(name).unwrap().len();
        for j in [0, n / 3, n - 1] {
            let h = 1e-5;
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (readout(&plus, false).0 - readout(&minus, false).0) / (2.0 * h);
            let analytic = g.data()[j];
            assert!(
                (numeric - analytic).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{name}[{j}]: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 3 * params.len());
}

#[test]
fn waypoints_are_running_sums_of_offsets() {
    let cfg = small();
    let params = init_phase1(&cfg, 4).unwrap();
    let obs = observe(9, &cfg);
    let batch = PerceptionBatch::new(&[&obs], cfg.patch).unwrap();
    let tape = Tape::new();
    let b: B = Bound::new(&params, &tape, false);
    let out = forward(&b, &cfg, &batch, None).unwrap();
    let off = out.decoded.offsets.value();
    let way = out.decoded.waypoints.value();
    for m in 0..cfg.modes {
        let (mut x, mut y) = (0.0, 0.0);
        for k in 0..cfg.plan_steps {
            let r = m * cfg.plan_steps + k;
            x += off.data()[2 * r];
            y += off.data()[2 * r + 1];
            assert!((way.data()[2 * r] - x).abs() < 1e-12);
            assert!((way.data()[2 * r + 1] - y).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_frames_compress_identically_without_time_embeddings() {
    let cfg = ModelConfig {
        time_embeddings: false,
        ..small()
    };
    let mut params = full_model(&cfg, 3);
    perturb_phase2(&mut params, 3);
    let one = random_future(&cfg, 1, 12);
    let mut data = Vec::new();
    for _ in 0..cfg.wm_frames {
        data.extend_from_slice(one.values.data());
    }
    let mut shape = one.values.shape().to_vec();
    shape[0] = cfg.wm_frames;
    let fut = FutureFeatures {
        values: Tensor::new(&shape, data).unwrap(),
        t_d: 100,
        frame_times: (1..=cfg.wm_frames).collect(),
    };
    let tape = Tape::new();
    let b: B = Bound::new(&params, &tape, false);
    let out = wm_qformer(&b, &cfg, &future_tokens(&[&fut]).unwrap(), 1).unwrap().value();
    let per_frame = cfg.wm_queries * cfg.dim;
    let first = &out.data()[..per_frame];
    for k in 1..cfg.wm_frames {
        for (x, y) in out.data()[k * per_frame..(k + 1) * per_frame].iter().zip(first) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let timed = small();
    let mut params = full_model(&timed, 3);
    perturb_phase2(&mut params, 3);
    let tape = Tape::new();
    let b: B = Bound::new(&params, &tape, false);
    let out = wm_qformer(&b, &timed, &future_tokens(&[&fut]).unwrap(), 1).unwrap().value();
    assert_ne!(&out.data()[..per_frame], &out.data()[per_frame..2 * per_frame]);
}

#[test]
fn mode_selection_takes_the_first_maximum() {
    assert_eq!(select_mode(&[0.5]), 0);
    assert_eq!(select_mode(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(select_mode(&[2.0, 2.0, 2.0]), 0);
    assert_eq!(select_mode(&[-5.0, -1.0, -3.0]), 1);
    assert_eq!(select_mode(&[0.0, 0.0, 1e-300]), 2);
}

#[test]
fn initialisation_is_seeded_and_the_future_stage_is_optional() {
    let cfg = small();
    assert_eq!(init_phase1(&cfg, 1).unwrap(), init_phase1(&cfg, 1).unwrap());
    assert_ne!(init_phase1(&cfg, 1).unwrap(), init_phase1(&cfg, 2).unwrap());
    let mut p = init_phase1(&cfg, 1).unwrap();
    assert!(!has_phase2(&p));
    let obs = observe(1, &cfg);
    let fut = random_future(&cfg, cfg.wm_frames, 1);
    assert!(plan_batch(&p, &cfg, &[&obs], Some(&[&fut])).is_err());
    let plans = plan_batch(&p, &cfg, &[&obs], None).unwrap();
    assert_eq!(plans, plan_batch(&p, &cfg, &[&obs], None).unwrap());
    attach_phase2(&mut p, &cfg, 1).unwrap();
    assert!(has_phase2(&p));
    assert!(attach_phase2(&mut p, &cfg, 1).is_err());
    let bad = ModelConfig { dim: 10, ..cfg.clone() };
    assert!(init_phase1(&bad, 1).is_err());
    let bad = ModelConfig { patch: 5, ..cfg };
    assert!(init_phase1(&bad, 1).is_err());
}
