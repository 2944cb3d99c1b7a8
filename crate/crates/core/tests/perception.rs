use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wa_core::microworld::{generate_scenario, ScenarioKind};
use wa_core::nn::B;
use wa_core::perception::{encode_current, token_count, CurrentObservation, PerceptionBatch, EGO_FEATURES};
use wa_core::planner::{init_phase1, ModelConfig};
use wa_tensor::{Bound, ParamStore, Tape, Tensor};

fn small(blocks: usize, positional: bool) -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        n_rays: 8,
        enc_blocks: blocks,
        positional,
        ..ModelConfig::closed_loop()
    }
    .with_grid(16, 16, 2.0)
}

fn observe(seed: u64, cfg: &ModelConfig) -> CurrentObservation {
    let spec = generate_scenario(seed, ScenarioKind::ALL[(seed % 6) as usize]);
    CurrentObservation::capture(&spec, &spec.initial_state(), &cfg.grid, cfg.n_rays)
}

fn tokens(params: &ParamStore, cfg: &ModelConfig, batch: &PerceptionBatch) -> Tensor {
    let tape = Tape::new();
    let b: B = Bound::new(params, &tape, false);
    let t = encode_current(&b, cfg, batch).unwrap().tokens.value();
    (*t).clone()
}

fn row(t: &Tensor, r: usize) -> &[f64] {
    let c = t.cols();
    &t.data()[r * c..(r + 1) * c]
}

#[test]
fn default_token_count_is_patches_plus_range_and_ego() {
    assert_eq!(token_count(&ModelConfig::closed_loop()), 66);
    assert_eq!(token_count(&small(1, true)), 6);
}

#[test]
fn encoder_output_shape_and_batch_independence() {
    let cfg = small(2, true);
    let params = init_phase1(&cfg, 4).unwrap();
    let (a, b) = (observe(1, &cfg), observe(2, &cfg));
    let both = tokens(&params, &cfg, &PerceptionBatch::new(&[&a, &b], cfg.patch).unwrap());
    assert_eq!(both.shape(), &[12, 8]);
    let alone = tokens(&params, &cfg, &PerceptionBatch::new(&[&b], cfg.patch).unwrap());
    for r in 0..6 {
        for (x, y) in row(&both, 6 + r).iter().zip(row(&alone, r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn speed_change_touches_only_the_ego_token_before_mixing() {
    let cfg = small(0, true);
    let params = init_phase1(&cfg, 9).unwrap();
    let base = observe(3, &cfg);
    let mut faster = base.clone();
    faster.ego.speed += 2.0;
    let t0 = tokens(&params, &cfg, &PerceptionBatch::new(&[&base], cfg.patch).unwrap());
    let t1 = tokens(&params, &cfg, &PerceptionBatch::new(&[&faster], cfg.patch).unwrap());
    for r in 0..5 {
        assert_eq!(row(&t0, r), row(&t1, r));
    }
    assert_ne!(row(&t0, 5), row(&t1, 5));

    let mixed = small(1, true);
    let params = init_phase1(&mixed, 9).unwrap();
    let t0 = tokens(&params, &mixed, &PerceptionBatch::new(&[&base], mixed.patch).unwrap());
    let t1 = tokens(&params, &mixed, &PerceptionBatch::new(&[&faster], mixed.patch).unwrap());
    assert_ne!(row(&t0, 0), row(&t1, 0));
}

#[test]
fn patch_tokens_are_permutation_equivariant_without_positions() {
    let cfg = small(2, false);
    let params = init_phase1(&cfg, 5).unwrap();
    let obs = observe(7, &cfg);
    let batch = PerceptionBatch::new(&[&obs], cfg.patch).unwrap();
    let perm = [2, 0, 3, 1];
    let d = batch.patches.cols();
    let permuted_data: Vec<f64> = perm.iter().flat_map(|&p| row(&batch.patches, p).to_vec()).collect();
    let permuted = PerceptionBatch {
        patches: Tensor::new(&[4, d], permuted_data).unwrap(),
        ..batch.clone()
    };
    let t0 = tokens(&params, &cfg, &batch);
    let t1 = tokens(&params, &cfg, &permuted);
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in row(&t1, i).iter().zip(row(&t0, p)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for r in 4..6 {
        for (x, y) in row(&t1, r).iter().zip(row(&t0, r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = small(1, true);
    let params = init_phase1(&cfg, 2).unwrap();
    let (a, b) = (observe(4, &cfg), observe(11, &cfg));
    let batch = PerceptionBatch::new(&[&a, &b], cfg.patch).unwrap();
    let weights = Tensor::randn(&[12, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let loss = |store: &ParamStore| -> f64 {
        let t = tokens(store, &cfg, &batch);
        t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum()
    };
    let tape = Tape::new();
    let bound: B = Bound::new(&params, &tape, true);
    let out = encode_current(&bound, &cfg, &batch).unwrap().tokens;
    let l = out.mul(tape.constant(weights.clone())).unwrap().sum();
    let grads = bound.collect(&tape.backward(l).unwrap());
    let mut checked = 0;
    for name in params.names().filter(|n| n.starts_with("enc.")) {
        let g = &grads[name];
        let n = params.get(name).unwrap().len();
        for j in [0, n / 2, n - 1] {
            let h = 1e-5;
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = g.data()[j];
            assert!(
                (numeric - analytic).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{name}[{j}]: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn observation_features_and_validation() {
    let cfg = small(1, true);
    let obs = observe(8, &cfg);
    let ego = obs.ego_features();
    assert_eq!(ego.len(), EGO_FEATURES);
    assert_eq!(ego[3..].iter().sum::<f64>(), 1.0);
    assert!(obs.range_features().iter().all(|&r| r > 0.0 && r <= 1.0));
    let mut bad = obs.clone();
    bad.ranges[0] = f64::NAN;
    assert!(bad.check().is_err());
    assert!(PerceptionBatch::new(&[&bad], cfg.patch).is_err());
    let mut short = obs.clone();
    short.ranges.pop();
    assert!(PerceptionBatch::new(&[&obs, &short], cfg.patch).is_err());
    assert!(PerceptionBatch::new(&[], cfg.patch).is_err());
}
