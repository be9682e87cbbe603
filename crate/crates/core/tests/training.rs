use std::sync::Arc;

use nalgebra::DMatrix;
use polar_core::dtr::UniformPolicy;
use polar_core::linear::{GammaLinearParams, LinearStageModel, QuantifierScale};
use polar_core::optimizer::{polar_train, PolarConfig, StepSize};
use polar_core::pessimism::{
    build_modified_model, modified_reward, InitialLaw, ModifiedDtrModel, StageTransition,
};
use polar_core::policy::softmax;
use polar_core::rng::stream;
use polar_core::simenv::{generate_offline_dataset, SimEnv};
use polar_core::{value_mc, DtrModel, History, Policy, SoftmaxSievePolicy, StageFeatureMap};
use proptest::prelude::*;
use rand::Rng;

fn estimated_model(n: usize, c: f64) -> (ModifiedDtrModel, Vec<StageFeatureMap>) {
    let env = SimEnv::new();
    let behavior = UniformPolicy::new(env.spec());
    let data = generate_offline_dataset(&env, &behavior, n, 0.5, 41).unwrap();
    let features = StageFeatureMap::with_budget(env.spec(), 16).unwrap();
    let params = GammaLinearParams::theoretical(env.noise(), 0.1)
        .unwrap()
        .with_scale(QuantifierScale::Unit);
    let stages: Vec<Arc<dyn StageTransition>> = features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Arc::new(
                LinearStageModel::fit(
                    f.clone(),
                    &data.trajectories,
                    k,
                    1.0,
                    env.noise().clone(),
                    &params,
                    env.spec().state_box(k + 1).clone(),
                )
                .unwrap(),
            ) as Arc<dyn StageTransition>
        })
        .collect();
    let model = build_modified_model(
        env.spec().clone(),
        stages,
        env.rewards(),
        vec![c; 3],
        8,
        InitialLaw::UniformBox,
    )
    .unwrap();
    (model, features)
}

fn small_config(seed: u64) -> PolarConfig {
    PolarConfig {
        iterations: 3,
        m_k: vec![32, 32, 80],
        q_rollouts: 4,
        step_size: StepSize::Constant { eta: 0.3 },
        seed,
        ridge_fallback: true,
    }
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let (model, features) = estimated_model(150, 5.0);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                polar_train(
                    &model,
                    SoftmaxSievePolicy::uniform(features.clone()),
                    &small_config(7),
                    None,
                )
            })
            .unwrap()
    };
    let (a, trace) = run(1);
    let (b, _) = run(3);
    for k in 0..3 {
        assert_eq!(a.theta(k), b.theta(k));
    }
    assert_eq!(trace.len(), 4);
    assert_eq!(trace.records[0].iteration, 0);
    assert!(trace.records[0].policy.theta(0).iter().all(|v| *v == 0.0));
    let per_iter: u64 = [32, 32, 80]
        .iter()
        .zip(&features)
        .map(|(m, f)| m * f.n_action_histories() as u64)
        .sum();
    assert_eq!(trace.q_evaluations, 3 * per_iter);

    let (c, _) = polar_train(
        &model,
        SoftmaxSievePolicy::uniform(features),
        &small_config(8),
        None,
    )
    .unwrap();
    assert_ne!(a.theta(2), c.theta(2));
}

#[test]
fn eval_hook_sees_every_snapshot() {
    let (model, features) = estimated_model(100, 0.0);
    let seen = std::sync::Mutex::new(Vec::new());
    let hook = |t: usize, p: &SoftmaxSievePolicy| {
        seen.lock().unwrap().push(t);
        value_mc(&model, p, 50, 3)
    };
    let (_, trace) = polar_train(
        &model,
        SoftmaxSievePolicy::uniform(features),
        &small_config(1),
        Some(&hook),
    )
    .unwrap();
    assert_eq!(*seen.lock().unwrap(), vec![0, 1, 2, 3]);
    assert!(trace.records.iter().all(|r| r.value.is_some()));
}

#[test]
fn training_improves_the_modified_value() {
    let (model, features) = estimated_model(200, 0.0);
    let mut cfg = small_config(2);
    cfg.iterations = 8;
    cfg.q_rollouts = 8;
    let uniform = SoftmaxSievePolicy::uniform(features);
    let before = value_mc(&model, &uniform, 4000, 5).unwrap();
    let (trained, _) = polar_train(&model, uniform, &cfg, None).unwrap();
    let after = value_mc(&model, &trained, 4000, 5).unwrap();
    assert!(
        after.mean > before.mean + 3.0 * (after.stderr + before.stderr),
        "{after:?} vs {before:?}"
    );
}

#[test]
fn penalties_lower_the_modified_value() {
    let (base, features) = estimated_model(100, 0.0);
    let policy = SoftmaxSievePolicy::uniform(features);
    let mut last = f64::INFINITY;
    for c in [0.0, 1.0, 5.0, 20.0] {
        let m = base.with_penalties(vec![c; 3]).unwrap();
        let v = value_mc(&m, &policy, 500, 9).unwrap().mean;
        assert!(v <= last + 1e-12, "c = {c}: {v} > {last}");
        last = v;
    }
}

#[test]
fn theorem_step_sizes_shrink_with_the_penalty() {
    let (base, _) = estimated_model(50, 0.0);
    let cfg = PolarConfig {
        iterations: 16,
        step_size: StepSize::Theorem {
            gamma_max: 2.0,
            scale: 1.0,
        },
        ..PolarConfig::default()
    };
    let small = cfg.step_sizes(&base.with_penalties(vec![1.0; 3]).unwrap());
    let large = cfg.step_sizes(&base.with_penalties(vec![10.0; 3]).unwrap());
    for (s, l) in small.iter().zip(&large) {
        assert!(l < s);
    }
    // stage 2 alone: sqrt(ln 2) / ((‖r̄‖∞ + 2c) · 4)
    let bound = SimEnv::new().reward_bounds()[2];
    assert!((small[2] - 2f64.ln().sqrt() / ((bound + 2.0) * 4.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_is_normalized_and_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..6),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let moved: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&moved)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_probabilities_ignore_common_column_offsets(seed in any::<u64>()) {
        let env = SimEnv::new();
        let features = StageFeatureMap::with_budget(env.spec(), 16).unwrap();
        let mut rng = stream(seed);
        let k = rng.random_range(0..3);
        let f = &features[k];
        let theta: Vec<DMatrix<f64>> = features
            .iter()
            .map(|g| DMatrix::from_fn(g.basis_size(), g.n_action_histories(), |_, _| rng.random::<f64>() * 4.0 - 2.0))
            .collect();
        let policy = SoftmaxSievePolicy::from_parts(features.clone(), theta.clone()).unwrap();
        let prefix: Vec<usize> = (0..k).map(|_| rng.random_range(0..2)).collect();
        // the same vector added to both action columns under this prefix
        let offset: Vec<f64> = (0..f.basis_size()).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let mut shifted = theta;
        for a in 0..2 {
            let col = f.actions.encode_extended(&prefix, a).unwrap();
            for (i, o) in offset.iter().enumerate() {
                shifted[k][(i, col)] += o;
            }
        }
        let other = SoftmaxSievePolicy::from_parts(features, shifted).unwrap();
        let states = env.spec().sample_state_history(k, &mut rng);
        let h = History::from_parts(states, prefix).unwrap();
        let (p, q) = (policy.action_probs(k, &h), other.action_probs(k, &h));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn modified_reward_is_monotone(r in -10.0f64..10.0, g in 0.0f64..2.0, c1 in 0.0f64..50.0, dc in 0.0f64..50.0) {
        let lo = modified_reward(r, g, c1 + dc).unwrap();
        let hi = modified_reward(r, g, c1).unwrap();
        prop_assert!(lo <= hi && hi <= r);
        prop_assert!(modified_reward(r, g, -1.0).is_err());
    }
}

#[test]
fn uniform_policy_has_uniform_probabilities() {
    let env = SimEnv::new();
    let p = SoftmaxSievePolicy::uniform(StageFeatureMap::with_budget(env.spec(), 16).unwrap());
    let mut rng = stream(0);
    let h = History::new(env.sample_initial(&mut rng));
    assert_eq!(p.action_probs(0, &h), vec![0.5, 0.5]);
}
