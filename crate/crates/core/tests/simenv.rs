use std::sync::Arc;

use polar_core::baselines::{make_behavior_policy, BehaviorPolicy};
use polar_core::dtr::{FixedActionPolicy, UniformPolicy};
use polar_core::rng::{stream, substream};
use polar_core::simenv::{
    generate_offline_dataset, mean_transition, sidecar_path, terminal_reward, OfflineDataset,
    SimEnv, TRANSITION_MATRICES,
};
use polar_core::{DtrModel, History, Policy, StreamRng};
use rand::Rng;

#[test]
fn transition_matrix_checksums() {
    let total: f64 = TRANSITION_MATRICES
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .sum();
    assert!((total - 6.2).abs() < 1e-12);
    let weighted: f64 = TRANSITION_MATRICES
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .enumerate()
        .map(|(i, w)| (i + 1) as f64 * w)
        .sum();
    assert!((weighted - 107.4).abs() < 1e-9, "{weighted}");
    assert_eq!(mean_transition(0, &[0.5, 0.5], 1), [0.5, 0.5]);
}

#[test]
fn initial_states_are_uniform() {
    let env = SimEnv::new();
    let n = 4000;
    let mut rng = stream(1);
    for coord in 0..2 {
        let mut xs: Vec<f64> = (0..n)
            .map(|_| env.sample_initial(&mut rng)[coord])
            .collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                ((i + 1) as f64 / n as f64 - x)
                    .abs()
                    .max((x - i as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov critical value at the 1% level
        assert!(d < 1.63 / (n as f64).sqrt(), "KS statistic {d}");
    }
}

#[test]
fn noise_has_the_scaled_beta_moments() {
    let env = SimEnv::new();
    let n = 20_000;
    let mut rng = stream(2);
    let h = History::new(vec![0.3, 0.8]);
    let mean = mean_transition(0, &[0.3, 0.8], 0);
    let draws: Vec<Vec<f64>> = (0..n).map(|_| env.transition(0, &h, 0, &mut rng)).collect();
    for i in 0..2 {
        let eps: Vec<f64> = draws.iter().map(|s| s[i] - mean[i]).collect();
        let m = eps.iter().sum::<f64>() / n as f64;
        let v = eps.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(eps.iter().all(|e| e.abs() <= 0.4 + 1e-12));
        // Var = 0.8² · Var(Beta(2,2)) = 0.032
        assert!(m.abs() < 4.0 * (0.032 / n as f64).sqrt());
        assert!((v - 0.032).abs() < 0.0015, "variance {v}");
    }
}

#[test]
fn expected_terminal_reward_matches_realized_average() {
    let env = SimEnv::new();
    let mut rng = stream(4);
    for _ in 0..5 {
        let states: Vec<Vec<f64>> = (0..3)
            .map(|k| env.spec().state_box(k).sample_uniform(&mut rng))
            .collect();
        let h = History::from_parts(states, vec![1, 0]).unwrap();
        for a in 0..2 {
            let exact = env.expected_reward(2, &h, a, &mut rng);
            let n = 20_000;
            let avg: f64 = (0..n)
                .map(|_| {
                    let next = env.transition(2, &h, a, &mut rng);
                    env.realized_reward(2, &h, a, &next).unwrap()
                })
                .sum::<f64>()
                / n as f64;
            // reward sd is at most 3.8 · 2 · sqrt(5 · 0.032) ≈ 3.04, so 4 SE ≈ 0.09
            assert!((avg - exact).abs() < 0.09, "{avg} vs {exact}");
        }
    }
    assert!((terminal_reward(&[0.0, 0.0], 0, &[0.0, 0.0]) - 3.8 * (3.0 - 1.37)).abs() < 1e-12);
}

#[test]
fn trajectories_stay_in_their_boxes() {
    let env = SimEnv::new();
    let policy = UniformPolicy::new(env.spec());
    let mut rng = stream(6);
    for _ in 0..2000 {
        let t = polar_core::sample_trajectory(&env, &policy, &mut rng).unwrap();
        for (k, s) in t.states.iter().enumerate() {
            assert!(env.spec().state_box(k).contains(s));
        }
        assert!(t.rewards[2].abs() <= env.reward_bounds()[2]);
    }
}

fn behavior_from_fixed(p: f64) -> BehaviorPolicy {
    let best: Arc<dyn Policy> = Arc::new(FixedActionPolicy {
        actions: vec![1, 0, 1],
        action_counts: vec![2; 3],
    });
    make_behavior_policy(best, p, &[2, 2, 2]).unwrap()
}

#[test]
fn behavior_policy_frequencies() {
    let env = SimEnv::new();
    for p in [0.55, 0.75, 0.95] {
        let data = generate_offline_dataset(&env, &behavior_from_fixed(p), 5000, p, 3).unwrap();
        for (k, best) in [1, 0, 1].into_iter().enumerate() {
            let hits = data
                .trajectories
                .iter()
                .filter(|t| t.actions[k] == best)
                .count() as f64
                / 5000.0;
            let se = (p * (1.0 - p) / 5000.0).sqrt();
            assert!((hits - p).abs() < 4.0 * se, "p = {p}, stage {k}: {hits}");
            for probs in &data.behavior_probs {
                assert!(probs[k] == p || probs[k] == 1.0 - p);
            }
        }
    }
}

#[test]
fn dataset_generation_is_reproducible_and_round_trips() {
    let env = SimEnv::new();
    let b = behavior_from_fixed(0.75);
    let a = generate_offline_dataset(&env, &b, 50, 0.75, 99).unwrap();
    let again = generate_offline_dataset(&env, &b, 50, 0.75, 99).unwrap();
    assert_eq!(a, again);
    let other = generate_offline_dataset(&env, &b, 50, 0.75, 100).unwrap();
    assert_ne!(a.trajectories, other.trajectories);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.ndjson");
    a.write_ndjson(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = OfflineDataset::read_ndjson(&path).unwrap();
    assert_eq!(a, back);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 50 * 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], 1);
}

#[test]
fn substreams_do_not_depend_on_scheduling() {
    let draw = |rng: &mut StreamRng| rng.random::<u64>();
    let forward: Vec<u64> = (0..8).map(|i| draw(&mut substream(5, i))).collect();
    let backward: Vec<u64> = (0..8).rev().map(|i| draw(&mut substream(5, i))).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
}
