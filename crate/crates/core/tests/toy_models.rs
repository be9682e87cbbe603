//! Small models whose values can be enumerated by hand.

use std::sync::Arc;

use polar_core::baselines::{dp_q_values, dtr_q_learning, DEFAULT_NODE_CAP};
use polar_core::dtr::{FixedActionPolicy, UniformPolicy};
use polar_core::eval::importance_sampling_ope;
use polar_core::linear::NoiseSpec;
use polar_core::optimizer::mc_q_eval;
use polar_core::pessimism::{
    build_modified_model, ConstantReward, InitialLaw, StagePrediction, StageReward, StageTransition,
};
use polar_core::rng::{stream, StreamRng};
use polar_core::simenv::{generate_offline_dataset, SimEnv};
use polar_core::{
    value_mc, DtrModel, DtrSpec, History, Policy, StageFeatureMap, StageSpec, StateBox, Trajectory,
};
use rand::Rng;

/// `s' = (s + 0.25 (a + 1)) / 2` with no noise and a fixed uncertainty per action.
struct HalfStep {
    next_box: StateBox,
    gamma: [f64; 2],
}

impl StageTransition for HalfStep {
    fn predict(&self, history: &History, action: usize) -> StagePrediction {
        let s = history.current_state()[0];
        StagePrediction {
            mean: vec![(s + 0.25 * (action as f64 + 1.0)) / 2.0],
            gamma: self.gamma[action],
        }
    }

    fn sample_noise(&self, _rng: &mut StreamRng, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn next_box(&self) -> &StateBox {
        &self.next_box
    }
}

/// `r = s' - a / 4`.
struct NextStateReward;

impl StageReward for NextStateReward {
    fn reward(&self, _h: &History, action: usize, next: &[f64]) -> f64 {
        next[0] - action as f64 / 4.0
    }

    fn sup_norm(&self) -> f64 {
        1.0
    }
}

/// Policy with history-independent action probabilities per stage.
struct Mixed(Vec<[f64; 2]>);

impl Policy for Mixed {
    fn horizon(&self) -> usize {
        self.0.len()
    }

    fn action_probs(&self, k: usize, _h: &History) -> Vec<f64> {
        self.0[k].to_vec()
    }
}

fn toy_model(penalty: f64) -> polar_core::pessimism::ModifiedDtrModel {
    let unit = StateBox::unit(1);
    let spec = DtrSpec::new(
        vec![
            StageSpec {
                state_box: unit.clone(),
                n_actions: 2,
            };
            3
        ],
        unit.clone(),
    )
    .unwrap();
    let stage = |g: [f64; 2]| -> Arc<dyn StageTransition> {
        Arc::new(HalfStep {
            next_box: unit.clone(),
            gamma: g,
        })
    };
    build_modified_model(
        spec,
        vec![stage([0.1, 0.3]), stage([0.2, 0.0]), stage([0.05, 0.4])],
        vec![
            Arc::new(ConstantReward(0.5)),
            Arc::new(NextStateReward),
            Arc::new(NextStateReward),
        ],
        vec![penalty; 3],
        4,
        InitialLaw::UniformBox,
    )
    .unwrap()
}

/// `Q̃_k(h, a)` by exhaustive enumeration of the action tree.
fn enumerate_q(
    model: &polar_core::pessimism::ModifiedDtrModel,
    policy: &Mixed,
    h: &History,
    a: usize,
) -> f64 {
    let k = h.stage();
    let mut rng = stream(0);
    let (r, next) = model.step(k, h, a, &mut rng);
    if k + 1 == model.horizon() {
        return r;
    }
    let mut h2 = h.clone();
    h2.push(a, next);
    r + (0..2)
        .map(|b| policy.0[k + 1][b] * enumerate_q(model, policy, &h2, b))
        .sum::<f64>()
}

#[test]
fn monte_carlo_q_matches_enumeration() {
    let model = toy_model(0.7);
    let policy = Mixed(vec![[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]]);
    let mut rng = stream(4);
    for k in 0..3 {
        for _ in 0..10 {
            let states: Vec<Vec<f64>> = (0..=k).map(|_| vec![rng.random::<f64>()]).collect();
            let actions: Vec<usize> = (0..=k).map(|_| rng.random_range(0..2)).collect();
            let h = History::from_parts(states.clone(), actions[..k].to_vec()).unwrap();
            let exact = enumerate_q(&model, &policy, &h, actions[k]);
            let mc = mc_q_eval(&model, &policy, k, &states, &actions, 20_000, 9).unwrap();
            // the rollout tail has at most two Bernoulli branch points with bounded payoff
            let tol = if k == 2 { 1e-12 } else { 0.03 };
            assert!((mc - exact).abs() < tol, "stage {k}: {mc} vs {exact}");
        }
    }
}

#[test]
fn deterministic_policy_q_is_exact() {
    let model = toy_model(2.0);
    let policy = Mixed(vec![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
    let states = vec![vec![0.3]];
    for a in 0..2 {
        let h = History::from_parts(states.clone(), vec![]).unwrap();
        let exact = enumerate_q(&model, &policy, &h, a);
        let mc = mc_q_eval(&model, &policy, 0, &states, &[a], 3, 1).unwrap();
        assert!((mc - exact).abs() < 1e-12);
    }
    // hand check for a = 0: s1 = 0.275, s2 = 0.3875, s3 = 0.31875
    let hand = (0.5 - 2.0 * 0.1) + (0.3875 - 0.25 - 2.0 * 0.0) + (0.31875 - 2.0 * 0.05);
    let mc = mc_q_eval(&model, &policy, 0, &states, &[0], 1, 1).unwrap();
    assert!((mc - hand).abs() < 1e-12);
}

#[test]
fn importance_sampling_is_unbiased_on_simenv() {
    let env = SimEnv::new();
    let behavior = UniformPolicy::new(env.spec());
    let target = FixedActionPolicy {
        actions: vec![1, 0, 1],
        action_counts: vec![2; 3],
    };
    let truth = value_mc(&env, &target, 20_000, 3).unwrap();
    let data = generate_offline_dataset(&env, &behavior, 8000, 0.5, 17).unwrap();
    for sn in [false, true] {
        let ope = importance_sampling_ope(&target, &data, sn).unwrap();
        let se = (ope.stderr.powi(2) + truth.stderr.powi(2)).sqrt();
        assert!(
            (ope.estimate - truth.mean).abs() < 4.0 * se,
            "self-normalized {sn}: {} vs {} (se {se})",
            ope.estimate,
            truth.mean
        );
        assert!((ope.ess - 1000.0).abs() < 100.0);
        assert!(!ope.low_ess);
    }
    // on-policy weights are all one: IS is the plain mean of returns
    let on = importance_sampling_ope(&behavior, &data, false).unwrap();
    let mean: f64 = data
        .trajectories
        .iter()
        .map(Trajectory::total_reward)
        .sum::<f64>()
        / 8000.0;
    assert!((on.estimate - mean).abs() < 1e-12);
    assert!((on.ess - 8000.0).abs() < 1e-6);
}

/// `SimEnv` with a constant added to the terminal reward.
struct Shifted {
    env: SimEnv,
    shift: f64,
}

impl DtrModel for Shifted {
    fn spec(&self) -> &DtrSpec {
        self.env.spec()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.env.sample_initial(rng)
    }

    fn transition(&self, k: usize, h: &History, a: usize, rng: &mut StreamRng) -> Vec<f64> {
        self.env.transition(k, h, a, rng)
    }

    fn expected_reward(&self, k: usize, h: &History, a: usize, rng: &mut StreamRng) -> f64 {
        let r = self.env.expected_reward(k, h, a, rng);
        if k + 1 == self.horizon() {
            r + self.shift
        } else {
            r
        }
    }
}

#[test]
fn dp_is_shift_invariant() {
    let shifted = Shifted {
        env: SimEnv::new(),
        shift: 5.0,
    };
    let mut rng = stream(8);
    for i in 0..5 {
        let h = History::new(shifted.env.sample_initial(&mut rng));
        let base = dp_q_values(&shifted.env, &h, 30, i, DEFAULT_NODE_CAP).unwrap();
        let moved = dp_q_values(&shifted, &h, 30, i, DEFAULT_NODE_CAP).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            assert!((m - b - 5.0).abs() < 1e-9, "{m} vs {b} + 5");
        }
    }
}

#[test]
fn dp_tree_respects_node_cap() {
    let env = SimEnv::new();
    let h = History::new(vec![0.5, 0.5]);
    assert!(dp_q_values(&env, &h, 200, 0, 1e4).is_err());
}

#[test]
fn q_learning_recovers_a_linear_one_stage_q() {
    let unit = StateBox::unit(2);
    let spec = DtrSpec::new(
        vec![StageSpec {
            state_box: unit.clone(),
            n_actions: 2,
        }],
        unit,
    )
    .unwrap();
    // linear hats on each coordinate span 1, x, y and xy
    let features = StageFeatureMap::for_spec(&spec, 2).unwrap();
    let truth = |s: &[f64], a: usize| match a {
        0 => 1.0 + 2.0 * s[0] - s[1],
        _ => 3.0 * s[0] * s[1] - 0.5,
    };
    let mut rng = stream(12);
    let trajectories: Vec<Trajectory> = (0..400)
        .map(|_| {
            let s = vec![rng.random::<f64>(), rng.random::<f64>()];
            let a = rng.random_range(0..2);
            Trajectory {
                rewards: vec![truth(&s, a)],
                states: vec![s, vec![0.0, 0.0]],
                actions: vec![a],
            }
        })
        .collect();
    let q = dtr_q_learning(&trajectories, features, 1e-9).unwrap();
    for _ in 0..100 {
        let s = vec![rng.random::<f64>(), rng.random::<f64>()];
        let h = History::new(s.clone());
        for a in 0..2 {
            assert!((q.q_value(0, &h, a).unwrap() - truth(&s, a)).abs() < 1e-6);
        }
        let greedy = usize::from(truth(&s, 1) > truth(&s, 0));
        assert_eq!(q.greedy_action(0, &h).unwrap(), greedy);
    }
}

#[test]
fn zero_noise_spec_has_no_density() {
    assert!(NoiseSpec::Zero { dim: 2 }.density(&[0.0, 0.0]).is_none());
}
