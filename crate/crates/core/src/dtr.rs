//! Finite-horizon DTR abstractions: state boxes, histories, trajectories,
//! models, policies, rollouts and Monte-Carlo value estimation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};
use crate::rng::{substream, StreamRng};

/// A product of closed, non-degenerate intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl StateBox {
    pub fn new(intervals: &[(f64, f64)]) -> Result<Self> {
        if intervals.is_empty() {
            return Err(PolarError::Config(
                "state box needs at least one dimension".into(),
            ));
        }
        for &(lo, hi) in intervals {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(PolarError::Config(format!(
                    "degenerate interval [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            lo: intervals.iter().map(|i| i.0).collect(),
            hi: intervals.iter().map(|i| i.1).collect(),
        })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.lo[i], self.hi[i])
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.len() == self.dim()
            && s.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn clip(&self, s: &mut [f64]) {
        for (x, (lo, hi)) in s.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn clipped(&self, s: &[f64]) -> Vec<f64> {
        let mut out = s.to_vec();
        self.clip(&mut out);
        out
    }

    pub fn sample_uniform(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub state_box: StateBox,
    pub n_actions: usize,
}

/// Stage layout of a `K`-stage problem: one [`StageSpec`] per decision stage
/// plus the box of the final state `s_{K+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtrSpec {
    stages: Vec<StageSpec>,
    terminal_box: StateBox,
}

impl DtrSpec {
    pub fn new(stages: Vec<StageSpec>, terminal_box: StateBox) -> Result<Self> {
        if stages.is_empty() {
            return Err(PolarError::Config("horizon must be at least 1".into()));
        }
        if let Some(k) = stages.iter().position(|s| s.n_actions == 0) {
            return Err(PolarError::Config(format!(
                "stage {k} has an empty action set"
            )));
        }
        Ok(Self {
            stages,
            terminal_box,
        })
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    /// Box of `s_k` for `k` in `0..=K`.
    pub fn state_box(&self, k: usize) -> &StateBox {
        if k < self.stages.len() {
            &self.stages[k].state_box
        } else {
            &self.terminal_box
        }
    }

    pub fn n_actions(&self, k: usize) -> usize {
        self.stages[k].n_actions
    }

    /// Action-set sizes for stages `0..=k`.
    pub fn action_counts(&self, k: usize) -> Vec<usize> {
        self.stages[..=k].iter().map(|s| s.n_actions).collect()
    }

    /// Boxes of `s_0..=s_k`.
    pub fn history_boxes(&self, k: usize) -> Vec<&StateBox> {
        (0..=k).map(|j| self.state_box(j)).collect()
    }

    /// Total dimension of the concatenated state history `s_0..=s_k`.
    pub fn history_dim(&self, k: usize) -> usize {
        (0..=k).map(|j| self.state_box(j).dim()).sum()
    }

    /// Uniform draw of a state history `s_0..=s_k` from the product of boxes.
    pub fn sample_state_history(&self, k: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        (0..=k)
            .map(|j| self.state_box(j).sample_uniform(rng))
            .collect()
    }
}

/// `H_k = (s_0, a_0, ..., a_{k-1}, s_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    states: Vec<Vec<f64>>,
    actions: Vec<usize>,
}

impl History {
    pub fn new(initial_state: Vec<f64>) -> Self {
        Self {
            states: vec![initial_state],
            actions: Vec::new(),
        }
    }

    pub fn from_parts(states: Vec<Vec<f64>>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != actions.len() + 1 {
            return Err(PolarError::DimensionMismatch {
                expected: actions.len() + 1,
                actual: states.len(),
            });
        }
        Ok(Self { states, actions })
    }

    /// Zero-based stage this history is at (number of actions taken).
    pub fn stage(&self) -> usize {
        self.actions.len()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn current_state(&self) -> &[f64] {
        self.states
            .last()
            .expect("history holds at least one state")
    }

    pub fn flat_states(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }

    pub fn push(&mut self, action: usize, next_state: Vec<f64>) {
        self.actions.push(action);
        self.states.push(next_state);
    }

    /// Checks state dimensions and action ranges against a layout.
    pub fn validate(&self, spec: &DtrSpec) -> Result<()> {
        let k = self.stage();
        if k >= spec.horizon() {
            return Err(PolarError::Config(format!(
                "history at stage {k} exceeds horizon {}",
                spec.horizon()
            )));
        }
        for (j, s) in self.states.iter().enumerate() {
            let dim = spec.state_box(j).dim();
            if s.len() != dim {
                return Err(PolarError::DimensionMismatch {
                    expected: dim,
                    actual: s.len(),
                });
            }
        }
        for (j, &a) in self.actions.iter().enumerate() {
            if a >= spec.n_actions(j) {
                return Err(PolarError::InvalidAction {
                    stage: j,
                    action: a,
                    n_actions: spec.n_actions(j),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1 && self.rewards.len() == self.actions.len()
    }

    /// The history `H_k` observed before acting at stage `k`.
    pub fn history(&self, k: usize) -> History {
        History {
            states: self.states[..=k].to_vec(),
            actions: self.actions[..k].to_vec(),
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A finite-horizon DTR model `M = (P, r)`.
///
/// Implementations must keep transitions inside the next stage's box.
pub trait DtrModel: Send + Sync {
    fn spec(&self) -> &DtrSpec;

    fn horizon(&self) -> usize {
        self.spec().horizon()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64>;

    /// Draws `s_{k+1}` given `H_k` and `a_k`.
    fn transition(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> Vec<f64>;

    /// `r_k(h_k, a_k)`; may itself be a Monte-Carlo estimate that consumes `rng`.
    fn expected_reward(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> f64;

    /// `r̄_k(h_k, a_k, s_{k+1})` when the model exposes realized rewards.
    fn realized_reward(
        &self,
        _k: usize,
        _history: &History,
        _action: usize,
        _next_state: &[f64],
    ) -> Option<f64> {
        None
    }
}

/// A (possibly history-dependent) stochastic decision rule per stage.
pub trait Policy: Send + Sync {
    fn horizon(&self) -> usize;

    fn action_probs(&self, k: usize, history: &History) -> Vec<f64>;

    fn sample_action(&self, k: usize, history: &History, rng: &mut StreamRng) -> usize {
        sample_categorical(&self.action_probs(k, history), rng)
    }

    fn log_prob(&self, k: usize, history: &History, action: usize) -> f64 {
        self.action_probs(k, history)
            .get(action)
            .map_or(f64::NEG_INFINITY, |p| p.ln())
    }
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn check_horizons(model: &dyn DtrModel, policy: &dyn Policy) -> Result<()> {
    if model.horizon() != policy.horizon() {
        return Err(PolarError::Config(format!(
            "policy horizon {} does not match model horizon {}",
            policy.horizon(),
            model.horizon()
        )));
    }
    Ok(())
}

fn step(
    model: &dyn DtrModel,
    k: usize,
    history: &History,
    action: usize,
    rng: &mut StreamRng,
) -> (f64, Vec<f64>) {
    let next = model.transition(k, history, action, rng);
    let reward = match model.realized_reward(k, history, action, &next) {
        Some(r) => r,
        None => model.expected_reward(k, history, action, rng),
    };
    (reward, next)
}

pub fn sample_trajectory(
    model: &dyn DtrModel,
    policy: &dyn Policy,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    check_horizons(model, policy)?;
    let horizon = model.horizon();
    let mut history = History::new(model.sample_initial(rng));
    let mut rewards = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let action = policy.sample_action(k, &history, rng);
        let (reward, next) = step(model, k, &history, action, rng);
        rewards.push(reward);
        history.push(action, next);
    }
    Ok(Trajectory {
        states: history.states,
        actions: history.actions,
        rewards,
    })
}

/// Sum of rewards from stage `history.stage()` to the end, optionally forcing
/// the first action.
pub fn rollout_return(
    model: &dyn DtrModel,
    policy: &dyn Policy,
    mut history: History,
    first_action: Option<usize>,
    rng: &mut StreamRng,
) -> f64 {
    let start = history.stage();
    let mut total = 0.0;
    for k in start..model.horizon() {
        let action = match first_action {
            Some(a) if k == start => a,
            _ => policy.sample_action(k, &history, rng),
        };
        let (reward, next) = step(model, k, &history, action, rng);
        total += reward;
        history.push(action, next);
    }
    total
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_rollouts: usize,
}

impl ValueEstimate {
    /// Sample mean and `sd / sqrt(n)`; a single sample has zero stderr.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            n_rollouts: n,
        }
    }
}

/// Per-rollout returns; rollout `i` uses sub-stream `i` of `seed`.
pub fn rollout_returns(
    model: &dyn DtrModel,
    policy: &dyn Policy,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_horizons(model, policy)?;
    if n_rollouts == 0 {
        return Err(PolarError::Config("n_rollouts must be at least 1".into()));
    }
    Ok((0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let history = History::new(model.sample_initial(&mut rng));
            rollout_return(model, policy, history, None, &mut rng)
        })
        .collect())
}

pub fn value_mc(
    model: &dyn DtrModel,
    policy: &dyn Policy,
    n_rollouts: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    Ok(ValueEstimate::from_samples(&rollout_returns(
        model, policy, n_rollouts, seed,
    )?))
}

/// Uniform random policy, useful as a reference and for tests.
#[derive(Clone, Debug)]
pub struct UniformPolicy {
    action_counts: Vec<usize>,
}

impl UniformPolicy {
    pub fn new(spec: &DtrSpec) -> Self {
        Self {
            action_counts: spec.stages().iter().map(|s| s.n_actions).collect(),
        }
    }
}

impl Policy for UniformPolicy {
    fn horizon(&self) -> usize {
        self.action_counts.len()
    }

    fn action_probs(&self, k: usize, _history: &History) -> Vec<f64> {
        let n = self.action_counts[k];
        vec![1.0 / n as f64; n]
    }
}

/// Policy that always plays a fixed action per stage.
#[derive(Clone, Debug)]
pub struct FixedActionPolicy {
    pub actions: Vec<usize>,
    pub action_counts: Vec<usize>,
}

impl Policy for FixedActionPolicy {
    fn horizon(&self) -> usize {
        self.actions.len()
    }

    fn action_probs(&self, k: usize, _history: &History) -> Vec<f64> {
        let mut p = vec![0.0; self.action_counts[k]];
        p[self.actions[k]] = 1.0;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Deterministic chain: s' = s + a, reward = 1 each stage.
    struct Chain {
        spec: DtrSpec,
    }

    impl Chain {
        fn new(k: usize, n_actions: usize) -> Self {
            let b = StateBox::new(&[(0.0, 10.0)]).unwrap();
            let stages = (0..k)
                .map(|_| StageSpec {
                    state_box: b.clone(),
                    n_actions,
                })
                .collect();
            Self {
                spec: DtrSpec::new(stages, b).unwrap(),
            }
        }
    }

    impl DtrModel for Chain {
        fn spec(&self) -> &DtrSpec {
            &self.spec
        }
        fn sample_initial(&self, _rng: &mut StreamRng) -> Vec<f64> {
            vec![0.0]
        }
        fn transition(&self, k: usize, h: &History, a: usize, _rng: &mut StreamRng) -> Vec<f64> {
            self.spec
                .state_box(k + 1)
                .clipped(&[h.current_state()[0] + a as f64])
        }
        fn expected_reward(&self, _k: usize, _h: &History, _a: usize, _rng: &mut StreamRng) -> f64 {
            1.0
        }
    }

    #[test]
    fn deterministic_rollout_is_unique() {
        let model = Chain::new(3, 2);
        let policy = FixedActionPolicy {
            actions: vec![1, 0, 1],
            action_counts: vec![2; 3],
        };
        let t = sample_trajectory(&model, &policy, &mut stream(1)).unwrap();
        assert_eq!(t.states, vec![vec![0.0], vec![1.0], vec![1.0], vec![2.0]]);
        assert_eq!(t.actions, vec![1, 0, 1]);
        assert!(t.is_consistent());
    }

    #[test]
    fn single_stage_single_action_shape() {
        let model = Chain::new(1, 1);
        let t =
            sample_trajectory(&model, &UniformPolicy::new(model.spec()), &mut stream(2)).unwrap();
        assert_eq!(
            (t.states.len(), t.actions.len(), t.rewards.len()),
            (2, 1, 1)
        );
    }

    #[test]
    fn horizon_mismatch_is_config_error() {
        let model = Chain::new(3, 2);
        let other = Chain::new(2, 2);
        let err = sample_trajectory(&model, &UniformPolicy::new(other.spec()), &mut stream(0));
        assert!(matches!(err, Err(PolarError::Config(_))));
    }

    #[test]
    fn constant_reward_value_is_exact() {
        let model = Chain::new(3, 2);
        let v = value_mc(&model, &UniformPolicy::new(model.spec()), 50, 9).unwrap();
        assert_eq!(v.mean, 3.0);
        assert_eq!(v.stderr, 0.0);
        let single = value_mc(&model, &UniformPolicy::new(model.spec()), 1, 9).unwrap();
        assert_eq!(single.stderr, 0.0);
        assert!(value_mc(&model, &UniformPolicy::new(model.spec()), 0, 9).is_err());
    }

    #[test]
    fn clipping_inside_box_is_identity() {
        let b = StateBox::new(&[(0.0, 1.0), (-2.0, 2.0)]).unwrap();
        let s = vec![0.3, -1.5];
        assert_eq!(b.clipped(&s), s);
        assert_eq!(b.clipped(&[1.5, -3.0]), vec![1.0, -2.0]);
        assert!(StateBox::new(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn forced_first_action_is_respected() {
        let model = Chain::new(2, 2);
        let policy = FixedActionPolicy {
            actions: vec![0, 0],
            action_counts: vec![2, 2],
        };
        // forcing a_0 = 1 still yields reward 1 per stage
        let r = rollout_return(
            &model,
            &policy,
            History::new(vec![0.0]),
            Some(1),
            &mut stream(0),
        );
        assert_eq!(r, 2.0);
    }

    #[test]
    fn history_validation() {
        let model = Chain::new(2, 2);
        let h = History::from_parts(vec![vec![0.0], vec![1.0]], vec![1]).unwrap();
        assert!(h.validate(model.spec()).is_ok());
        let bad = History::from_parts(vec![vec![0.0], vec![1.0]], vec![2]).unwrap();
        assert!(matches!(
            bad.validate(model.spec()),
            Err(PolarError::InvalidAction { .. })
        ));
        assert!(History::from_parts(vec![vec![0.0]], vec![1]).is_err());
    }
}
