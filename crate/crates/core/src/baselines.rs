//! Reference policies: the tree-sampling dynamic-programming oracle, the
//! behavior policy built from it, and linear DTR Q-learning.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::StageFeatureMap;
use crate::dtr::{DtrModel, History, Policy, Trajectory};
use crate::error::{PolarError, Result};
use crate::linear::{fit_ridge, LinearTransitionEstimate, NoiseSpec, RidgeShape};
use crate::rng::{derive_seed, hash_f64s, substream, StreamRng};

/// Default guard on the number of tree nodes expanded by one query.
pub const DEFAULT_NODE_CAP: f64 = 1e9;

/// First index attaining the maximum.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn q_star(
    model: &dyn DtrModel,
    history: &History,
    action: usize,
    n_branch: usize,
    rng: &mut StreamRng,
) -> f64 {
    let k = history.stage();
    let r = model.expected_reward(k, history, action, rng);
    if k + 1 == model.horizon() {
        return r;
    }
    let n_next = model.spec().n_actions(k + 1);
    let mut total = 0.0;
    for _ in 0..n_branch {
        let mut h = history.clone();
        h.push(action, model.transition(k, history, action, rng));
        let best = (0..n_next)
            .map(|a| q_star(model, &h, a, n_branch, rng))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    r + total / n_branch as f64
}

/// Tree-sampling estimates of `Q*(h_k, a)` for every action; action `a`
/// draws its subtree from sub-stream `a` of `seed`.
pub fn dp_q_values(
    model: &dyn DtrModel,
    history: &History,
    n_branch: usize,
    seed: u64,
    node_cap: f64,
) -> Result<Vec<f64>> {
    let k = history.stage();
    if k >= model.horizon() {
        return Err(PolarError::Config(format!(
            "stage {k} is beyond the horizon"
        )));
    }
    if n_branch == 0 {
        return Err(PolarError::Config("n_branch must be >= 1".into()));
    }
    let depth = (model.horizon() - 1 - k) as i32;
    let nodes = (n_branch as f64 * 2.0).powi(depth);
    if nodes > node_cap {
        return Err(PolarError::Config(format!(
            "DP tree would expand about {nodes:.3e} nodes, above the cap {node_cap:.3e}"
        )));
    }
    Ok((0..model.spec().n_actions(k))
        .map(|a| q_star(model, history, a, n_branch, &mut substream(seed, a as u64)))
        .collect())
}

/// `(argmax_a Q*(h_k, a), max_a Q*(h_k, a))`, ties to the lowest index.
pub fn dp_optimal_action(
    model: &dyn DtrModel,
    history: &History,
    n_branch: usize,
    seed: u64,
) -> Result<(usize, f64)> {
    let q = dp_q_values(model, history, n_branch, seed, DEFAULT_NODE_CAP)?;
    let a = argmax_lowest(&q);
    Ok((a, q[a]))
}

/// Mean of `V*(s_0)` over `n_states` uniform initial states.
pub fn estimate_optimal_value(
    model: &dyn DtrModel,
    n_states: usize,
    n_branch: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let values = (0..n_states)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let h = History::new(model.sample_initial(&mut rng));
            dp_optimal_action(model, &h, n_branch, derive_seed(seed, i as u64)).map(|(_, v)| v)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((values.iter().sum::<f64>() / n_states.max(1) as f64, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpOracleConfig {
    /// Successors per action at later stages.
    pub n_branch: usize,
    /// Successors per action when materializing the first-stage grid.
    pub grid_branch: usize,
    /// Grid points per coordinate of the first state.
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for DpOracleConfig {
    fn default() -> Self {
        Self {
            n_branch: 200,
            grid_branch: 100,
            grid_points: 21,
            seed: 0x0D0D,
        }
    }
}

/// The DP-optimal policy: first-stage actions materialized on a grid with
/// nearest-neighbour lookup; later stages recomputed per history with a
/// stream seeded by the history itself.
pub struct DpOraclePolicy {
    model: Arc<dyn DtrModel>,
    config: DpOracleConfig,
    grid_actions: Vec<usize>,
    grid_values: Vec<f64>,
}

impl std::fmt::Debug for DpOraclePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DpOraclePolicy")
            .field("config", &self.config)
            .field("grid_points", &self.grid_actions.len())
            .finish_non_exhaustive()
    }
}

impl DpOraclePolicy {
    pub fn build(model: Arc<dyn DtrModel>, config: DpOracleConfig) -> Result<Self> {
        if config.grid_points < 2 {
            return Err(PolarError::Config(
                "grid needs at least 2 points per coordinate".into(),
            ));
        }
        let b = model.spec().state_box(0).clone();
        let d = b.dim();
        let g = config.grid_points;
        let total = g.pow(d as u32);
        let rows = (0..total)
            .into_par_iter()
            .map(|idx| {
                let s0 = grid_point(&b, g, idx);
                let h = History::new(s0);
                dp_optimal_action(
                    &*model,
                    &h,
                    config.grid_branch,
                    derive_seed(config.seed, idx as u64),
                )
            })
            .collect::<Result<Vec<(usize, f64)>>>()?;
        let (grid_actions, grid_values) = rows.into_iter().unzip();
        Ok(Self {
            model,
            config,
            grid_actions,
            grid_values,
        })
    }

    pub fn config(&self) -> &DpOracleConfig {
        &self.config
    }

    /// Mean of the grid's `V*` estimates.
    pub fn grid_value_mean(&self) -> f64 {
        self.grid_values.iter().sum::<f64>() / self.grid_values.len() as f64
    }

    fn grid_index(&self, s0: &[f64]) -> usize {
        let b = self.model.spec().state_box(0);
        let g = self.config.grid_points;
        let mut idx = 0;
        for (i, x) in s0.iter().enumerate() {
            let (lo, hi) = b.interval(i);
            let j = (((x - lo) / (hi - lo)) * (g - 1) as f64)
                .round()
                .clamp(0.0, (g - 1) as f64);
            idx = idx * g + j as usize;
        }
        idx
    }

    pub fn optimal_action(&self, k: usize, history: &History) -> usize {
        if k == 0 {
            return self.grid_actions[self.grid_index(history.current_state())];
        }
        let mut key: Vec<f64> = history.flat_states();
        key.extend(history.actions().iter().map(|a| *a as f64));
        let seed = hash_f64s(self.config.seed, &key);
        dp_optimal_action(&*self.model, history, self.config.n_branch, seed)
            .expect("stage within horizon")
            .0
    }
}

/// Row-major grid point `idx` of a `g^d` grid over `b`.
fn grid_point(b: &crate::dtr::StateBox, g: usize, mut idx: usize) -> Vec<f64> {
    let d = b.dim();
    let mut out = vec![0.0; d];
    for i in (0..d).rev() {
        let j = idx % g;
        idx /= g;
        let (lo, hi) = b.interval(i);
        out[i] = lo + (hi - lo) * j as f64 / (g - 1) as f64;
    }
    out
}

impl Policy for DpOraclePolicy {
    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn action_probs(&self, k: usize, history: &History) -> Vec<f64> {
        let mut p = vec![0.0; self.model.spec().n_actions(k)];
        p[self.optimal_action(k, history)] = 1.0;
        p
    }
}

/// Plays the optimal action with probability `p` and the other action
/// otherwise.
pub struct BehaviorPolicy {
    optimal: Arc<dyn Policy>,
    p: f64,
}

pub fn make_behavior_policy(
    optimal: Arc<dyn Policy>,
    p: f64,
    action_counts: &[usize],
) -> Result<BehaviorPolicy> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PolarError::Domain {
            value: p,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if action_counts.iter().any(|n| *n != 2) {
        return Err(PolarError::Unsupported(
            "the behavior flip rule needs binary actions at every stage".into(),
        ));
    }
    Ok(BehaviorPolicy { optimal, p })
}

impl BehaviorPolicy {
    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Policy for BehaviorPolicy {
    fn horizon(&self) -> usize {
        self.optimal.horizon()
    }

    fn action_probs(&self, k: usize, history: &History) -> Vec<f64> {
        let best = argmax_lowest(&self.optimal.action_probs(k, history));
        let mut probs = vec![1.0 - self.p; 2];
        probs[best] = self.p;
        probs
    }
}

/// Greedy policy over per-stage linear Q functions `⟨θ_k, φ_k(h, a)⟩`.
#[derive(Clone, Debug)]
pub struct QLearnedPolicy {
    pub features: Vec<StageFeatureMap>,
    pub q: Vec<LinearTransitionEstimate>,
}

impl QLearnedPolicy {
    pub fn q_value(&self, k: usize, history: &History, action: usize) -> Result<f64> {
        let phi = self.features[k].phi(history, action)?;
        Ok(self.q[k].predict_mean(&phi)?[0])
    }

    pub fn q_values(&self, k: usize, history: &History) -> Result<Vec<f64>> {
        (0..self.features[k].actions.last_count())
            .map(|a| self.q_value(k, history, a))
            .collect()
    }

    pub fn greedy_action(&self, k: usize, history: &History) -> Result<usize> {
        Ok(argmax_lowest(&self.q_values(k, history)?))
    }
}

impl Policy for QLearnedPolicy {
    fn horizon(&self) -> usize {
        self.q.len()
    }

    fn action_probs(&self, k: usize, history: &History) -> Vec<f64> {
        let mut p = vec![0.0; self.features[k].actions.last_count()];
        p[self
            .greedy_action(k, history)
            .expect("history matches the feature map")] = 1.0;
        p
    }
}

/// Ridge fit of scalar targets on `φ_k`, escalating `λ` if the system is singular.
fn fit_q_stage(
    features: &StageFeatureMap,
    trajectories: &[Trajectory],
    k: usize,
    targets: &[f64],
    lambda: f64,
) -> Result<LinearTransitionEstimate> {
    let samples = trajectories
        .iter()
        .zip(targets)
        .map(|(t, y)| Ok((features.phi(&t.history(k), t.actions[k])?, vec![*y])))
        .collect::<Result<Vec<_>>>()?;
    let shape = RidgeShape {
        n_blocks: features.n_action_histories(),
        block_dim: features.basis_size(),
        out_dim: 1,
    };
    let mut lam = lambda;
    loop {
        match fit_ridge(&samples, shape, lam, NoiseSpec::Zero { dim: 1 }) {
            Err(PolarError::Numerical(_)) if lam < 1.0 => lam = (lam * 100.0).max(1e-10),
            other => return other,
        }
    }
}

/// Backward fitted-Q recursion: stage `K-1` regresses the logged reward, each
/// earlier stage regresses `r_k + max_a Q̂_{k+1}(h_{k+1}, a)`.
pub fn dtr_q_learning(
    trajectories: &[Trajectory],
    features: Vec<StageFeatureMap>,
    lambda_q: f64,
) -> Result<QLearnedPolicy> {
    let horizon = features.len();
    if trajectories.is_empty() {
        return Err(PolarError::Data(
            "Q-learning needs at least one trajectory".into(),
        ));
    }
    if let Some(t) = trajectories
        .iter()
        .find(|t| t.horizon() != horizon || !t.is_consistent())
    {
        return Err(PolarError::Data(format!(
            "trajectory with {} stages does not match the {horizon}-stage feature maps",
            t.horizon()
        )));
    }
    let mut q: Vec<Option<LinearTransitionEstimate>> = vec![None; horizon];
    for k in (0..horizon).rev() {
        let targets = trajectories
            .iter()
            .map(|t| {
                let mut y = t.rewards[k];
                if let Some(next) = &q[k + 1..].first().and_then(|e| e.as_ref()) {
                    let h = t.history(k + 1);
                    let best = (0..features[k + 1].actions.last_count())
                        .map(|a| Ok(next.predict_mean(&features[k + 1].phi(&h, a)?)?[0]))
                        .collect::<Result<Vec<f64>>>()?
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max);
                    y += best;
                }
                Ok(y)
            })
            .collect::<Result<Vec<f64>>>()?;
        q[k] = Some(fit_q_stage(
            &features[k],
            trajectories,
            k,
            &targets,
            lambda_q,
        )?);
    }
    Ok(QLearnedPolicy {
        features,
        q: q.into_iter().map(|e| e.expect("fitted")).collect(),
    })
}
