//! The modified model `M̃ = (P̂, r̃)` with penalized rewards
//! `r̃_k = r̂_k - c_k Γ_k`.

use std::sync::Arc;

use crate::dtr::{DtrModel, DtrSpec, History, StateBox};
use crate::error::{PolarError, Result};
use crate::rng::StreamRng;

/// Mean of the estimated transition and the uncertainty at one `(h, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePrediction {
    pub mean: Vec<f64>,
    pub gamma: f64,
}

/// One fitted stage of `P̂`: additive noise around a predicted mean.
pub trait StageTransition: Send + Sync {
    fn predict(&self, history: &History, action: usize) -> StagePrediction;

    /// Fills `out` with one draw of the additive noise.
    fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]);

    fn next_box(&self) -> &StateBox;

    /// `clip(mean + ε)`.
    fn draw_from(&self, mean: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let mut s = vec![0.0; mean.len()];
        self.sample_noise(rng, &mut s);
        s.iter_mut().zip(mean).for_each(|(x, m)| *x += m);
        self.next_box().clip(&mut s);
        s
    }

    fn sample_next(&self, history: &History, action: usize, rng: &mut StreamRng) -> Vec<f64> {
        let p = self.predict(history, action);
        self.draw_from(&p.mean, rng)
    }
}

/// A known reward `r̄_k(h_k, a_k, s_{k+1})`.
pub trait StageReward: Send + Sync {
    fn reward(&self, history: &History, action: usize, next_state: &[f64]) -> f64;

    /// Declared `‖r̄_k‖_∞` over the state boxes.
    fn sup_norm(&self) -> f64;

    /// `Some(v)` when the reward is identically `v`.
    fn constant(&self) -> Option<f64> {
        None
    }
}

/// The identically-constant reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantReward(pub f64);

impl StageReward for ConstantReward {
    fn reward(&self, _: &History, _: usize, _: &[f64]) -> f64 {
        self.0
    }

    fn sup_norm(&self) -> f64 {
        self.0.abs()
    }

    fn constant(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// `r̂_k(h, a)` given the predicted mean: Monte-Carlo average of `r̄_k` over
/// `m_noise` next-state draws.
pub fn estimate_reward_at(
    stage: &dyn StageTransition,
    reward: &dyn StageReward,
    history: &History,
    action: usize,
    mean: &[f64],
    m_noise: usize,
    rng: &mut StreamRng,
) -> f64 {
    if let Some(v) = reward.constant() {
        return v;
    }
    let m = m_noise.max(1);
    let total: f64 = (0..m)
        .map(|_| reward.reward(history, action, &stage.draw_from(mean, rng)))
        .sum();
    total / m as f64
}

pub fn estimate_reward(
    stage: &dyn StageTransition,
    reward: &dyn StageReward,
    history: &History,
    action: usize,
    m_noise: usize,
    rng: &mut StreamRng,
) -> f64 {
    let p = stage.predict(history, action);
    estimate_reward_at(stage, reward, history, action, &p.mean, m_noise, rng)
}

/// `r̂ - c Γ`.
pub fn modified_reward(r_hat: f64, gamma: f64, c: f64) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(PolarError::Config(format!(
            "penalty multiplier must be >= 0, got {c}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(PolarError::Domain {
            value: gamma,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    Ok(r_hat - c * gamma)
}

/// `c̃_k = Σ_{j >= k} ‖r̄_j‖_∞`.
pub fn theoretical_penalties(rewards: &[Arc<dyn StageReward>]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        acc += rewards[k].sup_norm();
        out[k] = acc;
    }
    out
}

/// Law of the initial state under the modified model.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    /// Uniform on the first stage's box.
    UniformBox,
    /// Uniform over observed initial states.
    Empirical(Vec<Vec<f64>>),
}

#[derive(Clone)]
pub struct ModifiedDtrModel {
    spec: DtrSpec,
    stages: Vec<Arc<dyn StageTransition>>,
    rewards: Vec<Arc<dyn StageReward>>,
    penalties: Vec<f64>,
    m_noise: usize,
    initial: InitialLaw,
}

impl std::fmt::Debug for ModifiedDtrModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModifiedDtrModel")
            .field("horizon", &self.spec.horizon())
            .field("penalties", &self.penalties)
            .field("m_noise", &self.m_noise)
            .finish_non_exhaustive()
    }
}

/// Assembles `M̃` from one fitted stage, one reward and one penalty per stage.
pub fn build_modified_model(
    spec: DtrSpec,
    stages: Vec<Arc<dyn StageTransition>>,
    rewards: Vec<Arc<dyn StageReward>>,
    penalties: Vec<f64>,
    m_noise: usize,
    initial: InitialLaw,
) -> Result<ModifiedDtrModel> {
    let k = spec.horizon();
    if stages.len() != k {
        return Err(PolarError::Config(format!(
            "expected {k} stage estimates, got {}",
            stages.len()
        )));
    }
    if rewards.len() != k || penalties.len() != k {
        return Err(PolarError::Config(format!(
            "expected {k} rewards and penalties, got {} and {}",
            rewards.len(),
            penalties.len()
        )));
    }
    if let Some(c) = penalties.iter().find(|c| !(**c >= 0.0)) {
        return Err(PolarError::Config(format!(
            "penalty multiplier must be >= 0, got {c}"
        )));
    }
    if m_noise == 0 {
        return Err(PolarError::Config("m_noise must be >= 1".into()));
    }
    for (i, stage) in stages.iter().enumerate() {
        if stage.next_box() != spec.state_box(i + 1) {
            return Err(PolarError::Config(format!(
                "stage {i} estimate clips to a box other than the spec's"
            )));
        }
    }
    if let InitialLaw::Empirical(states) = &initial {
        if states.is_empty() {
            return Err(PolarError::Config(
                "empirical initial law needs states".into(),
            ));
        }
    }
    Ok(ModifiedDtrModel {
        spec,
        stages,
        rewards,
        penalties,
        m_noise,
        initial,
    })
}

impl ModifiedDtrModel {
    pub fn penalties(&self) -> &[f64] {
        &self.penalties
    }

    pub fn m_noise(&self) -> usize {
        self.m_noise
    }

    pub fn stage(&self, k: usize) -> &Arc<dyn StageTransition> {
        &self.stages[k]
    }

    pub fn reward(&self, k: usize) -> &Arc<dyn StageReward> {
        &self.rewards[k]
    }

    /// The same estimate with different penalties.
    pub fn with_penalties(&self, penalties: Vec<f64>) -> Result<Self> {
        build_modified_model(
            self.spec.clone(),
            self.stages.clone(),
            self.rewards.clone(),
            penalties,
            self.m_noise,
            self.initial.clone(),
        )
    }

    /// Largest `|r̃_k|` reachable: `‖r̄_k‖_∞ + c_k Γ_max`.
    pub fn reward_bound(&self, k: usize, gamma_max: f64) -> f64 {
        self.rewards[k].sup_norm() + self.penalties[k] * gamma_max
    }

    /// `r̃_k(h, a)` and a draw of `s_{k+1}`, sharing one prediction.
    pub fn step(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> (f64, Vec<f64>) {
        let stage = &*self.stages[k];
        let p = stage.predict(history, action);
        let r_hat = estimate_reward_at(
            stage,
            &*self.rewards[k],
            history,
            action,
            &p.mean,
            self.m_noise,
            rng,
        );
        let next = stage.draw_from(&p.mean, rng);
        (r_hat - self.penalties[k] * p.gamma, next)
    }

    /// `r̃_k(h, a)` alone.
    pub fn modified_reward(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> f64 {
        let stage = &*self.stages[k];
        let p = stage.predict(history, action);
        let r_hat = estimate_reward_at(
            stage,
            &*self.rewards[k],
            history,
            action,
            &p.mean,
            self.m_noise,
            rng,
        );
        r_hat - self.penalties[k] * p.gamma
    }
}

impl DtrModel for ModifiedDtrModel {
    fn spec(&self) -> &DtrSpec {
        &self.spec
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        match &self.initial {
            InitialLaw::UniformBox => self.spec.state_box(0).sample_uniform(rng),
            InitialLaw::Empirical(states) => {
                use rand::Rng;
                states[rng.random_range(0..states.len())].clone()
            }
        }
    }

    fn transition(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        self.stages[k].sample_next(history, action, rng)
    }

    fn expected_reward(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> f64 {
        self.modified_reward(k, history, action, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtr::StageSpec;
    use crate::rng::stream;

    /// `s' = s + a + U(-w, w)`, Γ = 0.5.
    struct Shift {
        w: f64,
        next: StateBox,
    }

    impl StageTransition for Shift {
        fn predict(&self, h: &History, a: usize) -> StagePrediction {
            StagePrediction {
                mean: vec![h.current_state()[0] + a as f64],
                gamma: 0.5,
            }
        }
        fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]) {
            use rand::Rng;
            out[0] = self.w * (2.0 * rng.random::<f64>() - 1.0);
        }
        fn next_box(&self) -> &StateBox {
            &self.next
        }
    }

    struct Linear;
    impl StageReward for Linear {
        fn reward(&self, _: &History, _: usize, s: &[f64]) -> f64 {
            2.0 * s[0]
        }
        fn sup_norm(&self) -> f64 {
            20.0
        }
    }

    fn one_stage(c: f64, w: f64) -> ModifiedDtrModel {
        let b = StateBox::new(&[(-10.0, 10.0)]).unwrap();
        let spec = DtrSpec::new(
            vec![StageSpec {
                state_box: b.clone(),
                n_actions: 2,
            }],
            b.clone(),
        )
        .unwrap();
        build_modified_model(
            spec,
            vec![Arc::new(Shift { w, next: b })],
            vec![Arc::new(Linear)],
            vec![c],
            4000,
            InitialLaw::UniformBox,
        )
        .unwrap()
    }

    #[test]
    fn arithmetic() {
        assert_eq!(modified_reward(1.0, 0.5, 0.0).unwrap(), 1.0);
        assert_eq!(modified_reward(1.0, 0.5, 2.0).unwrap(), 0.0);
        assert_eq!(modified_reward(1.0, 2.0, 50.0).unwrap(), -99.0);
        assert!(modified_reward(1.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn constant_reward_skips_sampling() {
        let m = one_stage(0.0, 0.1);
        let h = History::new(vec![0.0]);
        let mut a = stream(1);
        let b = a.clone();
        let r = estimate_reward(&*m.stages[0], &ConstantReward(3.0), &h, 1, 64, &mut a);
        assert_eq!(r, 3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_reward_mean() {
        let m = one_stage(0.0, 0.3);
        let h = History::new(vec![1.0]);
        let n = 4000;
        let r = estimate_reward(&*m.stages[0], &Linear, &h, 1, n, &mut stream(2));
        let se = 2.0 * 0.3 / 3f64.sqrt() / (n as f64).sqrt();
        assert!((r - 4.0).abs() < 3.0 * se);
    }

    #[test]
    fn composition_and_monotonicity() {
        let h = History::new(vec![1.0]);
        let base = one_stage(0.0, 0.3).expected_reward(0, &h, 0, &mut stream(9));
        let mut prev = f64::INFINITY;
        for c in [0.0, 1.0, 5.0, 50.0] {
            let m = one_stage(c, 0.3);
            let v = m.expected_reward(0, &h, 0, &mut stream(9));
            assert!((v - (base - 0.5 * c)).abs() < 1e-12);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_missing_stage() {
        let m = one_stage(0.0, 0.1);
        let spec = m.spec.clone();
        let err = build_modified_model(spec, vec![], vec![], vec![], 1, InitialLaw::UniformBox);
        assert!(err.is_err());
        assert!(m.with_penalties(vec![-1.0]).is_err());
    }

    #[test]
    fn theoretical_penalty_sums() {
        let r: Vec<Arc<dyn StageReward>> = vec![
            Arc::new(ConstantReward(0.0)),
            Arc::new(ConstantReward(-1.0)),
            Arc::new(Linear),
        ];
        assert_eq!(theoretical_penalties(&r), vec![21.0, 21.0, 20.0]);
    }
}
