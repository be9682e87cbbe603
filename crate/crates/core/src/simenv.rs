//! Three-stage simulation environment with linear dynamics, Beta-derived
//! bounded noise and a cosine terminal reward, plus offline dataset
//! generation and its NDJSON container.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtr::{
    sample_trajectory, DtrModel, DtrSpec, History, Policy, StageSpec, StateBox, Trajectory,
};
use crate::error::{PolarError, Result};
use crate::linear::NoiseSpec;
use crate::pessimism::{ConstantReward, StageReward};
use crate::rng::{substream, StreamRng};

pub const ENV_VERSION: &str = "simenv-1";
pub const HORIZON: usize = 3;
pub const STATE_DIM: usize = 2;
pub const NOISE_HALF_WIDTH: f64 = 0.4;

/// `W[k][a]`, each `2 × 3`, acting on `(1, s¹, s²)`.
pub const TRANSITION_MATRICES: [[[[f64; 3]; 2]; 2]; 3] = [
    [
        [[0.4, 0.2, 0.0], [0.4, 0.0, 0.2]],
        [[0.6, 0.0, -0.2], [0.4, 0.2, 0.0]],
    ],
    [
        [[0.5, 0.1, -0.1], [0.5, -0.1, 0.1]],
        [[0.5, -0.1, 0.1], [0.5, 0.1, -0.1]],
    ],
    [
        [[0.6, -0.12, -0.08], [0.6, -0.08, -0.12]],
        [[0.4, 0.08, 0.12], [0.4, 0.12, 0.08]],
    ],
];

const REWARD_SCALE: f64 = 3.8;
const REWARD_OFFSET: f64 = 1.37;

/// `3.8 [(cos(-π s₃¹) + 2 cos(π s₃²) + s₄¹ + 2 s₄²)(1 + a₃) - 1.37]`.
pub fn terminal_reward(s3: &[f64], a3: usize, s4: &[f64]) -> f64 {
    let pi = std::f64::consts::PI;
    let g = (-pi * s3[0]).cos() + 2.0 * (pi * s3[1]).cos() + s4[0] + 2.0 * s4[1];
    REWARD_SCALE * (g * (1.0 + a3 as f64) - REWARD_OFFSET)
}

/// `W φ(s)` without noise.
pub fn mean_transition(k: usize, state: &[f64], action: usize) -> [f64; 2] {
    let w = &TRANSITION_MATRICES[k][action];
    [0, 1].map(|r| w[r][0] + w[r][1] * state[0] + w[r][2] * state[1])
}

/// Range of `cos` over `[a, b]`.
fn cos_range(a: f64, b: f64) -> (f64, f64) {
    let pi = std::f64::consts::PI;
    let (mut lo, mut hi) = (a.cos().min(b.cos()), a.cos().max(b.cos()));
    let mut m = (a / pi).ceil();
    while m * pi <= b {
        if (m as i64).rem_euclid(2) == 0 {
            hi = 1.0;
        } else {
            lo = -1.0;
        }
        m += 1.0;
    }
    (lo, hi)
}

/// Reachable range of `W φ(s)` over `prev` and both actions, inflated by the
/// noise half-width.
fn reachable_box(k: usize, prev: &StateBox, inflate: f64) -> Result<StateBox> {
    let intervals: Vec<(f64, f64)> = (0..STATE_DIM)
        .map(|r| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for w in &TRANSITION_MATRICES[k] {
                let row = &w[r];
                let (mut a, mut b) = (row[0], row[0]);
                for i in 0..STATE_DIM {
                    let (l, h) = prev.interval(i);
                    a += (row[i + 1] * l).min(row[i + 1] * h);
                    b += (row[i + 1] * l).max(row[i + 1] * h);
                }
                lo = lo.min(a);
                hi = hi.max(b);
            }
            (lo - inflate, hi + inflate)
        })
        .collect();
    StateBox::new(&intervals)
}

/// The terminal reward as a [`StageReward`], with its analytic sup-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTerminalReward {
    bound: f64,
}

impl SimTerminalReward {
    pub fn new(s3_box: &StateBox, s4_box: &StateBox) -> Self {
        let pi = std::f64::consts::PI;
        let (a_lo, a_hi) = {
            let (l, h) = s3_box.interval(0);
            cos_range(-pi * h, -pi * l)
        };
        let (b_lo, b_hi) = {
            let (l, h) = s3_box.interval(1);
            cos_range(pi * l, pi * h)
        };
        let g_lo = a_lo + 2.0 * b_lo + s4_box.lo()[0] + 2.0 * s4_box.lo()[1];
        let g_hi = a_hi + 2.0 * b_hi + s4_box.hi()[0] + 2.0 * s4_box.hi()[1];
        let bound = [g_lo, g_hi, 2.0 * g_lo, 2.0 * g_hi]
            .iter()
            .map(|g| (REWARD_SCALE * (g - REWARD_OFFSET)).abs())
            .fold(0.0, f64::max);
        Self { bound }
    }
}

impl StageReward for SimTerminalReward {
    fn reward(&self, history: &History, action: usize, next_state: &[f64]) -> f64 {
        terminal_reward(history.current_state(), action, next_state)
    }

    fn sup_norm(&self) -> f64 {
        self.bound
    }
}

/// The true environment `M*`.
#[derive(Clone, Debug)]
pub struct SimEnv {
    spec: DtrSpec,
    noise: NoiseSpec,
    terminal: SimTerminalReward,
}

impl Default for SimEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl SimEnv {
    pub fn new() -> Self {
        Self::with_noise(Self::default_noise())
    }

    pub fn default_noise() -> NoiseSpec {
        NoiseSpec::ScaledBeta22 {
            dim: STATE_DIM,
            half_width: NOISE_HALF_WIDTH,
        }
    }

    /// Boxes are always sized for the default noise so a noise override
    /// (e.g. zero noise) keeps the same domains.
    pub fn with_noise(noise: NoiseSpec) -> Self {
        let mut boxes = vec![StateBox::unit(STATE_DIM)];
        for k in 0..HORIZON {
            let next = reachable_box(k, &boxes[k], NOISE_HALF_WIDTH).expect("non-degenerate box");
            boxes.push(next);
        }
        let terminal = SimTerminalReward::new(&boxes[HORIZON - 1], &boxes[HORIZON]);
        let stages = boxes[..HORIZON]
            .iter()
            .map(|b| StageSpec {
                state_box: b.clone(),
                n_actions: 2,
            })
            .collect();
        let spec = DtrSpec::new(stages, boxes[HORIZON].clone()).expect("valid spec");
        Self {
            spec,
            noise,
            terminal,
        }
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    /// `‖r̄_k‖_∞` per stage.
    pub fn reward_bounds(&self) -> Vec<f64> {
        vec![0.0, 0.0, self.terminal.bound]
    }

    /// Known rewards `r̄_k` per stage.
    pub fn rewards(&self) -> Vec<Arc<dyn StageReward>> {
        vec![
            Arc::new(ConstantReward(0.0)),
            Arc::new(ConstantReward(0.0)),
            Arc::new(self.terminal.clone()),
        ]
    }

    pub fn true_transition(
        &self,
        k: usize,
        state: &[f64],
        action: usize,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        let mean = mean_transition(k, state, action);
        let mut eps = [0.0; STATE_DIM];
        self.noise.sample_into(rng, &mut eps);
        let mut next: Vec<f64> = mean.iter().zip(eps).map(|(m, e)| m + e).collect();
        self.spec.state_box(k + 1).clip(&mut next);
        next
    }
}

impl DtrModel for SimEnv {
    fn spec(&self) -> &DtrSpec {
        &self.spec
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.spec.state_box(0).sample_uniform(rng)
    }

    fn transition(
        &self,
        k: usize,
        history: &History,
        action: usize,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        self.true_transition(k, history.current_state(), action, rng)
    }

    /// Exact: the reward is affine in `s₄`, the noise is mean zero and the
    /// boxes contain every reachable state, so clipping never binds.
    fn expected_reward(
        &self,
        k: usize,
        history: &History,
        action: usize,
        _rng: &mut StreamRng,
    ) -> f64 {
        if k + 1 < HORIZON {
            return 0.0;
        }
        let s3 = history.current_state();
        terminal_reward(s3, action, &mean_transition(k, s3, action))
    }

    fn realized_reward(
        &self,
        k: usize,
        history: &History,
        action: usize,
        next_state: &[f64],
    ) -> Option<f64> {
        Some(if k + 1 < HORIZON {
            0.0
        } else {
            terminal_reward(history.current_state(), action, next_state)
        })
    }
}

/// Generation metadata stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub p: f64,
    pub seed: u64,
    pub env_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub trajectories: Vec<Trajectory>,
    /// `π_b(a_k | h_k)` of the logged action, per trajectory and stage.
    pub behavior_probs: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
}

/// `n` trajectories of `behavior` on `env`; trajectory `i` uses sub-stream `i`.
pub fn generate_offline_dataset(
    env: &dyn DtrModel,
    behavior: &dyn Policy,
    n: usize,
    p: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(PolarError::Config("dataset size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(PolarError::Domain {
            value: p,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let traj = sample_trajectory(env, behavior, &mut rng)?;
            let probs = (0..traj.horizon())
                .map(|k| behavior.action_probs(k, &traj.history(k))[traj.actions[k]])
                .collect();
            Ok((traj, probs))
        })
        .collect::<Result<Vec<(Trajectory, Vec<f64>)>>>()?;
    let (trajectories, behavior_probs) = rows.into_iter().unzip();
    Ok(OfflineDataset {
        trajectories,
        behavior_probs,
        meta: DatasetMeta {
            n,
            p,
            seed,
            env_version: ENV_VERSION.to_string(),
        },
    })
}

/// One line of the NDJSON container. Stages are numbered from 1; the final
/// state of a trajectory has stage `K + 1` and no action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub traj_id: usize,
    pub stage: usize,
    pub state: Vec<f64>,
    pub action: Option<usize>,
    pub reward: Option<f64>,
    pub behavior_prob: Option<f64>,
}

/// `data.ndjson` → `data.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn records(&self) -> Vec<DatasetRecord> {
        let mut out = Vec::new();
        for (i, (t, probs)) in self
            .trajectories
            .iter()
            .zip(&self.behavior_probs)
            .enumerate()
        {
            for (k, state) in t.states.iter().enumerate() {
                let step = k < t.horizon();
                out.push(DatasetRecord {
                    traj_id: i,
                    stage: k + 1,
                    state: state.clone(),
                    action: step.then(|| t.actions[k]),
                    reward: step.then(|| t.rewards[k]),
                    behavior_prob: step.then(|| probs[k]),
                });
            }
        }
        out
    }

    pub fn from_records(records: &[DatasetRecord], meta: DatasetMeta) -> Result<Self> {
        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut behavior_probs: Vec<Vec<f64>> = Vec::new();
        for r in records {
            if r.traj_id == trajectories.len() && r.stage == 1 {
                trajectories.push(Trajectory {
                    states: Vec::new(),
                    actions: Vec::new(),
                    rewards: Vec::new(),
                });
                behavior_probs.push(Vec::new());
            }
            let count = trajectories.len();
            let (Some(t), Some(probs)) = (trajectories.last_mut(), behavior_probs.last_mut())
            else {
                return Err(PolarError::Data(
                    "dataset does not start with stage 1".into(),
                ));
            };
            if r.traj_id + 1 != count || r.stage != t.states.len() + 1 {
                return Err(PolarError::Data(format!(
                    "record out of order: trajectory {}, stage {}",
                    r.traj_id, r.stage
                )));
            }
            t.states.push(r.state.clone());
            match (r.action, r.reward, r.behavior_prob) {
                (Some(a), Some(rew), Some(bp)) => {
                    if !(bp > 0.0 && bp <= 1.0) {
                        return Err(PolarError::Data(format!(
                            "behavior probability {bp} outside (0, 1]"
                        )));
                    }
                    t.actions.push(a);
                    t.rewards.push(rew);
                    probs.push(bp);
                }
                (None, None, None) => {}
                _ => return Err(PolarError::Data("partially filled dataset record".into())),
            }
        }
        if trajectories.iter().any(|t| !t.is_consistent()) {
            return Err(PolarError::Data("truncated trajectory in dataset".into()));
        }
        if trajectories.len() != meta.n {
            return Err(PolarError::Data(format!(
                "metadata declares {} trajectories, file has {}",
                meta.n,
                trajectories.len()
            )));
        }
        Ok(Self {
            trajectories,
            behavior_probs,
            meta,
        })
    }

    /// Writes the NDJSON records and the sidecar metadata.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn read_ndjson(path: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut records = Vec::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Self::from_records(&records, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtr::FixedActionPolicy;
    use crate::rng::stream;

    #[test]
    fn zero_noise_transitions() {
        let env = SimEnv::with_noise(NoiseSpec::Zero { dim: 2 });
        let mut rng = stream(0);
        let s = env.true_transition(0, &[0.0, 0.0], 0, &mut rng);
        assert!((s[0] - 0.4).abs() < 1e-15 && (s[1] - 0.4).abs() < 1e-15);
        let s = env.true_transition(2, &[1.0, 1.0], 1, &mut rng);
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn reward_hand_values() {
        assert!((terminal_reward(&[0.0, 0.0], 0, &[0.0, 0.0]) - 6.194).abs() < 1e-12);
        assert!((terminal_reward(&[0.0, 0.0], 1, &[0.0, 0.0]) - 17.594).abs() < 1e-12);
        assert!((terminal_reward(&[1.0, 1.0], 0, &[0.0, 0.0]) + 16.606).abs() < 1e-12);
    }

    #[test]
    fn boxes_and_bounds() {
        let env = SimEnv::new();
        for k in 0..=HORIZON {
            let b = env.spec().state_box(k);
            for i in 0..2 {
                let (lo, hi) = b.interval(i);
                assert!(
                    lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12,
                    "stage {k}: {lo} {hi}"
                );
            }
        }
        assert!((env.reward_bounds()[2] - 3.8 * (12.0 - 1.37)).abs() < 1e-9);
    }

    #[test]
    fn cos_ranges() {
        let pi = std::f64::consts::PI;
        assert_eq!(cos_range(0.0, pi), (-1.0, 1.0));
        let (lo, hi) = cos_range(0.1, 0.2);
        assert!((hi - 0.1f64.cos()).abs() < 1e-15 && (lo - 0.2f64.cos()).abs() < 1e-15);
        let (lo, hi) = cos_range(-pi, 0.0);
        assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn ndjson_round_trip() {
        let env = SimEnv::new();
        let policy = FixedActionPolicy {
            actions: vec![1, 0, 1],
            action_counts: vec![2, 2, 2],
        };
        let ds = generate_offline_dataset(&env, &policy, 7, 1.0, 42).unwrap();
        assert_eq!(ds.len(), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ndjson");
        ds.write_ndjson(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(OfflineDataset::read_ndjson(&path).unwrap(), ds);
    }
}
