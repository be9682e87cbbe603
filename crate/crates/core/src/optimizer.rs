//! The actor-critic training loop over the modified model.
//!
//! Each iteration evaluates `Q̃^{π(t)}` by Monte Carlo on fresh uniform state
//! histories for every stage and full action history, projects the values
//! onto the stage's sieve by least squares, and adds `η` times the projected
//! coefficients to `θ_k`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::TensorBasis;
use crate::dtr::{DtrModel, History, Policy, ValueEstimate};
use crate::error::{PolarError, Result};
use crate::linalg::{lstsq_qr, ridge_solve};
use crate::pessimism::{estimate_reward_at, ModifiedDtrModel};
use crate::policy::SoftmaxSievePolicy;
use crate::rng::{derive_seed_path, stream, substream};

/// Ridge used when the random design is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSize {
    /// `η_k = scale · sqrt(log |A_k|) / (q̃_k sqrt(T))` with `q̃_k` the bound on
    /// `|Q̃_k|` implied by the reward bounds, the penalties and `gamma_max`.
    Theorem {
        gamma_max: f64,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    Constant {
        eta: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarConfig {
    pub iterations: usize,
    /// Uniform samples per `(t, k, ā_k)`; a single entry applies to every stage.
    pub m_k: Vec<usize>,
    pub q_rollouts: usize,
    pub step_size: StepSize,
    pub seed: u64,
    pub ridge_fallback: bool,
}

impl Default for PolarConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            m_k: vec![128],
            q_rollouts: 32,
            step_size: StepSize::Theorem {
                gamma_max: 2.0,
                scale: 1.0,
            },
            seed: 0,
            ridge_fallback: true,
        }
    }
}

impl PolarConfig {
    pub fn samples(&self, k: usize) -> usize {
        match self.m_k.as_slice() {
            [m] => *m,
            ms => ms[k],
        }
    }

    pub fn validate(&self, policy: &SoftmaxSievePolicy) -> Result<()> {
        let horizon = policy.features().len();
        if self.m_k.is_empty() || (self.m_k.len() != 1 && self.m_k.len() != horizon) {
            return Err(PolarError::Config(format!(
                "m_k needs 1 or {horizon} entries, got {}",
                self.m_k.len()
            )));
        }
        if self.q_rollouts == 0 {
            return Err(PolarError::Config("q_rollouts must be >= 1".into()));
        }
        for (k, f) in policy.features().iter().enumerate() {
            if self.samples(k) < f.basis_size() {
                return Err(PolarError::Config(format!(
                    "stage {k}: m_k = {} is below the basis size {}",
                    self.samples(k),
                    f.basis_size()
                )));
            }
        }
        match self.step_size {
            StepSize::Constant { eta } if !(eta >= 0.0) => Err(PolarError::Config(format!(
                "step size must be >= 0, got {eta}"
            ))),
            StepSize::Theorem { gamma_max, scale } if !(gamma_max >= 0.0 && scale >= 0.0) => Err(
                PolarError::Config("gamma_max and scale must be >= 0".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Per-stage step sizes for `model`.
    pub fn step_sizes(&self, model: &ModifiedDtrModel) -> Vec<f64> {
        let horizon = model.horizon();
        match self.step_size {
            StepSize::Constant { eta } => vec![eta; horizon],
            StepSize::Theorem { gamma_max, scale } => {
                let t = self.iterations.max(1) as f64;
                let mut tail = 0.0;
                let mut out = vec![0.0; horizon];
                for k in (0..horizon).rev() {
                    tail += model.reward_bound(k, gamma_max);
                    let n_actions = model.spec().n_actions(k) as f64;
                    // a zero bound means Q̃ vanishes and the step is irrelevant
                    out[k] = if tail > 0.0 {
                        scale * n_actions.ln().sqrt() / (tail * t.sqrt())
                    } else {
                        0.0
                    };
                }
                out
            }
        }
    }
}

/// One row of the training trace; iteration 0 is the initial policy.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub policy: SoftmaxSievePolicy,
    pub wall_ms: f64,
    pub value: Option<ValueEstimate>,
    /// Projection residual RMS per stage, averaged over action histories.
    pub residual_rms: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingTrace {
    pub records: Vec<IterationRecord>,
    pub q_evaluations: u64,
    pub ridge_fallbacks: u64,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Callback evaluating a policy snapshot, called once per iteration `0..=T`.
pub type EvalHook<'a> = &'a (dyn Fn(usize, &SoftmaxSievePolicy) -> Result<ValueEstimate> + Sync);

/// `Q̃_k^π(h_k, a_k)` for `h_k = (s̄_k, ā_k[..k])`, `a_k = ā_k[k]`.
///
/// `r̃_k(h_k, a_k)` is computed once; the tail average uses `q_rollouts`
/// forward rollouts whose random streams depend only on `seed`, so every
/// point evaluated with the same seed shares common random numbers.
pub fn mc_q_eval<P: Policy + ?Sized>(
    model: &ModifiedDtrModel,
    policy: &P,
    k: usize,
    states: &[Vec<f64>],
    actions: &[usize],
    q_rollouts: usize,
    seed: u64,
) -> Result<f64> {
    let horizon = model.horizon();
    if k >= horizon || states.len() != k + 1 || actions.len() != k + 1 {
        return Err(PolarError::Config(format!(
            "stage {k} query needs {} states and actions, got {} and {}",
            k + 1,
            states.len(),
            actions.len()
        )));
    }
    let history = History::from_parts(states.to_vec(), actions[..k].to_vec())?;
    let action = actions[k];
    let stage = model.stage(k);
    let pred = stage.predict(&history, action);
    let mut rng = substream(seed, 0);
    let r_hat = estimate_reward_at(
        &**stage,
        &**model.reward(k),
        &history,
        action,
        &pred.mean,
        model.m_noise(),
        &mut rng,
    );
    let r_k = r_hat - model.penalties()[k] * pred.gamma;
    if k + 1 == horizon {
        return Ok(r_k);
    }
    let q = q_rollouts.max(1);
    let mut tail = 0.0;
    for j in 0..q {
        let mut rng = substream(seed, j as u64 + 1);
        let mut h = history.clone();
        h.push(action, stage.draw_from(&pred.mean, &mut rng));
        for t in k + 1..horizon {
            let a = policy.sample_action(t, &h, &mut rng);
            let (r, next) = model.step(t, &h, a, &mut rng);
            tail += r;
            h.push(a, next);
        }
    }
    Ok(r_k + tail / q as f64)
}

/// Least-squares coefficients of the targets on the sieve.
#[derive(Clone, Debug, PartialEq)]
pub struct SieveFit {
    pub coef: DVector<f64>,
    pub residual_rms: f64,
    pub used_ridge: bool,
}

/// `argmin_θ Σ_i (θᵀ Υ(s̄_i) - y_i)²` by Householder QR, with an optional
/// `1e-8` ridge when the design is rank deficient.
pub fn sieve_project(
    tensor: &TensorBasis,
    samples: &[Vec<f64>],
    targets: &[f64],
    ridge_fallback: bool,
) -> Result<SieveFit> {
    if samples.is_empty() || samples.len() != targets.len() {
        return Err(PolarError::DimensionMismatch {
            expected: samples.len().max(1),
            actual: targets.len(),
        });
    }
    let rows = samples
        .iter()
        .map(|s| tensor.eval(s))
        .collect::<Result<Vec<_>>>()?;
    let design = DMatrix::from_fn(rows.len(), tensor.size(), |i, j| rows[i][j]);
    let y = DVector::from_column_slice(targets);
    let (coef, used_ridge) = match lstsq_qr(&design, &y) {
        Some(c) => (c, false),
        None if ridge_fallback => (ridge_solve(&design, &y, RIDGE_FALLBACK)?, true),
        None => {
            return Err(PolarError::Numerical(
                "sieve design is rank deficient and the ridge fallback is disabled".into(),
            ))
        }
    };
    let resid = &design * &coef - &y;
    let residual_rms = (resid.norm_squared() / y.len() as f64).sqrt();
    Ok(SieveFit {
        coef,
        residual_rms,
        used_ridge,
    })
}

/// Runs `config.iterations` actor-critic iterations from `initial`.
pub fn polar_train(
    model: &ModifiedDtrModel,
    initial: SoftmaxSievePolicy,
    config: &PolarConfig,
    eval_hook: Option<EvalHook<'_>>,
) -> Result<(SoftmaxSievePolicy, TrainingTrace)> {
    if initial.horizon() != model.horizon() {
        return Err(PolarError::Config(format!(
            "policy horizon {} does not match model horizon {}",
            initial.horizon(),
            model.horizon()
        )));
    }
    config.validate(&initial)?;
    let etas = config.step_sizes(model);
    let horizon = model.horizon();
    let start = Instant::now();
    let mut trace = TrainingTrace::default();
    let evaluate = |t: usize, p: &SoftmaxSievePolicy| eval_hook.map(|f| f(t, p)).transpose();
    trace.records.push(IterationRecord {
        iteration: 0,
        policy: initial.clone(),
        wall_ms: 0.0,
        value: evaluate(0, &initial)?,
        residual_rms: vec![0.0; horizon],
    });

    let mut policy = initial;
    for t in 0..config.iterations {
        let snapshot = policy.clone();
        let mut residual_rms = vec![0.0; horizon];
        for (k, features) in snapshot.features().iter().enumerate() {
            let m = config.samples(k);
            let n_cols = features.n_action_histories();
            let mut theta_hat = DMatrix::zeros(features.basis_size(), n_cols);
            for col in 0..n_cols {
                let actions = features.actions.decode(col)?;
                let path = [t as u64, k as u64, col as u64];
                let mut rng = stream(derive_seed_path(config.seed, &path));
                let states: Vec<Vec<Vec<f64>>> = (0..m)
                    .map(|_| model.spec().sample_state_history(k, &mut rng))
                    .collect();
                let q_seed = derive_seed_path(config.seed, &[t as u64, k as u64, col as u64, 1]);
                let targets = states
                    .par_iter()
                    .map(|s| mc_q_eval(model, &snapshot, k, s, &actions, config.q_rollouts, q_seed))
                    .collect::<Result<Vec<f64>>>()
                    .map_err(|e| {
                        e.context(format!("iteration {t}, stage {k}, actions {actions:?}"))
                    })?;
                trace.q_evaluations += m as u64;
                let coords: Vec<Vec<f64>> = states.iter().map(|s| s.concat()).collect();
                let fit = sieve_project(&features.tensor, &coords, &targets, config.ridge_fallback)
                    .map_err(|e| {
                        e.context(format!("iteration {t}, stage {k}, actions {actions:?}"))
                    })?;
                trace.ridge_fallbacks += u64::from(fit.used_ridge);
                residual_rms[k] += fit.residual_rms / n_cols as f64;
                theta_hat.set_column(col, &fit.coef);
            }
            policy.apply_update(k, &theta_hat, etas[k])?;
        }
        trace.records.push(IterationRecord {
            iteration: t + 1,
            policy: policy.clone(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            value: evaluate(t + 1, &policy)?,
            residual_rms,
        });
    }
    Ok((policy, trace))
}
