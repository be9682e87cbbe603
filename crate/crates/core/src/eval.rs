//! Policy evaluation: Monte Carlo under a known model and trajectory-wise
//! importance sampling on logged data.

use serde::{Deserialize, Serialize};

use crate::dtr::{value_mc, DtrModel, Policy, ValueEstimate};
use crate::error::{PolarError, Result};
use crate::simenv::OfflineDataset;

/// Runs with fewer effective samples than this are flagged.
pub const LOW_ESS: f64 = 10.0;

pub fn evaluate_policy_true(
    model: &dyn DtrModel,
    policy: &dyn Policy,
    n_rollouts: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    value_mc(model, policy, n_rollouts, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub estimate: f64,
    pub stderr: f64,
    pub ess: f64,
    pub max_weight: f64,
    pub weight_cv: f64,
    pub n: usize,
    pub low_ess: bool,
}

/// Cumulative importance weight `Π_k π(a_k|h_k) / π_b(a_k|h_k)` per trajectory.
pub fn importance_weights(policy: &dyn Policy, dataset: &OfflineDataset) -> Result<Vec<f64>> {
    dataset
        .trajectories
        .iter()
        .zip(&dataset.behavior_probs)
        .enumerate()
        .map(|(i, (t, probs))| {
            if policy.horizon() != t.horizon() || probs.len() != t.horizon() {
                return Err(PolarError::Data(format!(
                    "trajectory {i} has the wrong horizon"
                )));
            }
            let mut w = 1.0;
            for (k, &b) in probs.iter().enumerate() {
                if !(b > 0.0) {
                    return Err(PolarError::Data(format!(
                        "zero behavior probability at trajectory {i}, stage {k}"
                    )));
                }
                w *= policy.action_probs(k, &t.history(k))[t.actions[k]] / b;
            }
            Ok(w)
        })
        .collect()
}

/// Trajectory-wise IS estimate of the policy value; `self_normalized`
/// divides by the weight sum instead of `n`.
pub fn importance_sampling_ope(
    policy: &dyn Policy,
    dataset: &OfflineDataset,
    self_normalized: bool,
) -> Result<OpeResult> {
    let weights = importance_weights(policy, dataset)?;
    let n = weights.len();
    let sum_w: f64 = weights.iter().sum();
    if n == 0 || !(sum_w > 0.0) {
        return Err(PolarError::Numerical(
            "all importance weights are zero".into(),
        ));
    }
    let terms: Vec<f64> = weights
        .iter()
        .zip(&dataset.trajectories)
        .map(|(w, t)| w * t.total_reward())
        .collect();
    let nf = n as f64;
    let (estimate, stderr) = if self_normalized {
        let est = terms.iter().sum::<f64>() / sum_w;
        // delta-method standard error of a ratio estimator
        let var = weights
            .iter()
            .zip(&dataset.trajectories)
            .map(|(w, t)| (w * (t.total_reward() - est)).powi(2))
            .sum::<f64>()
            / sum_w.powi(2);
        (est, var.sqrt())
    } else {
        let v = ValueEstimate::from_samples(&terms);
        (v.mean, v.stderr)
    };
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = sum_w * sum_w / sum_w2;
    let mean_w = sum_w / nf;
    let sd_w = (weights.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(OpeResult {
        estimate,
        stderr,
        ess,
        max_weight: weights.iter().copied().fold(0.0, f64::max),
        weight_cv: sd_w / mean_w,
        n,
        low_ess: ess < LOW_ESS,
    })
}
