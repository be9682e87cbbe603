//! Soft-max sieve policies.
//!
//! At stage `k` the logit of action `a` is `θ_k[ā]ᵀ Υ(s̄_k)`, where `ā` is the
//! action prefix of the history extended by `a` and `Υ` is the stage's tensor
//! B-spline basis over the state history.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::StageFeatureMap;
use crate::dtr::{History, Policy};
use crate::error::{PolarError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxSievePolicy {
    features: Vec<StageFeatureMap>,
    /// `L_k × N_k` per stage.
    theta: Vec<DMatrix<f64>>,
}

/// Numerically stable soft-max.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

impl SoftmaxSievePolicy {
    /// `θ = 0`: uniform over actions at every stage.
    pub fn uniform(features: Vec<StageFeatureMap>) -> Self {
        let theta = features
            .iter()
            .map(|f| DMatrix::zeros(f.basis_size(), f.n_action_histories()))
            .collect();
        Self { features, theta }
    }

    pub fn from_parts(features: Vec<StageFeatureMap>, theta: Vec<DMatrix<f64>>) -> Result<Self> {
        if features.len() != theta.len() {
            return Err(PolarError::DimensionMismatch {
                expected: features.len(),
                actual: theta.len(),
            });
        }
        for (f, t) in features.iter().zip(&theta) {
            check_shape(f, t)?;
        }
        Ok(Self { features, theta })
    }

    pub fn features(&self) -> &[StageFeatureMap] {
        &self.features
    }

    pub fn theta(&self, k: usize) -> &DMatrix<f64> {
        &self.theta[k]
    }

    pub fn n_actions(&self, k: usize) -> usize {
        self.features[k].actions.last_count()
    }

    /// Logits for every action given a precomputed `Υ` and the action prefix.
    pub fn logits_with(&self, k: usize, upsilon: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        let f = &self.features[k];
        let theta = &self.theta[k];
        if upsilon.len() != theta.nrows() {
            return Err(PolarError::DimensionMismatch {
                expected: theta.nrows(),
                actual: upsilon.len(),
            });
        }
        (0..f.actions.last_count())
            .map(|a| {
                let col = f.actions.encode_extended(prefix, a)?;
                Ok(theta
                    .column(col)
                    .iter()
                    .zip(upsilon)
                    .map(|(t, u)| t * u)
                    .sum())
            })
            .collect()
    }

    pub fn logits(&self, k: usize, history: &History) -> Result<Vec<f64>> {
        let upsilon = self.features[k].upsilon(history)?;
        self.logits_with(k, &upsilon, history.actions())
    }

    pub fn try_action_probs(&self, k: usize, history: &History) -> Result<Vec<f64>> {
        if k >= self.theta.len() {
            return Err(PolarError::Config(format!(
                "stage {k} beyond horizon {}",
                self.theta.len()
            )));
        }
        Ok(softmax(&self.logits(k, history)?))
    }

    /// `θ_k ← θ_k + η θ̂_k`, returning a new snapshot.
    pub fn npg_update(&self, k: usize, theta_hat: &DMatrix<f64>, eta: f64) -> Result<Self> {
        let mut next = self.clone();
        next.apply_update(k, theta_hat, eta)?;
        Ok(next)
    }

    pub fn apply_update(&mut self, k: usize, theta_hat: &DMatrix<f64>, eta: f64) -> Result<()> {
        let theta = self
            .theta
            .get_mut(k)
            .ok_or_else(|| PolarError::Config(format!("stage {k} beyond horizon")))?;
        if theta.shape() != theta_hat.shape() {
            return Err(PolarError::DimensionMismatch {
                expected: theta.len(),
                actual: theta_hat.len(),
            });
        }
        *theta += theta_hat * eta;
        Ok(())
    }

    pub fn to_file(&self) -> PolicyFile {
        PolicyFile {
            format: POLICY_FORMAT.to_string(),
            version: POLICY_VERSION,
            stages: self
                .features
                .iter()
                .zip(&self.theta)
                .map(|(f, t)| PolicyStage {
                    features: f.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                    theta: t.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self> {
        if file.format != POLICY_FORMAT || file.version != POLICY_VERSION {
            return Err(PolarError::Data(format!(
                "unsupported policy container {} v{}",
                file.format, file.version
            )));
        }
        let mut features = Vec::new();
        let mut theta = Vec::new();
        for s in file.stages {
            if s.theta.len() != s.rows * s.cols {
                return Err(PolarError::Data(
                    "theta length does not match its shape".into(),
                ));
            }
            theta.push(DMatrix::from_column_slice(s.rows, s.cols, &s.theta));
            features.push(s.features);
        }
        Self::from_parts(features, theta)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

fn check_shape(f: &StageFeatureMap, t: &DMatrix<f64>) -> Result<()> {
    if t.shape() != (f.basis_size(), f.n_action_histories()) {
        return Err(PolarError::DimensionMismatch {
            expected: f.basis_size() * f.n_action_histories(),
            actual: t.len(),
        });
    }
    Ok(())
}

pub const POLICY_FORMAT: &str = "softmax-sieve-policy";
pub const POLICY_VERSION: u32 = 1;

/// JSON container for a [`SoftmaxSievePolicy`]. `theta` is column-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub stages: Vec<PolicyStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStage {
    pub features: StageFeatureMap,
    pub rows: usize,
    pub cols: usize,
    pub theta: Vec<f64>,
}

impl Policy for SoftmaxSievePolicy {
    fn horizon(&self) -> usize {
        self.theta.len()
    }

    fn action_probs(&self, k: usize, history: &History) -> Vec<f64> {
        self.try_action_probs(k, history)
            .expect("history matches the policy's stage features")
    }

    fn log_prob(&self, k: usize, history: &History, action: usize) -> f64 {
        let logits = self
            .logits(k, history)
            .expect("history matches the policy's stage features");
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.get(action).map_or(f64::NEG_INFINITY, |l| l - lse)
    }
}
