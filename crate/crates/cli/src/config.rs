//! Experiment configuration (TOML) and the built-in presets.

use std::path::Path;

use polar_core::baselines::DpOracleConfig;
use polar_core::gp::GpStageConfig;
use polar_core::linear::QuantifierScale;
use polar_core::optimizer::StepSize;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvKind,
    pub seed: u64,
    pub replications: usize,
    pub grid: Grid,
    pub polar: PolarSettings,
    pub model: ModelSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    #[serde(default)]
    pub oracle: DpOracleConfig,
    /// Record wall-clock times; off keeps re-runs byte-identical.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Simenv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    pub p: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarSettings {
    pub iterations: usize,
    pub m_k: Vec<usize>,
    pub q_rollouts: usize,
    pub step_size: StepSize,
    /// Upper bound on the tensor basis size per stage.
    pub basis_budget: usize,
    pub m_noise: usize,
    /// Rollouts used to evaluate each logged policy under the true model.
    pub eval_rollouts: usize,
    /// Log every iteration; otherwise only the final policy.
    pub log_iterations: bool,
    #[serde(default)]
    pub save_policies: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSettings {
    Linear {
        lambda: f64,
        scale: QuantifierScale,
        delta: f64,
    },
    Gp(GpStageConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSettings {
    pub dtr_q: bool,
    pub behavior: bool,
    pub dp_oracle: bool,
    pub lambda_q: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            dtr_q: true,
            behavior: true,
            dp_oracle: false,
            lambda_q: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Fig1,
    Fig2,
    Sensitivity,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.replications == 0 {
            return bad("replications must be >= 1");
        }
        if self.grid.n.is_empty() || self.grid.p.is_empty() || self.grid.c.is_empty() {
            return bad("grid axes must be non-empty");
        }
        if self.grid.n.contains(&0) {
            return bad("grid n values must be >= 1");
        }
        if self.grid.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("grid p values must lie in [0, 1]");
        }
        if self.grid.c.iter().any(|c| c.is_nan() || *c < 0.0) {
            return bad("grid c values must be >= 0");
        }
        if self.polar.eval_rollouts == 0 || self.polar.m_noise == 0 || self.polar.basis_budget == 0
        {
            return bad("eval_rollouts, m_noise and basis_budget must be >= 1");
        }
        Ok(())
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Fig1 => Self::fig1(),
            Preset::Fig2 => Self::fig2(),
            Preset::Sensitivity => Self::sensitivity(),
        }
    }

    /// Value against iterations at `p = 0.75`, `n = 200`.
    pub fn fig1() -> Self {
        Self {
            env: EnvKind::Simenv,
            seed: 20_230_601,
            replications: 20,
            grid: Grid {
                n: vec![200],
                p: vec![0.75],
                c: vec![0.0, 5.0, 10.0, 50.0, 100.0],
            },
            polar: PolarSettings {
                iterations: 20,
                m_k: vec![48, 48, 128],
                q_rollouts: 16,
                step_size: StepSize::Theorem {
                    gamma_max: 2.0,
                    scale: 40.0,
                },
                basis_budget: 16,
                m_noise: 16,
                eval_rollouts: 2000,
                log_iterations: true,
                save_policies: false,
            },
            model: ModelSettings::Linear {
                lambda: 1.0,
                scale: QuantifierScale::Unit,
                delta: 0.1,
            },
            baselines: BaselineSettings::default(),
            oracle: DpOracleConfig::default(),
            timing: false,
        }
    }

    /// Final value over the `(p, n, c)` grid.
    pub fn fig2() -> Self {
        let mut cfg = Self::fig1();
        cfg.grid = Grid {
            n: vec![50, 200, 1000],
            p: vec![0.95, 0.75, 0.55],
            c: vec![0.0, 5.0, 10.0, 50.0, 100.0],
        };
        cfg.polar.log_iterations = false;
        cfg
    }

    /// GP transitions fitted to the linear environment.
    pub fn sensitivity() -> Self {
        let mut cfg = Self::fig1();
        cfg.replications = 10;
        cfg.grid.c = vec![10.0];
        cfg.polar.log_iterations = false;
        cfg.model = ModelSettings::Gp(GpStageConfig::default());
        cfg
    }

    /// The paper-scale grid (`n` up to 20000, 100 replications).
    pub fn full_scale(mut self) -> Self {
        self.replications = 100;
        if self.grid.n.len() > 1 {
            self.grid.n = vec![50, 200, 1000, 5000, 20000];
        }
        self
    }
}
