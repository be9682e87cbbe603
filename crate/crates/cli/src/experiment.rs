//! Sweep orchestration over `(p, n, replication)` cells.
//!
//! Every cell draws one offline dataset and fits one transition estimate;
//! all penalty values and baselines in the cell share them, and POLAR uses
//! the same training seed for every `c`, so comparisons within a cell are
//! paired. All policies are evaluated under the true model with one common
//! evaluation seed.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use polar_core::baselines::{dtr_q_learning, make_behavior_policy, BehaviorPolicy, DpOraclePolicy};
use polar_core::dtr::{value_mc, DtrModel, Policy, ValueEstimate};
use polar_core::gp::GpStageModel;
use polar_core::linear::{GammaLinearParams, LinearStageModel};
use polar_core::optimizer::{polar_train, PolarConfig, TrainingTrace};
use polar_core::pessimism::{build_modified_model, InitialLaw, ModifiedDtrModel, StageTransition};
use polar_core::rng::{derive_seed, derive_seed_path, stream};
use polar_core::simenv::{generate_offline_dataset, OfflineDataset, SimEnv};
use polar_core::{SoftmaxSievePolicy, StageFeatureMap};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ModelSettings};
use crate::error::CliError;
use crate::results::{
    write_rows, CellKey, CellRecord, Manifest, ResultRow, METHOD_BEHAVIOR, METHOD_DTRQ,
    METHOD_ERROR, METHOD_ORACLE, METHOD_POLAR,
};

const TAG_DATA: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_FIT: u64 = 3;
const TAG_EVAL: u64 = 4;

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Seed of a cell; independent of `c` and of the grid layout.
pub fn cell_seed(master: u64, p: f64, n: usize, replication: usize) -> u64 {
    derive_seed_path(master, &[p.to_bits(), n as u64, replication as u64])
}

/// Seed shared by every true-model evaluation of an experiment.
pub fn eval_seed(master: u64) -> u64 {
    derive_seed(master, TAG_EVAL)
}

/// Environment, oracle and cached oracle value shared by all cells.
pub struct SharedContext {
    pub env: Arc<SimEnv>,
    pub oracle: Arc<DpOraclePolicy>,
    oracle_value: OnceLock<ValueEstimate>,
}

impl SharedContext {
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        let env = Arc::new(SimEnv::new());
        let oracle = Arc::new(DpOraclePolicy::build(env.clone(), config.oracle.clone())?);
        Ok(Self {
            env,
            oracle,
            oracle_value: OnceLock::new(),
        })
    }

    pub fn behavior(&self, p: f64) -> Result<BehaviorPolicy, CliError> {
        let counts: Vec<usize> = self
            .env
            .spec()
            .stages()
            .iter()
            .map(|s| s.n_actions)
            .collect();
        Ok(make_behavior_policy(self.oracle.clone(), p, &counts)?)
    }

    fn oracle_value(&self, config: &ExperimentConfig) -> Result<ValueEstimate, CliError> {
        if let Some(v) = self.oracle_value.get() {
            return Ok(*v);
        }
        let v = value_mc(
            &*self.env,
            &*self.oracle,
            config.polar.eval_rollouts,
            eval_seed(config.seed),
        )?;
        Ok(*self.oracle_value.get_or_init(|| v))
    }
}

/// Fits `P̂` on the dataset and returns `M̃` with zero penalties.
pub fn fit_estimated_model(
    config: &ExperimentConfig,
    env: &SimEnv,
    features: &[StageFeatureMap],
    data: &OfflineDataset,
    seed: u64,
) -> Result<ModifiedDtrModel, CliError> {
    let spec = env.spec();
    let horizon = spec.horizon();
    let mut stages: Vec<Arc<dyn StageTransition>> = Vec::with_capacity(horizon);
    for (k, f) in features.iter().enumerate() {
        let next_box = spec.state_box(k + 1).clone();
        let stage: Arc<dyn StageTransition> = match &config.model {
            ModelSettings::Linear {
                lambda,
                scale,
                delta,
            } => {
                let params =
                    GammaLinearParams::theoretical(env.noise(), *delta)?.with_scale(*scale);
                Arc::new(LinearStageModel::fit(
                    f.clone(),
                    &data.trajectories,
                    k,
                    *lambda,
                    env.noise().clone(),
                    &params,
                    next_box,
                )?)
            }
            ModelSettings::Gp(gp) => {
                let mut rng = stream(derive_seed_path(seed, &[TAG_FIT, k as u64]));
                Arc::new(GpStageModel::fit(
                    f.actions.clone(),
                    &data.trajectories,
                    k,
                    gp,
                    next_box,
                    &mut rng,
                )?)
            }
        };
        stages.push(stage);
    }
    Ok(build_modified_model(
        spec.clone(),
        stages,
        env.rewards(),
        vec![0.0; horizon],
        config.polar.m_noise,
        InitialLaw::UniformBox,
    )?)
}

pub fn polar_config(config: &ExperimentConfig, seed: u64) -> PolarConfig {
    PolarConfig {
        iterations: config.polar.iterations,
        m_k: config.polar.m_k.clone(),
        q_rollouts: config.polar.q_rollouts,
        step_size: config.polar.step_size.clone(),
        seed: derive_seed(seed, TAG_TRAIN),
        ridge_fallback: true,
    }
}

/// Output of one cell before it is flattened into rows.
pub struct CellOutput {
    pub rows: Vec<ResultRow>,
    pub policies: Vec<(f64, SoftmaxSievePolicy)>,
}

pub fn run_cell(
    config: &ExperimentConfig,
    shared: &SharedContext,
    key: CellKey,
) -> Result<CellOutput, CliError> {
    let p = config.grid.p[key.p_index];
    let n = config.grid.n[key.n_index];
    let rep = key.replication;
    let seed = cell_seed(config.seed, p, n, rep);
    let env = &*shared.env;
    let spec = env.spec();
    let horizon = spec.horizon();
    let evaluate = |policy: &dyn Policy| {
        value_mc(
            env,
            policy,
            config.polar.eval_rollouts,
            eval_seed(config.seed),
        )
    };
    let row = |method: &str, c: Option<f64>, iteration: usize, v: ValueEstimate, wall_ms: f64| {
        ResultRow {
            method: method.to_string(),
            n,
            p,
            c,
            replication: rep,
            iteration,
            value_mean: v.mean,
            value_stderr: v.stderr,
            wall_ms: if config.timing { wall_ms } else { 0.0 },
            seed,
        }
    };

    let behavior = shared.behavior(p)?;
    let data = generate_offline_dataset(env, &behavior, n, p, derive_seed(seed, TAG_DATA))?;
    let features = StageFeatureMap::with_budget(spec, config.polar.basis_budget)?;
    let base = fit_estimated_model(config, env, &features, &data, seed)?;

    let mut rows = Vec::new();
    let mut policies = Vec::new();
    for &c in &config.grid.c {
        let model = base.with_penalties(vec![c; horizon])?;
        let initial = SoftmaxSievePolicy::uniform(features.clone());
        let (policy, trace) = polar_train(&model, initial, &polar_config(config, seed), None)?;
        for rec in logged_records(config, &trace) {
            let v = evaluate(&rec.policy)?;
            rows.push(row(METHOD_POLAR, Some(c), rec.iteration, v, rec.wall_ms));
        }
        policies.push((c, policy));
    }
    if config.baselines.dtr_q {
        let q = dtr_q_learning(
            &data.trajectories,
            features.clone(),
            config.baselines.lambda_q,
        )?;
        rows.push(row(METHOD_DTRQ, None, 0, evaluate(&q)?, 0.0));
    }
    if config.baselines.behavior {
        rows.push(row(METHOD_BEHAVIOR, None, 0, evaluate(&behavior)?, 0.0));
    }
    if config.baselines.dp_oracle {
        rows.push(row(
            METHOD_ORACLE,
            None,
            0,
            shared.oracle_value(config)?,
            0.0,
        ));
    }
    Ok(CellOutput { rows, policies })
}

fn logged_records<'a>(
    config: &ExperimentConfig,
    trace: &'a TrainingTrace,
) -> impl Iterator<Item = &'a polar_core::optimizer::IterationRecord> {
    let last = trace.records.len() - 1;
    let all = config.polar.log_iterations;
    trace
        .records
        .iter()
        .enumerate()
        .filter(move |(i, _)| all || *i == last)
        .map(|(_, r)| r)
}

pub fn error_row(config: &ExperimentConfig, key: CellKey) -> ResultRow {
    let p = config.grid.p[key.p_index];
    let n = config.grid.n[key.n_index];
    ResultRow {
        method: METHOD_ERROR.to_string(),
        n,
        p,
        c: None,
        replication: key.replication,
        iteration: 0,
        value_mean: f64::NAN,
        value_stderr: f64::NAN,
        wall_ms: 0.0,
        seed: cell_seed(config.seed, p, n, key.replication),
    }
}

/// All cells in canonical order: `p`, then `n`, then replication.
pub fn cells(config: &ExperimentConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for p_index in 0..config.grid.p.len() {
        for n_index in 0..config.grid.n.len() {
            for replication in 0..config.replications {
                out.push(CellKey {
                    p_index,
                    n_index,
                    replication,
                });
            }
        }
    }
    out
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String, CliError> {
    // timing does not change any value
    let mut c = config.clone();
    c.timing = false;
    Ok(hex::encode(Sha256::digest(c.to_toml_string()?.as_bytes())))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub results: PathBuf,
}

/// Runs every missing cell and (re)writes `results.csv` and `manifest.json`
/// under `out_dir`. With `resume`, cells already in a matching manifest are
/// skipped; failed cells are retried.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    resume: bool,
    threads: Option<usize>,
) -> Result<RunSummary, CliError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), config.to_toml_string()?)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let results_path = out_dir.join(RESULTS_FILE);
    let hash = config_hash(config)?;
    let mut manifest = Manifest::new(hash.clone());
    if resume && manifest_path.exists() {
        let old = Manifest::load(&manifest_path)?;
        if old.config_hash != hash {
            return Err(CliError::Config(
                "cannot resume: the manifest was written for a different configuration".into(),
            ));
        }
        manifest = old;
    }
    let all = cells(config);
    let todo: Vec<CellKey> = all
        .iter()
        .copied()
        .filter(|k| {
            manifest
                .cells
                .get(&k.id())
                .is_none_or(|c| c.error.is_some())
        })
        .collect();
    let skipped = all.len() - todo.len();
    let state = Mutex::new(manifest);
    let flush = |m: &Manifest| -> Result<(), CliError> {
        m.save(&manifest_path)?;
        let rows: Vec<ResultRow> = all
            .iter()
            .filter_map(|k| m.cells.get(&k.id()))
            .flat_map(|c| c.rows.iter().cloned())
            .collect();
        write_rows(&results_path, &rows)
    };
    flush(&state.lock().expect("manifest lock"))?;

    let mut failed = 0;
    if !todo.is_empty() {
        let shared = SharedContext::build(config)?;
        let policy_dir = out_dir.join("policies");
        if config.polar.save_policies {
            std::fs::create_dir_all(&policy_dir)?;
        }
        let run = || -> Result<usize, CliError> {
            todo.par_iter()
                .map(|&key| {
                    let record = match run_cell(config, &shared, key) {
                        Ok(out) => {
                            if config.polar.save_policies {
                                for (c, policy) in &out.policies {
                                    let path = policy_dir.join(format!("{}-c{c}.json", key.id()));
                                    policy.save_json(&path)?;
                                }
                            }
                            CellRecord {
                                rows: out.rows,
                                error: None,
                            }
                        }
                        Err(e) => CellRecord {
                            rows: vec![error_row(config, key)],
                            error: Some(e.to_string()),
                        },
                    };
                    let failed = usize::from(record.error.is_some());
                    let mut m = state.lock().expect("manifest lock");
                    m.cells.insert(key.id(), record);
                    flush(&m)?;
                    Ok(failed)
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))
        };
        failed = match threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?
                .install(run)?,
            None => run()?,
        };
    }
    Ok(RunSummary {
        computed: todo.len(),
        skipped,
        failed,
        results: results_path,
    })
}
