use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polar_cli::config::{ExperimentConfig, Preset};
use polar_cli::experiment::{
    eval_seed, fit_estimated_model, polar_config, run_experiment, SharedContext,
};
use polar_core::baselines::estimate_optimal_value;
use polar_core::eval::{evaluate_policy_true, importance_sampling_ope};
use polar_core::optimizer::polar_train;
use polar_core::simenv::{generate_offline_dataset, OfflineDataset, SimEnv};
use polar_core::{DtrModel, SoftmaxSievePolicy, StageFeatureMap};

#[derive(Parser)]
#[command(
    name = "polar",
    version,
    about = "Pessimistic offline policy learning for dynamic treatment regimes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            (None, Some(p)) => ExperimentConfig::preset(p),
            (None, None) => ExperimentConfig::fig1(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write results.csv and manifest.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads for the cell pool.
        #[arg(long, env = "POLAR_THREADS")]
        threads: Option<usize>,
        /// Skip cells already recorded in the manifest.
        #[arg(long)]
        resume: bool,
        /// Use the paper-scale replication count and n grid.
        #[arg(long)]
        full_scale: bool,
    },
    /// Generate an offline dataset from the behavior policy.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the estimated model on a dataset and train one POLAR policy.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        c: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved policy under the true model, optionally with IS on a dataset.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        self_normalized: bool,
    },
    /// Estimate the optimal value with the tree-sampling DP oracle.
    DpOracle {
        #[arg(long, default_value_t = 50)]
        states: usize,
        #[arg(long, default_value_t = 200)]
        n_branch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            cfg,
            out,
            threads,
            resume,
            full_scale,
        } => {
            let mut config = cfg.load()?;
            if full_scale {
                config = config.full_scale();
            }
            let start = Instant::now();
            let summary = run_experiment(&config, &out, resume, threads)?;
            eprintln!(
                "{} cells computed, {} skipped, {} failed in {:.1}s; results in {}",
                summary.computed,
                summary.skipped,
                summary.failed,
                start.elapsed().as_secs_f64(),
                summary.results.display()
            );
            if summary.failed > 0 {
                bail!("{} cells failed; see manifest.json", summary.failed);
            }
        }
        Command::GenData { cfg, n, p, out } => {
            let config = cfg.load()?;
            let shared = SharedContext::build(&config)?;
            let behavior = shared.behavior(p)?;
            let ds = generate_offline_dataset(&*shared.env, &behavior, n, p, config.seed)?;
            ds.write_ndjson(&out)?;
            eprintln!("wrote {n} trajectories to {}", out.display());
        }
        Command::Train { cfg, data, c, out } => {
            let config = cfg.load()?;
            if c < 0.0 {
                bail!("c must be non-negative");
            }
            let ds = OfflineDataset::read_ndjson(&data)?;
            let env = SimEnv::new();
            let features = StageFeatureMap::with_budget(env.spec(), config.polar.basis_budget)?;
            let base = fit_estimated_model(&config, &env, &features, &ds, config.seed)?;
            let model = base.with_penalties(vec![c; env.horizon()])?;
            let initial = SoftmaxSievePolicy::uniform(features);
            let (policy, trace) =
                polar_train(&model, initial, &polar_config(&config, config.seed), None)?;
            policy.save_json(&out)?;
            let value = evaluate_policy_true(
                &env,
                &policy,
                config.polar.eval_rollouts,
                eval_seed(config.seed),
            )?;
            eprintln!(
                "trained {} iterations ({} Q evaluations); true value {:.4} ± {:.4}; policy in {}",
                config.polar.iterations,
                trace.q_evaluations,
                value.mean,
                value.stderr,
                out.display()
            );
        }
        Command::Eval {
            policy,
            rollouts,
            seed,
            data,
            self_normalized,
        } => {
            let policy = SoftmaxSievePolicy::load_json(&policy)?;
            let env = SimEnv::new();
            let v = evaluate_policy_true(&env, &policy, rollouts, seed)?;
            println!("true_value,{:.6},{:.6},{}", v.mean, v.stderr, v.n_rollouts);
            if let Some(path) = data {
                let ds = OfflineDataset::read_ndjson(&path)?;
                let ope = importance_sampling_ope(&policy, &ds, self_normalized)?;
                println!(
                    "is_ope,{:.6},{:.6},{:.2}{}",
                    ope.estimate,
                    ope.stderr,
                    ope.ess,
                    if ope.low_ess { ",low_ess" } else { "" }
                );
            }
        }
        Command::DpOracle {
            states,
            n_branch,
            seed,
        } => {
            let env = SimEnv::new();
            let start = Instant::now();
            let (mean, values) = estimate_optimal_value(&env, states, n_branch, seed)?;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (values.len().max(2) - 1) as f64)
                .sqrt();
            println!(
                "v1_star_mean,{mean:.6},{:.6},{states},{:.1}s",
                sd / (states as f64).sqrt(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
