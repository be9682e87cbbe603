//! Exact Gaussian-process transition models with an RBF kernel.
//!
//! Each output coordinate is an independent GP sharing one kernel and one
//! noise level, so a single Cholesky factor of `K + σ² I` serves every output
//! and the posterior variance is a scalar.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::ActionHistoryIndex;
use crate::dtr::{History, StateBox, Trajectory};
use crate::error::{PolarError, Result};
use crate::linalg::{cholesky_with_jitter, log_det_chol};
use crate::pessimism::{StagePrediction, StageTransition};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Rbf,
}

/// `k(x, y) = v exp(-½ Σ_i ((x_i - y_i) / ℓ_i)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl Kernel {
    pub fn rbf(lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        if lengthscales.iter().any(|l| !(*l > 0.0)) || !(signal_variance > 0.0) {
            return Err(PolarError::Config(
                "kernel lengthscales and signal variance must be positive".into(),
            ));
        }
        Ok(Self {
            kind: KernelKind::Rbf,
            lengthscales,
            signal_variance,
        })
    }

    /// Unit lengthscales and unit signal variance.
    pub fn unit(dim: usize) -> Self {
        Self {
            kind: KernelKind::Rbf,
            lengthscales: vec![1.0; dim],
            signal_variance: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub fn with_lengthscale_multiplier(&self, m: f64) -> Self {
        Self {
            lengthscales: self.lengthscales.iter().map(|l| l * m).collect(),
            ..self.clone()
        }
    }
}

/// Fitted exact posterior.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    inputs: Vec<Vec<f64>>,
    outputs: DMatrix<f64>,
    kernel: Kernel,
    sigma: f64,
    chol: Cholesky<f64, Dyn>,
    /// `(K + σ² I)⁻¹ Y`, `n × d_out`.
    alpha: DMatrix<f64>,
    logdet_term: f64,
    jitter: f64,
}

/// Conditions the GP on `(X, Y)` with noise std `sigma`.
pub fn gp_fit(
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    kernel: Kernel,
    sigma: f64,
) -> Result<GpPosterior> {
    let n = inputs.len();
    if n == 0 {
        return Err(PolarError::Data(
            "GP fit needs at least one observation".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(PolarError::Config(format!(
            "GP noise std must be positive, got {sigma}"
        )));
    }
    if outputs.len() != n {
        return Err(PolarError::DimensionMismatch {
            expected: n,
            actual: outputs.len(),
        });
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != kernel.dim()) {
        return Err(PolarError::DimensionMismatch {
            expected: kernel.dim(),
            actual: x.len(),
        });
    }
    let d_out = outputs[0].len();
    if let Some(y) = outputs.iter().find(|y| y.len() != d_out) {
        return Err(PolarError::DimensionMismatch {
            expected: d_out,
            actual: y.len(),
        });
    }
    let mut a = kernel.gram(&inputs);
    let s2 = sigma * sigma;
    for i in 0..n {
        a[(i, i)] += s2;
    }
    let (chol, jitter) = cholesky_with_jitter(&a)?;
    let y = DMatrix::from_fn(n, d_out, |i, j| outputs[i][j]);
    let alpha = chol.solve(&y);
    let logdet_term = log_det_chol(&chol) - n as f64 * s2.ln();
    Ok(GpPosterior {
        inputs,
        outputs: y,
        kernel,
        sigma,
        chol,
        alpha,
        logdet_term,
        jitter,
    })
}

/// [`gp_fit`] on at most `n_max` points drawn uniformly without replacement.
pub fn gp_fit_capped(
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    kernel: Kernel,
    sigma: f64,
    n_max: usize,
    rng: &mut StreamRng,
) -> Result<GpPosterior> {
    if inputs.len() <= n_max {
        return gp_fit(inputs, outputs, kernel, sigma);
    }
    let mut idx = sample_indices(rng, inputs.len(), n_max).into_vec();
    idx.sort_unstable();
    let xs = idx.iter().map(|&i| inputs[i].clone()).collect();
    let ys = idx.iter().map(|&i| outputs[i].clone()).collect();
    gp_fit(xs, ys, kernel, sigma)
}

impl GpPosterior {
    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn d_out(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// `log det(I + K / σ²)`.
    pub fn logdet_term(&self) -> f64 {
        self.logdet_term
    }

    /// Diagonal jitter added on top of `σ²` to obtain the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior mean vector and the shared variance `ĥ(x, x)`, clamped at 0.
    pub fn predict(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let (mean, var) = self.predict_raw(x);
        (mean, var.max(0.0))
    }

    /// As [`GpPosterior::predict`] without the variance clamp.
    pub fn predict_raw(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let n = self.n();
        let kx: Vec<f64> = self
            .inputs
            .iter()
            .map(|xi| self.kernel.eval(x, xi))
            .collect();
        let mean = (0..self.d_out())
            .map(|j| (0..n).map(|i| self.alpha[(i, j)] * kx[i]).sum())
            .collect();
        let l = self.chol.l_dirty();
        let mut z = vec![0.0; n];
        let mut quad = 0.0;
        for i in 0..n {
            let mut v = kx[i];
            for (j, zj) in z.iter().enumerate().take(i) {
                v -= l[(i, j)] * zj;
            }
            z[i] = v / l[(i, i)];
            quad += z[i] * z[i];
        }
        (mean, self.kernel.eval(x, x) - quad)
    }

    /// Log marginal likelihood summed over independent outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n() as f64;
        let fit: f64 = (0..self.d_out())
            .map(|j| self.outputs.column(j).dot(&self.alpha.column(j)))
            .sum();
        let d = self.d_out() as f64;
        -0.5 * fit
            - 0.5 * d * log_det_chol(&self.chol)
            - 0.5 * d * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean plus `N(0, σ² I)` noise, clipped to `next_box`.
    pub fn sample_next(&self, x: &[f64], next_box: &StateBox, rng: &mut StreamRng) -> Vec<f64> {
        let (mut s, _) = self.predict(x);
        for v in s.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += self.sigma * z;
        }
        next_box.clip(&mut s);
        s
    }
}

pub fn gp_predict(post: &GpPosterior, x: &[f64]) -> (Vec<f64>, f64) {
    post.predict(x)
}

pub fn sample_next_gp(
    post: &GpPosterior,
    x: &[f64],
    next_box: &StateBox,
    rng: &mut StreamRng,
) -> Vec<f64> {
    post.sample_next(x, next_box, rng)
}

/// `sqrt(d (2 + 150 log³(d n / δ) L))` with `L = log det(I + K/σ²)`.
pub fn beta_gp_formula(d_out: usize, n: usize, delta: f64, logdet_term: f64) -> Result<f64> {
    if n == 0 {
        return Err(PolarError::Unsupported(
            "beta for an empty training set".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PolarError::Config(format!(
            "delta must be in (0,1), got {delta}"
        )));
    }
    let d = d_out as f64;
    let lg = (d * n as f64 / delta).ln();
    Ok((d * (2.0 + 150.0 * lg.powi(3) * logdet_term.max(0.0))).sqrt())
}

pub fn beta_gp(post: &GpPosterior, delta: f64) -> Result<f64> {
    beta_gp_formula(post.d_out(), post.n(), delta, post.logdet_term)
}

/// `Γ(x) = β / σ · sqrt(ĥ(x, x))`.
pub fn gamma_gp(post: &GpPosterior, x: &[f64], beta: f64) -> f64 {
    beta / post.sigma * post.predict(x).1.sqrt()
}

/// Which `β` multiplies the posterior standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpBetaMode {
    Theoretical {
        delta: f64,
    },
    /// `β = 1`; the scale is absorbed into the penalty `c`.
    #[default]
    Unit,
}

/// `x = (s_0, ..., s_k, one-hot(a_0, ..., a_k))`.
pub fn encode_gp_input(
    index: &ActionHistoryIndex,
    history: &History,
    action: usize,
) -> Result<Vec<f64>> {
    let mut x = history.flat_states();
    let block = index.encode_extended(history.actions(), action)?;
    let start = x.len();
    x.resize(start + index.size(), 0.0);
    x[start + block] = 1.0;
    Ok(x)
}

/// Fitting options for a GP stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpStageConfig {
    pub sigma: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub n_max: usize,
    pub beta: GpBetaMode,
    /// Multipliers of `lengthscale` searched by marginal likelihood; empty disables the search.
    pub lengthscale_grid: Vec<f64>,
}

impl Default for GpStageConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4 * 0.05f64.sqrt() * 2.0,
            lengthscale: 1.0,
            signal_variance: 1.0,
            n_max: 2000,
            beta: GpBetaMode::Unit,
            lengthscale_grid: Vec::new(),
        }
    }
}

/// A fitted GP stage of the estimated model.
#[derive(Clone, Debug)]
pub struct GpStageModel {
    pub actions: ActionHistoryIndex,
    pub posterior: GpPosterior,
    pub beta: f64,
    pub next_box: StateBox,
}

impl GpStageModel {
    pub fn fit(
        actions: ActionHistoryIndex,
        trajectories: &[Trajectory],
        k: usize,
        config: &GpStageConfig,
        next_box: StateBox,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut xs = Vec::with_capacity(trajectories.len());
        let mut ys = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            xs.push(encode_gp_input(&actions, &t.history(k), t.actions[k])?);
            ys.push(t.states[k + 1].clone());
        }
        let dim = xs.first().map_or(0, |x| x.len());
        let base = Kernel::rbf(vec![config.lengthscale; dim], config.signal_variance)?;
        let fit = |kernel: Kernel, rng: &mut StreamRng| {
            gp_fit_capped(
                xs.clone(),
                ys.clone(),
                kernel,
                config.sigma,
                config.n_max,
                rng,
            )
        };
        let posterior = if config.lengthscale_grid.is_empty() {
            fit(base, rng)?
        } else {
            let mut best: Option<GpPosterior> = None;
            for &m in &config.lengthscale_grid {
                // identical subsample for every candidate
                let mut r = rng.clone();
                let post = fit(base.with_lengthscale_multiplier(m), &mut r)?;
                if best
                    .as_ref()
                    .is_none_or(|b| post.log_marginal_likelihood() > b.log_marginal_likelihood())
                {
                    best = Some(post);
                }
            }
            best.expect("non-empty grid")
        };
        let beta = match config.beta {
            GpBetaMode::Theoretical { delta } => beta_gp(&posterior, delta)?,
            GpBetaMode::Unit => 1.0,
        };
        Ok(Self {
            actions,
            posterior,
            beta,
            next_box,
        })
    }
}

impl StageTransition for GpStageModel {
    fn predict(&self, history: &History, action: usize) -> StagePrediction {
        let x = encode_gp_input(&self.actions, history, action)
            .expect("history matches the stage action index");
        let (mean, var) = self.posterior.predict(&x);
        StagePrediction {
            mean,
            gamma: self.beta / self.posterior.sigma * var.sqrt(),
        }
    }

    fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]) {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = self.posterior.sigma * z;
        }
    }

    fn next_box(&self) -> &StateBox {
        &self.next_box
    }
}
