//! Ridge-estimated linear transition models `s' = W φ(h, a) + ε` and their
//! closed-form uncertainty quantifier.
//!
//! Features produced by [`StageFeatureMap::phi`] are one-hot over action
//! histories, so the Gram matrix `Λ = Σ φ φᵀ + λ I` is block diagonal with one
//! block per action history. The estimate stores one Cholesky factor per
//! block; a plain dense feature vector is the single-block case.
//!
//! The quantifier is
//!
//! ```text
//! Γ(h, a) = min{2, 2 C₂ sqrt(φᵀ Λ⁻¹ φ)},   C₂ = B_d σ C_L β
//! β = sqrt(λ) ‖W‖₂ + sqrt(8σ² d log 5 + 8σ² log(det(Λ)^{1/2} / det(λI)^{1/2} / δ))
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{PhiFeature, StageFeatureMap};
use crate::dtr::{History, StateBox, Trajectory};
use crate::error::{PolarError, Result};
use crate::linalg::{inv_quad_form, log_det_chol};
use crate::pessimism::{StagePrediction, StageTransition};
use crate::rng::StreamRng;

/// Additive transition noise with a known law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Zero {
        dim: usize,
    },
    /// `ε_i = 2w (z_i - 1/2)`, `z_i ~ Beta(2, 2)` i.i.d., so `|ε_i| <= w`.
    ScaledBeta22 {
        dim: usize,
        half_width: f64,
    },
    Uniform {
        dim: usize,
        half_width: f64,
    },
    Gaussian {
        dim: usize,
        std: f64,
    },
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        match *self {
            NoiseSpec::Zero { dim }
            | NoiseSpec::ScaledBeta22 { dim, .. }
            | NoiseSpec::Uniform { dim, .. }
            | NoiseSpec::Gaussian { dim, .. } => dim,
        }
    }

    pub fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match *self {
            NoiseSpec::Zero { .. } => out.iter_mut().for_each(|x| *x = 0.0),
            NoiseSpec::ScaledBeta22 { half_width, .. } => {
                for x in out.iter_mut() {
                    *x = 2.0 * half_width * beta22_centered_quantile(rng.random::<f64>());
                }
            }
            NoiseSpec::Uniform { half_width, .. } => {
                for x in out.iter_mut() {
                    *x = half_width * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            NoiseSpec::Gaussian { std, .. } => {
                for x in out.iter_mut() {
                    *x = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    /// Almost-sure bound on `‖ε‖₂`, if the noise is bounded.
    pub fn l2_bound(&self) -> Option<f64> {
        match *self {
            NoiseSpec::Zero { .. } => Some(0.0),
            NoiseSpec::ScaledBeta22 { dim, half_width }
            | NoiseSpec::Uniform { dim, half_width } => Some(half_width * (dim as f64).sqrt()),
            NoiseSpec::Gaussian { .. } => None,
        }
    }

    pub fn marginal_std(&self) -> f64 {
        match *self {
            NoiseSpec::Zero { .. } => 0.0,
            // Var(Beta(2,2)) = 1/20
            NoiseSpec::ScaledBeta22 { half_width, .. } => 2.0 * half_width * (0.05f64).sqrt(),
            NoiseSpec::Uniform { half_width, .. } => half_width / 3f64.sqrt(),
            NoiseSpec::Gaussian { std, .. } => std,
        }
    }

    /// Half-width of the per-coordinate support, if bounded.
    pub fn support_half_width(&self) -> Option<f64> {
        match *self {
            NoiseSpec::ScaledBeta22 { half_width, .. } | NoiseSpec::Uniform { half_width, .. } => {
                Some(half_width)
            }
            NoiseSpec::Gaussian { std, .. } => Some(8.0 * std),
            NoiseSpec::Zero { .. } => None,
        }
    }

    /// Per-coordinate density, when the law has one.
    pub fn marginal_density(&self, x: f64) -> Option<f64> {
        match *self {
            NoiseSpec::Zero { .. } => None,
            NoiseSpec::ScaledBeta22 { half_width: w, .. } => Some(if x.abs() <= w {
                0.75 / w * (1.0 - (x / w).powi(2))
            } else {
                0.0
            }),
            NoiseSpec::Uniform { half_width: w, .. } => {
                Some(if x.abs() <= w { 0.5 / w } else { 0.0 })
            }
            NoiseSpec::Gaussian { std, .. } => {
                Some((-(x / std).powi(2) / 2.0).exp() / (std * (2.0 * std::f64::consts::PI).sqrt()))
            }
        }
    }

    pub fn density(&self, x: &[f64]) -> Option<f64> {
        x.iter()
            .map(|&xi| self.marginal_density(xi))
            .try_fold(1.0, |acc, d| d.map(|d| acc * d))
    }

    /// Lipschitz constant of the joint density (sup of its gradient norm).
    /// Exact up to grid resolution for `dim <= 2`, a valid upper bound above.
    pub fn density_lipschitz(&self) -> Option<f64> {
        type DensityAndSlope = Box<dyn Fn(f64) -> (f64, f64)>;
        let (fmax, dmax, grid): (f64, f64, DensityAndSlope) = match *self {
            NoiseSpec::ScaledBeta22 { half_width: w, .. } => (
                0.75 / w,
                1.5 / (w * w),
                Box::new(move |x| (0.75 / w * (1.0 - (x / w).powi(2)), -1.5 * x / w.powi(3))),
            ),
            NoiseSpec::Gaussian { std, .. } => {
                let norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
                (
                    norm,
                    norm * (-0.5f64).exp() / std,
                    Box::new(move |x| {
                        let f = norm * (-(x / std).powi(2) / 2.0).exp();
                        (f, -x / (std * std) * f)
                    }),
                )
            }
            NoiseSpec::Zero { .. } | NoiseSpec::Uniform { .. } => return None,
        };
        let d = self.dim();
        match d {
            1 => Some(dmax),
            2 => {
                let w = self.support_half_width().expect("bounded or truncated");
                let n = 801;
                let pts: Vec<(f64, f64)> = (0..n)
                    .map(|i| grid(-w + 2.0 * w * i as f64 / (n - 1) as f64))
                    .collect();
                let mut best = 0.0f64;
                for &(fx, dx) in &pts {
                    for &(fy, dy) in &pts {
                        best = best.max(((dx * fy).powi(2) + (fx * dy).powi(2)).sqrt());
                    }
                }
                Some(best)
            }
            _ => Some((d as f64).sqrt() * dmax * fmax.powi(d as i32 - 1)),
        }
    }
}

/// Quantile of `Beta(2,2) - 1/2`: solves `3z² - 2z³ = u` in closed form.
fn beta22_centered_quantile(u: f64) -> f64 {
    ((2.0 * u - 1.0).clamp(-1.0, 1.0).asin() / 3.0).sin()
}

/// Shape of a block-structured ridge problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RidgeShape {
    pub n_blocks: usize,
    pub block_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
struct RidgeBlock {
    chol: Cholesky<f64, Dyn>,
    /// Ŵ restricted to this block, `out_dim × block_dim`.
    w: DMatrix<f64>,
    log_det: f64,
    n: usize,
}

#[derive(Clone, Debug)]
pub struct LinearTransitionEstimate {
    blocks: Vec<RidgeBlock>,
    shape: RidgeShape,
    lambda: f64,
    n_samples: usize,
    noise: NoiseSpec,
}

/// `Ŵ = (Σ s' φᵀ)(Σ φ φᵀ + λ I)⁻¹`, fitted block by block.
pub fn fit_ridge(
    samples: &[(PhiFeature, Vec<f64>)],
    shape: RidgeShape,
    lambda: f64,
    noise: NoiseSpec,
) -> Result<LinearTransitionEstimate> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(PolarError::Config(format!(
            "ridge penalty must be >= 0, got {lambda}"
        )));
    }
    let RidgeShape {
        n_blocks,
        block_dim,
        out_dim,
    } = shape;
    let mut grams = vec![DMatrix::<f64>::zeros(block_dim, block_dim); n_blocks];
    let mut cross = vec![DMatrix::<f64>::zeros(block_dim, out_dim); n_blocks];
    let mut counts = vec![0usize; n_blocks];
    for (phi, next) in samples {
        if phi.n_blocks != n_blocks || phi.block_dim() != block_dim {
            return Err(PolarError::DimensionMismatch {
                expected: n_blocks * block_dim,
                actual: phi.len(),
            });
        }
        if next.len() != out_dim {
            return Err(PolarError::DimensionMismatch {
                expected: out_dim,
                actual: next.len(),
            });
        }
        let g = &mut grams[phi.block];
        let c = &mut cross[phi.block];
        for (i, &u) in phi.values.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            for (j, &v) in phi.values.iter().enumerate() {
                g[(i, j)] += u * v;
            }
            for (j, &s) in next.iter().enumerate() {
                c[(i, j)] += u * s;
            }
        }
        counts[phi.block] += 1;
    }
    let blocks = grams
        .into_iter()
        .zip(cross)
        .zip(counts)
        .enumerate()
        .map(|(b, ((mut gram, cross), n))| {
            for i in 0..block_dim {
                gram[(i, i)] += lambda;
            }
            let chol = Cholesky::new(gram).ok_or_else(|| {
                PolarError::Numerical(format!(
                    "ridge Gram block {b} is singular (lambda = {lambda}, {n} samples)"
                ))
            })?;
            let w = chol.solve(&cross).transpose();
            let log_det = log_det_chol(&chol);
            Ok(RidgeBlock {
                chol,
                w,
                log_det,
                n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearTransitionEstimate {
        blocks,
        shape,
        lambda,
        n_samples: samples.len(),
        noise,
    })
}

impl LinearTransitionEstimate {
    pub fn shape(&self) -> RidgeShape {
        self.shape
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn out_dim(&self) -> usize {
        self.shape.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.n_blocks * self.shape.block_dim
    }

    /// Samples that landed in each block.
    pub fn block_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.n).collect()
    }

    fn check(&self, phi: &PhiFeature) -> Result<()> {
        if phi.n_blocks != self.shape.n_blocks || phi.block_dim() != self.shape.block_dim {
            return Err(PolarError::DimensionMismatch {
                expected: self.feature_dim(),
                actual: phi.len(),
            });
        }
        Ok(())
    }

    /// `Ŵ φ`.
    pub fn predict_mean(&self, phi: &PhiFeature) -> Result<Vec<f64>> {
        self.check(phi)?;
        let w = &self.blocks[phi.block].w;
        Ok((0..self.shape.out_dim)
            .map(|r| {
                phi.values
                    .iter()
                    .enumerate()
                    .map(|(c, v)| w[(r, c)] * v)
                    .sum()
            })
            .collect())
    }

    /// `φᵀ Λ⁻¹ φ`.
    pub fn quad_form(&self, phi: &PhiFeature) -> Result<f64> {
        self.check(phi)?;
        Ok(inv_quad_form(&self.blocks[phi.block].chol, &phi.values))
    }

    /// `log det Λ` over the full feature space.
    pub fn log_det_lambda(&self) -> f64 {
        self.blocks.iter().map(|b| b.log_det).sum()
    }

    /// Dense `Ŵ`, `out_dim × feature_dim`.
    pub fn w_hat(&self) -> DMatrix<f64> {
        let d = self.shape.block_dim;
        let mut w = DMatrix::zeros(self.shape.out_dim, self.feature_dim());
        for (b, block) in self.blocks.iter().enumerate() {
            w.view_mut((0, b * d), (self.shape.out_dim, d))
                .copy_from(&block.w);
        }
        w
    }

    /// Dense `Λ`, reconstructed from the stored factors.
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        let d = self.shape.block_dim;
        let mut m = DMatrix::zeros(self.feature_dim(), self.feature_dim());
        for (b, block) in self.blocks.iter().enumerate() {
            let l = block.chol.l();
            m.view_mut((b * d, b * d), (d, d))
                .copy_from(&(&l * l.transpose()));
        }
        m
    }

    /// Spectral norm `‖Ŵ‖₂`, via the small `ŴŴᵀ` Gram matrix.
    pub fn w_hat_spectral_norm(&self) -> f64 {
        let mut g = DMatrix::<f64>::zeros(self.shape.out_dim, self.shape.out_dim);
        for block in &self.blocks {
            g += &block.w * block.w.transpose();
        }
        g.symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |m, v| m.max(*v))
            .max(0.0)
            .sqrt()
    }

    /// Clipped draw `Ŵφ + ε`.
    pub fn sample_next(
        &self,
        phi: &PhiFeature,
        next_box: &StateBox,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let mut s = self.predict_mean(phi)?;
        let eps = self.noise.sample(rng);
        s.iter_mut().zip(eps).for_each(|(x, e)| *x += e);
        next_box.clip(&mut s);
        Ok(s)
    }
}

pub fn sample_next_linear(
    est: &LinearTransitionEstimate,
    phi: &PhiFeature,
    next_box: &StateBox,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    est.sample_next(phi, next_box, rng)
}

/// How the constant `C₂` in front of the elliptical width is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantifierScale {
    /// `C₂ = B_d σ C_L β`.
    #[default]
    Theoretical,
    /// `C₂ = 1`; the remaining constants are absorbed into the penalty `c`.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaLinearParams {
    pub delta: f64,
    /// Stand-in for `‖W*‖₂`; `None` plugs in `‖Ŵ‖₂`.
    pub w_norm_bound: Option<f64>,
    /// Almost-sure `ℓ2` noise bound `σ`.
    pub sigma: f64,
    /// Lipschitz constant `C_L` of the noise density.
    pub lipschitz: f64,
    pub scale: QuantifierScale,
}

impl GammaLinearParams {
    /// Defaults: plug-in `‖Ŵ‖₂`, `C_L = 1`, `σ` from the noise bound.
    pub fn new(noise: &NoiseSpec, delta: f64) -> Result<Self> {
        let sigma = noise.l2_bound().filter(|s| *s > 0.0).ok_or_else(|| {
            PolarError::Unsupported("the linear quantifier needs bounded, non-zero noise".into())
        })?;
        let params = Self {
            delta,
            w_norm_bound: None,
            sigma,
            lipschitz: 1.0,
            scale: QuantifierScale::Theoretical,
        };
        params.validate()?;
        Ok(params)
    }

    /// All constants from the noise law, including the density Lipschitz constant.
    pub fn theoretical(noise: &NoiseSpec, delta: f64) -> Result<Self> {
        let mut p = Self::new(noise, delta)?;
        p.lipschitz = noise
            .density_lipschitz()
            .ok_or_else(|| PolarError::Unsupported("noise density is not Lipschitz".into()))?;
        Ok(p)
    }

    pub fn with_scale(mut self, scale: QuantifierScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PolarError::Config(format!(
                "delta must be in (0,1), got {}",
                self.delta
            )));
        }
        if self.sigma <= 0.0 || self.lipschitz < 0.0 || self.w_norm_bound.is_some_and(|b| b < 0.0) {
            return Err(PolarError::Config(
                "quantifier constants must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Lebesgue volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

pub fn beta_linear(est: &LinearTransitionEstimate, params: &GammaLinearParams) -> Result<f64> {
    params.validate()?;
    if est.lambda <= 0.0 {
        return Err(PolarError::Numerical(
            "beta needs lambda > 0 (log det(λI))".into(),
        ));
    }
    let s2 = params.sigma * params.sigma;
    let d = est.out_dim() as f64;
    let half_log_ratio = 0.5 * (est.log_det_lambda() - est.feature_dim() as f64 * est.lambda.ln());
    let bound = params
        .w_norm_bound
        .unwrap_or_else(|| est.w_hat_spectral_norm());
    let inner = 8.0 * s2 * d * 5f64.ln() + 8.0 * s2 * (half_log_ratio - params.delta.ln());
    Ok(est.lambda.sqrt() * bound + inner.max(0.0).sqrt())
}

/// Precomputed `C₂` for one estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearQuantifier {
    pub beta: f64,
    pub c2: f64,
}

impl LinearQuantifier {
    pub fn new(est: &LinearTransitionEstimate, params: &GammaLinearParams) -> Result<Self> {
        let beta = beta_linear(est, params)?;
        let c2 = match params.scale {
            QuantifierScale::Theoretical => {
                unit_ball_volume(est.out_dim()) * params.sigma * params.lipschitz * beta
            }
            QuantifierScale::Unit => 1.0,
        };
        Ok(Self { beta, c2 })
    }

    pub fn gamma(&self, est: &LinearTransitionEstimate, phi: &PhiFeature) -> Result<f64> {
        let q = est.quad_form(phi)?;
        Ok((2.0 * self.c2 * q.max(0.0).sqrt()).min(2.0))
    }
}

pub fn gamma_linear(
    est: &LinearTransitionEstimate,
    params: &GammaLinearParams,
    phi: &PhiFeature,
) -> Result<f64> {
    LinearQuantifier::new(est, params)?.gamma(est, phi)
}

/// `‖p(· - μ_a) - p(· - μ_b)‖₁` for a shared noise density, by midpoint
/// quadrature with `resolution` cells per coordinate over the union of the
/// two supports.
pub fn l1_distance_shifted(
    noise: &NoiseSpec,
    mean_a: &[f64],
    mean_b: &[f64],
    resolution: usize,
) -> Result<f64> {
    let w = match noise {
        NoiseSpec::Zero { .. } => {
            return Err(PolarError::Unsupported(
                "degenerate noise has no density".into(),
            ))
        }
        other => other.support_half_width().expect("bounded support"),
    };
    let d = noise.dim();
    if mean_a.len() != d || mean_b.len() != d {
        return Err(PolarError::DimensionMismatch {
            expected: d,
            actual: mean_a.len().min(mean_b.len()),
        });
    }
    let lo: Vec<f64> = mean_a
        .iter()
        .zip(mean_b)
        .map(|(a, b)| a.min(*b) - w)
        .collect();
    let hi: Vec<f64> = mean_a
        .iter()
        .zip(mean_b)
        .map(|(a, b)| a.max(*b) + w)
        .collect();
    let h: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, u)| (u - l) / resolution as f64)
        .collect();
    let cell: f64 = h.iter().product();
    // per-coordinate density tables: the joint density is a product
    let table = |mean: &[f64]| -> Vec<Vec<f64>> {
        (0..d)
            .map(|i| {
                (0..resolution)
                    .map(|j| {
                        let x = lo[i] + (j as f64 + 0.5) * h[i];
                        noise.marginal_density(x - mean[i]).unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect()
    };
    let (ta, tb) = (table(mean_a), table(mean_b));
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let (mut pa, mut pb) = (1.0, 1.0);
        for i in 0..d {
            pa *= ta[i][idx[i]];
            pb *= tb[i][idx[i]];
        }
        total += (pa - pb).abs();
        let mut i = 0;
        while i < d {
            idx[i] += 1;
            if idx[i] < resolution {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
        if i == d {
            break;
        }
    }
    Ok((total * cell).min(2.0))
}

/// L1 distance between the transition laws `W_a φ + ε` and `W_b φ + ε`.
pub fn l1_distance_linear(
    w_a: &DMatrix<f64>,
    w_b: &DMatrix<f64>,
    phi: &PhiFeature,
    noise: &NoiseSpec,
    resolution: usize,
) -> Result<f64> {
    let x = DVector::from_vec(phi.to_dense());
    if w_a.ncols() != x.len() || w_b.ncols() != x.len() {
        return Err(PolarError::DimensionMismatch {
            expected: x.len(),
            actual: w_a.ncols(),
        });
    }
    let (ma, mb) = (w_a * &x, w_b * &x);
    l1_distance_shifted(noise, ma.as_slice(), mb.as_slice(), resolution)
}

/// Stage-`k` transition pairs `(φ_k(h_k, a_k), s_{k+1})` from trajectories.
pub fn stage_samples(
    features: &StageFeatureMap,
    trajectories: &[Trajectory],
    k: usize,
) -> Result<Vec<(PhiFeature, Vec<f64>)>> {
    trajectories
        .iter()
        .map(|t| {
            Ok((
                features.phi(&t.history(k), t.actions[k])?,
                t.states[k + 1].clone(),
            ))
        })
        .collect()
}

/// A fitted stage of the estimated model: feature map, ridge estimate and
/// quantifier.
#[derive(Clone, Debug)]
pub struct LinearStageModel {
    pub features: StageFeatureMap,
    pub estimate: LinearTransitionEstimate,
    pub quantifier: LinearQuantifier,
    pub next_box: StateBox,
}

impl LinearStageModel {
    pub fn fit(
        features: StageFeatureMap,
        trajectories: &[Trajectory],
        k: usize,
        lambda: f64,
        noise: NoiseSpec,
        params: &GammaLinearParams,
        next_box: StateBox,
    ) -> Result<Self> {
        let samples = stage_samples(&features, trajectories, k)?;
        let shape = RidgeShape {
            n_blocks: features.n_action_histories(),
            block_dim: features.basis_size(),
            out_dim: next_box.dim(),
        };
        let estimate = fit_ridge(&samples, shape, lambda, noise)?;
        let quantifier = LinearQuantifier::new(&estimate, params)?;
        Ok(Self {
            features,
            estimate,
            quantifier,
            next_box,
        })
    }
}

impl StageTransition for LinearStageModel {
    fn predict(&self, history: &History, action: usize) -> StagePrediction {
        let phi = self
            .features
            .phi(history, action)
            .expect("history matches the stage feature map");
        let mean = self
            .estimate
            .predict_mean(&phi)
            .expect("shapes fixed at fit time");
        let gamma = self
            .quantifier
            .gamma(&self.estimate, &phi)
            .expect("shapes fixed at fit time");
        StagePrediction { mean, gamma }
    }

    fn sample_noise(&self, rng: &mut StreamRng, out: &mut [f64]) {
        self.estimate.noise.sample_into(rng, out);
    }

    fn next_box(&self) -> &StateBox {
        &self.next_box
    }
}
