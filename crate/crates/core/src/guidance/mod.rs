//! Noise schedules, score algebra and score providers for score distillation.

pub mod provider;
pub mod remote;
pub mod step;
pub mod wire;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use provider::{BranchEps, DiracProvider, DiracTarget, ScoreProvider, ScoreRequest, ScoreResponse};
pub use remote::{EchoMode, EchoServer, RemoteProvider};
pub use step::{dual_branch_batch, dual_branch_step, StepContext, StepOutcome, StepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// w_t = 1
    #[default]
    Unit,
    /// w_t = σ_t²
    SigmaSquared,
    /// w_t = σ_t / α_t, cancelling the α_t/σ_t factor of an exact denoiser.
    SigmaOverAlpha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
    pub weighting: Weighting,
}

impl NoiseSchedule {
    /// Betas linear in √β between `beta_start` and `beta_end`; ᾱ_t = Π_{s≤t}(1 − β_s).
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                let beta = (a + (b - a) * f).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self { alphas_cumprod, weighting: Weighting::Unit }
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas_cumprod[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alphas_cumprod[t]).sqrt()
    }

    pub fn weight(&self, t: usize) -> f64 {
        match self.weighting {
            Weighting::Unit => 1.0,
            Weighting::SigmaSquared => 1.0 - self.alphas_cumprod[t],
            Weighting::SigmaOverAlpha => self.sigma(t) / self.alpha(t),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(1000, 8.5e-4, 1.2e-2)
    }
}

/// ε = α·v + σ·x_t
pub fn v_to_eps_with(v: &[f64], x_t: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    v.iter().zip(x_t).map(|(v, x)| alpha * v + sigma * x).collect()
}

/// x₀ = α·x_t − σ·v
pub fn v_to_x0_with(v: &[f64], x_t: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    v.iter().zip(x_t).map(|(v, x)| alpha * x - sigma * v).collect()
}

/// x₀ = (x_t − σ·ε) / α
pub fn eps_to_x0_with(eps: &[f64], x_t: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    eps.iter().zip(x_t).map(|(e, x)| (x - sigma * e) / alpha).collect()
}

pub fn v_to_eps(v: &[f64], x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    v_to_eps_with(v, x_t, schedule.alpha(t), schedule.sigma(t))
}

pub fn eps_to_x0(eps: &[f64], x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    eps_to_x0_with(eps, x_t, schedule.alpha(t), schedule.sigma(t))
}

fn zip_map<F: Float>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// w_t·(ε̂ − ε)
pub fn sds_delta<F: Float>(eps_pred: &[F], eps_noise: &[F], w_t: F) -> Vec<F> {
    zip_map(eps_pred, eps_noise, |p, n| w_t * (p - n))
}

pub struct CfgParts<F = f64> {
    pub delta_g: Vec<F>,
    pub delta_c: Vec<F>,
    pub delta: Vec<F>,
}

/// Generative part ε_cond − ε, classifier part ε_cond − ε_uncond, and their τ-weighted sum.
pub fn decompose_cfg<F: Float>(eps_cond: &[F], eps_uncond: &[F], eps_noise: &[F], tau: F) -> CfgParts<F> {
    let delta_g = zip_map(eps_cond, eps_noise, |c, n| c - n);
    let delta_c = zip_map(eps_cond, eps_uncond, |c, u| c - u);
    let delta = zip_map(&delta_g, &delta_c, |g, c| g + tau * c);
    CfgParts { delta_g, delta_c, delta }
}

pub struct NegativeParts<F = f64> {
    pub delta_c: Vec<F>,
    pub delta_n: Vec<F>,
    pub delta_nc: Vec<F>,
}

/// Classifier score, negative score and their difference.
pub fn negative_classifier_delta<F: Float>(eps_cond: &[F], eps_uncond: &[F], eps_neg: &[F]) -> NegativeParts<F> {
    let delta_c = zip_map(eps_cond, eps_uncond, |c, u| c - u);
    let delta_n = zip_map(eps_neg, eps_uncond, |n, u| n - u);
    let delta_nc = zip_map(&delta_c, &delta_n, |c, n| c - n);
    NegativeParts { delta_c, delta_n, delta_nc }
}

/// How the negative-score weight τ2 depends on the timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Tau2Schedule {
    /// 0 below `at`, 1 from `at` on.
    Step { at: usize },
    /// 0 below `start`, 1 from `end` on, linear in between.
    Ramp { start: usize, end: usize },
}

impl Default for Tau2Schedule {
    fn default() -> Self {
        Tau2Schedule::Step { at: 200 }
    }
}

impl Tau2Schedule {
    pub fn value(&self, t: usize) -> f64 {
        match *self {
            Tau2Schedule::Step { at } => (t >= at) as u8 as f64,
            Tau2Schedule::Ramp { start, end } => {
                if t < start {
                    0.0
                } else if t >= end {
                    1.0
                } else {
                    (t - start) as f64 / (end - start) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// w_t·(ε_cond − ε)
    Vanilla,
    /// w_t·(δ_g + τ1·δ_c)
    Cfg,
    /// w_t·(τ1·δ_c − τ2(t)·δ_n)
    #[default]
    AnnealedNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub tau1: f64,
    pub tau2: Tau2Schedule,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub weighting: Weighting,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::AnnealedNegative,
            tau1: 7.5,
            tau2: Tau2Schedule::default(),
            lambda_rgb: 0.5,
            lambda_depth: 0.5,
            t_min: 20,
            t_max: 980,
            weighting: Weighting::Unit,
        }
    }
}

impl GuidanceConfig {
    pub fn problems(&self, steps: usize) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.tau1 > 0.0) {
            p.push(format!("guidance.tau1 = {} must be positive", self.tau1));
        }
        if !(self.lambda_rgb >= 0.0 && self.lambda_depth >= 0.0) {
            p.push("guidance.lambda_rgb and guidance.lambda_depth must be non-negative".into());
        }
        if self.t_min < 1 || self.t_min >= self.t_max || self.t_max > steps {
            p.push(format!(
                "guidance.t_min/t_max = {}/{} must satisfy 1 ≤ t_min < t_max ≤ {steps}",
                self.t_min, self.t_max
            ));
        }
        if let Tau2Schedule::Ramp { start, end } = self.tau2 {
            if start >= end {
                p.push("guidance.tau2 ramp needs start < end".into());
            }
        }
        p
    }
}

/// w_t·(τ1·δ_c − τ2(t)·δ_n)
pub fn annealed_delta(
    delta_c: &[f64],
    delta_n: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Vec<f64> {
    let w = schedule.weight(t);
    let tau2 = config.tau2.value(t);
    zip_map(delta_c, delta_n, |c, n| w * (config.tau1 * c - tau2 * n))
}

/// The per-branch adjoint for the configured guidance mode.
pub fn branch_delta(
    eps: &BranchEps,
    eps_noise: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Vec<f64> {
    let w = schedule.weight(t);
    match config.mode {
        GuidanceMode::Vanilla => sds_delta(&eps.cond, eps_noise, w),
        GuidanceMode::Cfg => decompose_cfg(&eps.cond, &eps.uncond, eps_noise, config.tau1)
            .delta
            .into_iter()
            .map(|d| w * d)
            .collect(),
        GuidanceMode::AnnealedNegative => {
            let parts = negative_classifier_delta(&eps.cond, &eps.uncond, &eps.neg);
            annealed_delta(&parts.delta_c, &parts.delta_n, t, schedule, config)
        }
    }
}
