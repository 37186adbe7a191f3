//! Noise schedules, the closed-form forward process and the DDPM/DDIM reverse
//! updates.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `t = 0` denotes the clean signal
//! with `ᾱ_0 = 1`. Noise is always passed in by the caller.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Real, Tensor4};

/// Smallest `ᾱ_t` for which `x̂_0` is still recovered.
const ALPHA_BAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.num_steps() || (t == 0 && !allow_zero) {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product `ᾱ_t`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, true)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    /// η: 0 gives deterministic DDIM, 1 gives DDPM-equivalent variance.
    pub sigma_scale: f64,
    pub seed: u64,
    /// Clamp x̂₀ to `[-c, c]` before every update.
    #[serde(default)]
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 50,
            sigma_scale: 0.0,
            seed: 0,
            clip_x0: None,
        }
    }
}

impl SamplerConfig {
    /// Strictly decreasing timesteps in `[1, T]`, starting at `T`.
    pub fn timesteps(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        let total = schedule.num_steps();
        let n = self.num_inference_steps;
        if n == 0 || n > total {
            return Err(Error::Config(format!(
                "num_inference_steps must be in 1..={total}, got {n}"
            )));
        }
        if !(0.0..=1.0).contains(&self.sigma_scale) {
            return Err(Error::Config(format!(
                "sigma_scale must be in [0, 1], got {}",
                self.sigma_scale
            )));
        }
        if let Some(c) = self.clip_x0 {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_x0 must be positive, got {c}")));
            }
        }
        Ok((1..=n).rev().map(|i| (i * total + n / 2) / n).collect())
    }
}

/// Pairs `(t, t_prev)` for each reverse step; the last pair ends at 0.
pub fn step_pairs(timesteps: &[usize]) -> Vec<(usize, usize)> {
    timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, timesteps.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise<T: Real>(
    x0: &Tensor4<T>,
    t: usize,
    eps: &Tensor4<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor4<T>> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0<T: Real>(
    xt: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor4<T>> {
    let ab = schedule.alpha_bar(t)?;
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::Schedule(format!(
            "alpha_bar({t}) = {ab:e} is too small to recover x0"
        )));
    }
    let b = T::from_f64_lossy((1.0 - ab).sqrt());
    let inv = T::from_f64_lossy(1.0 / ab.sqrt());
    xt.zip_map(eps_hat, |x, e| (x - b * e) * inv)
}

/// Mean of the DDPM reverse transition,
/// `(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn ddpm_mean<T: Real>(
    xt: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor4<T>> {
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let coef = T::from_f64_lossy((1.0 - alpha) / (1.0 - ab).sqrt());
    let inv = T::from_f64_lossy(1.0 / alpha.sqrt());
    xt.zip_map(eps_hat, |x, e| (x - coef * e) * inv)
}

/// σ_t for the η-parameterized DDIM family.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, sigma_scale: f64) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if sigma_scale == 0.0 {
        return Ok(0.0);
    }
    Ok(sigma_scale * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt())
}

/// One DDIM update from `t` to `t_prev`, using cumulative `ᾱ` at both ends.
/// `noise` may be `None` only when σ_t is zero.
pub fn ddim_step<T: Real>(
    xt: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    sigma_scale: f64,
    noise: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    if t_prev >= t {
        return Err(Error::Config(format!("t_prev ({t_prev}) must be < t ({t})")));
    }
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma = ddim_sigma(schedule, t, t_prev, sigma_scale)?;
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(Error::Config(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_prev = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let x0 = predict_x0(xt, eps_hat, t, schedule)?;
    let a = T::from_f64_lossy(ab_prev.sqrt());
    let d = T::from_f64_lossy(dir2.max(0.0).sqrt());
    let mut out = x0.zip_map(eps_hat, |x, e| a * x + d * e)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Config("stochastic DDIM step needs noise".into()))?;
        out.same_shape(noise)?;
        let s = T::from_f64_lossy(sigma);
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += s * *n;
        }
    }
    Ok(out)
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian<T: Real>(shape: [usize; 4], rng: &mut rng::Rng) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

/// Anything that predicts the added noise for `x_t` at step `t`.
pub trait NoisePredictor<T: Real> {
    fn predict_noise(&self, xt: &Tensor4<T>, t: usize) -> Result<Tensor4<T>>;
}

impl<T: Real, F> NoisePredictor<T> for F
where
    F: Fn(&Tensor4<T>, usize) -> Result<Tensor4<T>>,
{
    fn predict_noise(&self, xt: &Tensor4<T>, t: usize) -> Result<Tensor4<T>> {
        self(xt, t)
    }
}

/// Full reverse process from pure Gaussian noise with `num_inference_steps`
/// DDIM updates. Conditioning is whatever the predictor closes over.
/// [`ddim_step`] with x̂₀ clamped to `[-clip, clip]` and ε̂ re-derived from
/// the clamped value, so both terms of the update agree.
pub fn ddim_step_clipped<T: Real>(
    xt: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    sigma_scale: f64,
    noise: Option<&Tensor4<T>>,
    clip: f64,
) -> Result<Tensor4<T>> {
    let ab = schedule.alpha_bar(t)?;
    let x0 = predict_x0(xt, eps_hat, t, schedule)?;
    let c = T::from_f64_lossy(clip);
    let a = T::from_f64_lossy(ab.sqrt());
    let inv_b = T::from_f64_lossy(1.0 / (1.0 - ab).sqrt());
    let eps = xt.zip_map(&x0, |x, x0| (x - a * x0.max(-c).min(c)) * inv_b)?;
    ddim_step(xt, &eps, t, t_prev, schedule, sigma_scale, noise)
}

/// One reverse step as configured by `cfg` (clipped or not).
pub fn sampler_step<T: Real>(
    xt: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    noise: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    match cfg.clip_x0 {
        Some(c) => ddim_step_clipped(xt, eps_hat, t, t_prev, schedule, cfg.sigma_scale, noise, c),
        None => ddim_step(xt, eps_hat, t, t_prev, schedule, cfg.sigma_scale, noise),
    }
}

pub fn sample<T: Real>(
    denoiser: &impl NoisePredictor<T>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    shape: [usize; 4],
) -> Result<Tensor4<T>> {
    let steps = cfg.timesteps(schedule)?;
    let mut rng = rng::stream(cfg.seed, Domain::Sample, 0);
    let mut x = gaussian(shape, &mut rng);
    for (t, t_prev) in step_pairs(&steps) {
        let eps = denoiser.predict_noise(&x, t)?;
        x.same_shape(&eps)?;
        let noise = (cfg.sigma_scale > 0.0).then(|| gaussian(shape, &mut rng));
        x = sampler_step(&x, &eps, t, t_prev, schedule, cfg, noise.as_ref())?;
        if !x.is_finite() {
            return Err(Error::NonFinite("sampler state"));
        }
    }
    Ok(x)
}
