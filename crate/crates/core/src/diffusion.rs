//! Forward noising, the x0-parameterized reverse posterior, and two samplers:
//! ancestral DDPM and the second-order multistep solver on a Karras sigma grid.
//!
//! Both samplers report every intermediate state to a [`StepHook`] in
//! variance-preserving scale, which is how the conditioning pipelines
//! re-impose known regions.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::{Schedule, SigmaGrid};
use crate::volume::Dims;
use crate::wavelet::SubbandStack;

pub type SamplerRng = ChaCha8Rng;

pub fn sampler_rng(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut SamplerRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Channel count and spatial dims of a sampler state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub channels: usize,
    pub dims: Dims,
}

impl Shape {
    pub fn new(channels: usize, dims: Dims) -> Self {
        Self { channels, dims }
    }

    pub fn of(s: &SubbandStack) -> Self {
        Self::new(s.channels(), s.dims())
    }

    pub fn gaussian(&self, rng: &mut SamplerRng) -> Result<SubbandStack> {
        let n = self.channels * crate::volume::voxel_count(self.dims);
        SubbandStack::new(self.channels, self.dims, gaussian_vec(rng, n))
    }
}

/// Noise level of a state: the discrete step used to condition the
/// denoiser and the exact signal retention `alpha_bar` the state sits at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub const CLEAN: NoiseLevel = NoiseLevel {
        t: 0,
        alpha_bar: 1.0,
    };
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit `ab`.
pub fn q_sample_ab(x0: &SubbandStack, alpha_bar: f64, eps: &[f64]) -> Result<SubbandStack> {
    if eps.len() != x0.len() {
        return Err(Error::ShapeMismatch(format!(
            "eps has {} elements, x0 has {}",
            eps.len(),
            x0.len()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.with_data(
        x0.data()
            .iter()
            .zip(eps)
            .map(|(x, e)| a * x + b * e)
            .collect(),
    )
}

/// Forward process sample at step `t` (`t = 0` returns `x0`).
pub fn q_sample(
    x0: &SubbandStack,
    t: usize,
    eps: &SubbandStack,
    sched: &Schedule,
) -> Result<SubbandStack> {
    x0.check_same_shape(eps)?;
    q_sample_ab(x0, sched.alpha_bar(t)?, eps.data())
}

/// `(w_x0, w_xt, variance)` of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_coefficients(sched: &Schedule, t: usize) -> Result<(f64, f64, f64)> {
    let ab_t = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::TOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let ab_prev = sched.alpha_bar(t - 1)?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let w_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let w_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let var = if t == 1 { 0.0 } else { sched.posterior_var(t)? };
    Ok((w_x0, w_xt, var))
}

/// One reverse step given an estimate of `x0`. The noise term vanishes at `t = 1`.
pub fn posterior_step(
    x_t: &SubbandStack,
    x0_hat: &SubbandStack,
    t: usize,
    sched: &Schedule,
    noise: &SubbandStack,
) -> Result<SubbandStack> {
    x_t.check_same_shape(x0_hat)?;
    x_t.check_same_shape(noise)?;
    let (w0, wt, var) = posterior_coefficients(sched, t)?;
    let sd = var.sqrt();
    x_t.with_data(
        x0_hat
            .data()
            .iter()
            .zip(x_t.data())
            .zip(noise.data())
            .map(|((&x0, &xt), &z)| w0 * x0 + wt * xt + sd * z)
            .collect(),
    )
}

/// Per-step callback used to impose conditioning on the sampler state.
pub trait StepHook {
    /// Called once on the initial state.
    fn on_init(
        &mut self,
        _x: &mut SubbandStack,
        _level: NoiseLevel,
        _rng: &mut SamplerRng,
    ) -> Result<()> {
        Ok(())
    }

    /// Called after every reverse step with the new state.
    fn on_step(
        &mut self,
        x: &mut SubbandStack,
        level: NoiseLevel,
        rng: &mut SamplerRng,
    ) -> Result<()>;
}

pub struct NoHook;

impl StepHook for NoHook {
    fn on_step(&mut self, _: &mut SubbandStack, _: NoiseLevel, _: &mut SamplerRng) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Dpmpp2m,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "dpmpp2m" => Ok(SamplerKind::Dpmpp2m),
            other => Err(format!("unknown sampler {other:?}")),
        }
    }
}

/// Sampler choice plus its step grid.
#[derive(Debug, Clone)]
pub enum SamplerConfig {
    Ddpm,
    Dpmpp2m(SigmaGrid),
}

impl SamplerConfig {
    pub fn kind(&self) -> SamplerKind {
        match self {
            SamplerConfig::Ddpm => SamplerKind::Ddpm,
            SamplerConfig::Dpmpp2m(_) => SamplerKind::Dpmpp2m,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SampleStats {
    pub steps: usize,
    pub denoiser_calls: usize,
    pub total_secs: f64,
    pub mean_step_secs: f64,
}

impl SampleStats {
    fn finish(steps: usize, start: Instant) -> Self {
        let total = start.elapsed().as_secs_f64();
        Self {
            steps,
            denoiser_calls: steps,
            total_secs: total,
            mean_step_secs: if steps > 0 { total / steps as f64 } else { 0.0 },
        }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 0`.
pub fn ddpm_sample(
    denoiser: &dyn Denoiser,
    shape: Shape,
    sched: &Schedule,
    cond: Option<&SubbandStack>,
    seed: u64,
) -> Result<SubbandStack> {
    let mut rng = sampler_rng(seed);
    Ok(ddpm_sample_with(denoiser, shape, sched, cond, &mut rng, &mut NoHook)?.0)
}

pub fn ddpm_sample_with(
    denoiser: &dyn Denoiser,
    shape: Shape,
    sched: &Schedule,
    cond: Option<&SubbandStack>,
    rng: &mut SamplerRng,
    hook: &mut dyn StepHook,
) -> Result<(SubbandStack, SampleStats)> {
    let start = Instant::now();
    let t_max = sched.steps();
    let mut x = shape.gaussian(rng)?;
    hook.on_init(
        &mut x,
        NoiseLevel {
            t: t_max,
            alpha_bar: sched.alpha_bar(t_max)?,
        },
        rng,
    )?;
    for t in (1..=t_max).rev() {
        let x0_hat = denoiser.predict_x0(&x, t, cond)?;
        x.check_same_shape(&x0_hat)?;
        let noise = if t > 1 {
            shape.gaussian(rng)?
        } else {
            SubbandStack::zeros(shape.channels, shape.dims)?
        };
        x = posterior_step(&x, &x0_hat, t, sched, &noise)?;
        hook.on_step(
            &mut x,
            NoiseLevel {
                t: t - 1,
                alpha_bar: sched.alpha_bar(t - 1)?,
            },
            rng,
        )?;
    }
    Ok((x, SampleStats::finish(t_max, start)))
}

/// Second-order multistep sampling on a Karras grid. The denoiser sees the
/// variance-preserving state `x / sqrt(1 + sigma^2)` at the nearest discrete step.
pub fn dpmpp2m_sample(
    denoiser: &dyn Denoiser,
    shape: Shape,
    sched: &Schedule,
    grid: &SigmaGrid,
    cond: Option<&SubbandStack>,
    seed: u64,
) -> Result<SubbandStack> {
    let mut rng = sampler_rng(seed);
    Ok(dpmpp2m_sample_with(denoiser, shape, sched, grid, cond, &mut rng, &mut NoHook)?.0)
}

fn level_for_sigma(sched: &Schedule, sigma: f64) -> NoiseLevel {
    if sigma == 0.0 {
        NoiseLevel::CLEAN
    } else {
        NoiseLevel {
            t: sched.nearest_step(sigma),
            alpha_bar: 1.0 / (1.0 + sigma * sigma),
        }
    }
}

fn scale(x: &mut SubbandStack, k: f64) {
    for v in x.data_mut() {
        *v *= k;
    }
}

pub fn dpmpp2m_sample_with(
    denoiser: &dyn Denoiser,
    shape: Shape,
    sched: &Schedule,
    grid: &SigmaGrid,
    cond: Option<&SubbandStack>,
    rng: &mut SamplerRng,
    hook: &mut dyn StepHook,
) -> Result<(SubbandStack, SampleStats)> {
    let sig = &grid.sigmas;
    if sig.len() < 3 || sig.last() != Some(&0.0) || sig[..sig.len() - 1].iter().any(|&s| !(s > 0.0))
    {
        return Err(Error::GridTooShort);
    }
    let start = Instant::now();
    let n = sig.len() - 1;

    // the hook works in VP scale; the solver state `x` is in VE scale
    let mut x_vp = shape.gaussian(rng)?;
    let s0 = sig[0];
    scale(&mut x_vp, s0 / (1.0 + s0 * s0).sqrt());
    hook.on_init(&mut x_vp, level_for_sigma(sched, s0), rng)?;
    let mut x = x_vp;
    scale(&mut x, (1.0 + s0 * s0).sqrt());

    let mut old_denoised: Option<SubbandStack> = None;
    for i in 0..n {
        let (s, s_next) = (sig[i], sig[i + 1]);
        let level = level_for_sigma(sched, s);
        let mut input = x.clone();
        scale(&mut input, level.alpha_bar.sqrt());
        let denoised = denoiser.predict_x0(&input, level.t, cond)?;
        x.check_same_shape(&denoised)?;

        if s_next == 0.0 {
            x = denoised.clone();
        } else {
            let h = s.ln() - s_next.ln();
            let ratio = s_next / s;
            let k = -(-h).exp_m1();
            let d = match (&old_denoised, i) {
                (Some(prev), i) if i > 0 => {
                    let h_last = sig[i - 1].ln() - s.ln();
                    let r = h_last / h;
                    let (c1, c2) = (1.0 + 1.0 / (2.0 * r), -1.0 / (2.0 * r));
                    denoised.with_data(
                        denoised
                            .data()
                            .iter()
                            .zip(prev.data())
                            .map(|(a, b)| c1 * a + c2 * b)
                            .collect(),
                    )?
                }
                _ => denoised.clone(),
            };
            x = x.with_data(
                x.data()
                    .iter()
                    .zip(d.data())
                    .map(|(xv, dv)| ratio * xv + k * dv)
                    .collect(),
            )?;
        }
        old_denoised = Some(denoised);

        let next_level = level_for_sigma(sched, s_next);
        let vp = next_level.alpha_bar.sqrt();
        scale(&mut x, vp);
        hook.on_step(&mut x, next_level, rng)?;
        scale(&mut x, 1.0 / vp);
    }
    Ok((x, SampleStats::finish(n, start)))
}

/// Dispatches on the sampler configuration.
pub fn sample_with(
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
    shape: Shape,
    sched: &Schedule,
    cond: Option<&SubbandStack>,
    rng: &mut SamplerRng,
    hook: &mut dyn StepHook,
) -> Result<(SubbandStack, SampleStats)> {
    match config {
        SamplerConfig::Ddpm => ddpm_sample_with(denoiser, shape, sched, cond, rng, hook),
        SamplerConfig::Dpmpp2m(grid) => {
            dpmpp2m_sample_with(denoiser, shape, sched, grid, cond, rng, hook)
        }
    }
}
