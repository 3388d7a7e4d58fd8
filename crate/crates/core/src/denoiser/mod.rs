//! Pluggable x0 predictors.
//!
//! [`GaussianOracleDenoiser`] is the exact Bayes estimator for Gaussian data
//! and serves as the sampler correctness oracle. [`AffineDenoiser`] is a tiny
//! trainable per-time-bin affine model that stands in for a network.

mod affine;
mod train;

pub use affine::{affine_predict_x0, AffineDenoiser, AffineDenoiserParams, CheckpointMeta};
pub use train::{
    batch_loss, batch_loss_and_grad, channel_contract, prepare_example, train_affine,
    GlobalPipeline, PreparedExample, TrainOptions, TrainReport, TrainSample,
};

use crate::diffusion::Shape;
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::wavelet::SubbandStack;

pub trait Denoiser: Sync {
    fn name(&self) -> String;

    /// `(data_channels, cond_channels)` the model was built for, if fixed.
    fn channel_contract(&self) -> Option<(usize, usize)> {
        None
    }

    fn predict_x0(
        &self,
        x_t: &SubbandStack,
        t: usize,
        cond: Option<&SubbandStack>,
    ) -> Result<SubbandStack>;
}

/// Wraps a closure as a denoiser.
pub struct FnDenoiser<F> {
    name: String,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&SubbandStack, usize, Option<&SubbandStack>) -> Result<SubbandStack> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&SubbandStack, usize, Option<&SubbandStack>) -> Result<SubbandStack> + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict_x0(
        &self,
        x_t: &SubbandStack,
        t: usize,
        cond: Option<&SubbandStack>,
    ) -> Result<SubbandStack> {
        (self.f)(x_t, t, cond)
    }
}

/// `x0 ~ N(mu, sigma0^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataSpec {
    pub mu: SubbandStack,
    pub sigma0: f64,
}

impl GaussianDataSpec {
    pub fn new(mu: SubbandStack, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidParams {
                lo: 0.0,
                hi: sigma0,
            });
        }
        Ok(Self { mu, sigma0 })
    }

    pub fn constant(shape: Shape, mu: f64, sigma0: f64) -> Result<Self> {
        Self::new(
            SubbandStack::filled(shape.channels, shape.dims, mu)?,
            sigma0,
        )
    }
}

/// Posterior mean of `x0` given `x_t = sqrt(ab) x0 + sqrt(1-ab) eps` under a
/// Gaussian prior.
pub fn gaussian_posterior_mean(x_t: f64, alpha_bar: f64, mu: f64, sigma0: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    let gain = alpha_bar.sqrt() * s2 / (alpha_bar * s2 + 1.0 - alpha_bar);
    mu + gain * (x_t - alpha_bar.sqrt() * mu)
}

pub fn oracle_predict_x0(
    x_t: &SubbandStack,
    t: usize,
    sched: &Schedule,
    gauss: &GaussianDataSpec,
) -> Result<SubbandStack> {
    if t == 0 {
        return Err(Error::TOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    x_t.check_same_shape(&gauss.mu)?;
    let ab = sched.alpha_bar(t)?;
    x_t.with_data(
        x_t.data()
            .iter()
            .zip(gauss.mu.data())
            .map(|(&x, &m)| gaussian_posterior_mean(x, ab, m, gauss.sigma0))
            .collect(),
    )
}

pub struct GaussianOracleDenoiser {
    pub gauss: GaussianDataSpec,
    pub sched: Schedule,
}

impl GaussianOracleDenoiser {
    pub fn new(gauss: GaussianDataSpec, sched: Schedule) -> Self {
        Self { gauss, sched }
    }
}

impl Denoiser for GaussianOracleDenoiser {
    fn name(&self) -> String {
        format!("gaussian-oracle(sigma0={})", self.gauss.sigma0)
    }

    fn predict_x0(
        &self,
        x_t: &SubbandStack,
        t: usize,
        _cond: Option<&SubbandStack>,
    ) -> Result<SubbandStack> {
        oracle_predict_x0(x_t, t, &self.sched, &self.gauss)
    }
}
