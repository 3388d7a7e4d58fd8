//! Noise schedules and the Karras sigma grid.
//!
//! Steps are 1-based: `t = 1..=T`. `alpha_bar(0)` is 1 by convention.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(format!("unknown schedule kind {other:?}")),
        }
    }
}

/// Everything needed to rebuild a schedule; this is what manifests record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
}

impl ScheduleConfig {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cosine_offset: COSINE_OFFSET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<Schedule> {
    Schedule::from_config(ScheduleConfig::new(kind, steps))
}

impl Schedule {
    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.steps;
        if t_max == 0 {
            return Err(Error::InvalidT(t_max));
        }
        let beta: Vec<f64> = match config.kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max as f64;
                let (b0, b1) = (config.beta_start * scale, config.beta_end * scale);
                (0..t_max)
                    .map(|i| {
                        let frac = if t_max == 1 {
                            0.0
                        } else {
                            i as f64 / (t_max - 1) as f64
                        };
                        (b0 + frac * (b1 - b0)).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = config.cosine_offset;
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0);
                (1..=t_max)
                    .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidT(t_max));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..t_max)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(Self {
            config,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn kind(&self) -> ScheduleKind {
        self.config.kind
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    /// Cumulative signal retention, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance-exploding noise level equivalent to step `t`: `sqrt((1 - ab) / ab)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(((1.0 - ab) / ab).sqrt())
    }

    /// Step whose sigma is nearest to `sigma` in log space.
    pub fn nearest_step(&self, sigma: f64) -> usize {
        let target = sigma.max(f64::MIN_POSITIVE).ln();
        let mut best = (1, f64::INFINITY);
        for (i, &ab) in self.alpha_bar.iter().enumerate() {
            let d = (((1.0 - ab) / ab).sqrt().ln() - target).abs();
            if d < best.1 {
                best = (i + 1, d);
            }
        }
        best.0
    }

    /// Karras grid spanning this schedule's sigma range.
    pub fn karras_grid(&self, n: usize, rho: f64) -> Result<SigmaGrid> {
        karras_sigmas(n, self.sigma(1)?, self.sigma(self.steps())?, rho)
    }

    /// Short SHA-256 of the schedule's defining parameters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Decreasing noise levels ending in 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    pub sigmas: Vec<f64>,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl SigmaGrid {
    /// Number of nonzero levels.
    pub fn levels(&self) -> usize {
        self.sigmas.len().saturating_sub(1)
    }
}

pub fn karras_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaGrid> {
    if n < 2 {
        return Err(Error::InvalidRange(format!("n = {n} < 2")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "need 0 < sigma_min ({sigma_min}) < sigma_max ({sigma_max})"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidRange(format!("rho = {rho}")));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| (a + (i as f64 / (n - 1) as f64) * (b - a)).powf(rho))
        .collect();
    // pin endpoints against powf round-off
    sigmas[0] = sigma_max;
    sigmas[n - 1] = sigma_min;
    sigmas.push(0.0);
    Ok(SigmaGrid {
        sigmas,
        rho,
        sigma_min,
        sigma_max,
    })
}
