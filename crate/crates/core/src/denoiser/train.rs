use rand::Rng;
use serde::{Deserialize, Serialize};

use super::affine::{affine_predict_x0, AffineDenoiserParams};
use crate::conditioning::indicator_channels;
use crate::diffusion::{gaussian_vec, q_sample_ab, sampler_rng, SamplerRng};
use crate::error::{Error, Result};
use crate::objectives::{
    objective_grad, objective_loss, LossWeights, Objective, GLOBAL_MODALITIES,
};
use crate::schedule::Schedule;
use crate::wavelet::{SubbandStack, SUBBANDS};

/// One training record in the wavelet domain. Masks are single-channel and
/// already pooled to coefficient resolution.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: SubbandStack,
    pub m_h: Option<SubbandStack>,
    pub m_uh: Option<SubbandStack>,
}

/// How the four-modality objective builds its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPipeline {
    /// All four modalities noised, no indicator channels.
    #[default]
    Default,
    /// Only the missing modality noised; indicator channels appended.
    Kat,
    /// Model sees the three clean known modalities plus indicators and predicts only the missing one.
    K3t1,
}

impl GlobalPipeline {
    pub fn name(self) -> &'static str {
        match self {
            GlobalPipeline::Default => "default",
            GlobalPipeline::Kat => "kat",
            GlobalPipeline::K3t1 => "k3t1",
        }
    }
}

impl std::str::FromStr for GlobalPipeline {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "default" => Ok(GlobalPipeline::Default),
            "kat" => Ok(GlobalPipeline::Kat),
            "k3t1" => Ok(GlobalPipeline::K3t1),
            other => Err(format!("unknown pipeline {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub bins: usize,
    pub pipeline: GlobalPipeline,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            iters: 1000,
            batch: 8,
            seed: 0,
            bins: 10,
            pipeline: GlobalPipeline::Default,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: AffineDenoiserParams,
    /// Mean batch loss at every iteration, before the update.
    pub losses: Vec<f64>,
}

/// A fully materialized training input: what the model sees and what it is scored against.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub x_t: SubbandStack,
    pub t: usize,
    pub cond: Option<SubbandStack>,
    pub target: SubbandStack,
    pub m_h: Option<SubbandStack>,
    pub m_uh: Option<SubbandStack>,
    pub loss: Objective,
}

/// `(data_channels, cond_channels)` of the model an objective trains.
pub fn channel_contract(
    objective: Objective,
    pipeline: GlobalPipeline,
    sample_channels: usize,
) -> Result<(usize, usize)> {
    Ok(match objective {
        Objective::D => (sample_channels, 0),
        Objective::DC => (sample_channels, 2),
        Objective::AK | Objective::AKH => (sample_channels, 1),
        Objective::Dg => {
            if sample_channels != GLOBAL_MODALITIES * SUBBANDS {
                return Err(Error::WrongModalityCount(sample_channels / SUBBANDS));
            }
            match pipeline {
                GlobalPipeline::Default => (sample_channels, 0),
                GlobalPipeline::Kat => (sample_channels, GLOBAL_MODALITIES),
                GlobalPipeline::K3t1 => (
                    SUBBANDS,
                    (GLOBAL_MODALITIES - 1) * SUBBANDS + GLOBAL_MODALITIES,
                ),
            }
        }
    })
}

fn require(m: &Option<SubbandStack>, objective: Objective) -> Result<&SubbandStack> {
    m.as_ref().ok_or(Error::MissingMask(objective.name()))
}

/// `k ⊙ a + (1 - k) ⊙ b` with a single-channel `k` broadcast over channels.
fn blend(k: &SubbandStack, a: &SubbandStack, b: &SubbandStack) -> Result<SubbandStack> {
    a.check_same_shape(b)?;
    if k.channels() != 1 || k.dims() != a.dims() {
        return Err(Error::ShapeMismatch(
            "blend mask must be one channel at data resolution".into(),
        ));
    }
    let n = a.voxels();
    a.with_data(
        a.data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(e, (&x, &y))| {
                let m = k.data()[e % n];
                m * x + (1.0 - m) * y
            })
            .collect(),
    )
}

/// Builds one training input at step `t`, drawing any randomness from `rng`.
///
/// Draw order is fixed: the missing-modality index (global pipelines that
/// need one), then the forward-process noise.
pub fn prepare_example(
    sample: &TrainSample,
    objective: Objective,
    pipeline: GlobalPipeline,
    sched: &Schedule,
    t: usize,
    rng: &mut SamplerRng,
) -> Result<PreparedExample> {
    let ab = sched.alpha_bar(t)?;
    let x0 = &sample.x0;
    let noised = |x: &SubbandStack, rng: &mut SamplerRng| -> Result<SubbandStack> {
        let eps = gaussian_vec(rng, x.len());
        q_sample_ab(x, ab, &eps)
    };
    let mut ex = PreparedExample {
        x_t: x0.clone(),
        t,
        cond: None,
        target: x0.clone(),
        m_h: sample.m_h.clone(),
        m_uh: sample.m_uh.clone(),
        loss: objective,
    };
    match objective {
        Objective::D => ex.x_t = noised(x0, rng)?,
        Objective::DC => {
            let (h, u) = (
                require(&sample.m_h, objective)?,
                require(&sample.m_uh, objective)?,
            );
            ex.x_t = noised(x0, rng)?;
            ex.cond = Some(SubbandStack::concat(&[h, u])?);
        }
        Objective::AK => {
            let h = require(&sample.m_h, objective)?;
            ex.x_t = blend(h, &noised(x0, rng)?, x0)?;
            ex.cond = Some(h.clone());
        }
        Objective::AKH => {
            let (h, u) = (
                require(&sample.m_h, objective)?,
                require(&sample.m_uh, objective)?,
            );
            let zeros = SubbandStack::zeros(x0.channels(), x0.dims())?;
            // the model never sees unhealthy tissue
            let known = blend(u, &zeros, x0)?;
            ex.x_t = blend(h, &noised(x0, rng)?, &known)?;
            ex.cond = Some(h.clone());
        }
        Objective::Dg => {
            if x0.channels() != GLOBAL_MODALITIES * SUBBANDS {
                return Err(Error::WrongModalityCount(x0.channels() / SUBBANDS));
            }
            match pipeline {
                GlobalPipeline::Default => ex.x_t = noised(x0, rng)?,
                GlobalPipeline::Kat => {
                    let missing = rng.random_range(0..GLOBAL_MODALITIES);
                    let group = x0.select(missing * SUBBANDS, SUBBANDS)?;
                    let mut x_t = x0.clone();
                    x_t.assign(missing * SUBBANDS, &noised(&group, rng)?)?;
                    ex.x_t = x_t;
                    ex.cond = Some(indicator_channels(missing, x0.dims())?);
                }
                GlobalPipeline::K3t1 => {
                    let missing = rng.random_range(0..GLOBAL_MODALITIES);
                    let group = x0.select(missing * SUBBANDS, SUBBANDS)?;
                    ex.x_t = noised(&group, rng)?;
                    ex.target = group;
                    ex.loss = Objective::D;
                    let known: Vec<SubbandStack> = (0..GLOBAL_MODALITIES)
                        .filter(|&m| m != missing)
                        .map(|m| x0.select(m * SUBBANDS, SUBBANDS))
                        .collect::<Result<_>>()?;
                    let ind = indicator_channels(missing, x0.dims())?;
                    let mut parts: Vec<&SubbandStack> = known.iter().collect();
                    parts.push(&ind);
                    ex.cond = Some(SubbandStack::concat(&parts)?);
                }
            }
        }
    }
    Ok(ex)
}

fn example_loss(
    params: &AffineDenoiserParams,
    ex: &PreparedExample,
    w: LossWeights,
) -> Result<(f64, SubbandStack)> {
    let pred = affine_predict_x0(params, &ex.x_t, ex.t, ex.cond.as_ref())?;
    let l = objective_loss(
        ex.loss,
        &pred,
        &ex.target,
        ex.m_h.as_ref(),
        ex.m_uh.as_ref(),
        w,
    )?;
    Ok((l, pred))
}

/// Mean loss over a batch.
pub fn batch_loss(
    params: &AffineDenoiserParams,
    batch: &[PreparedExample],
    w: LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(params, ex, w)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and its gradient, laid out like [`AffineDenoiserParams::flatten`].
pub fn batch_loss_and_grad(
    params: &AffineDenoiserParams,
    batch: &[PreparedExample],
    w: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c_n = params.data_channels;
    let k_n = params.cond_channels;
    let mut d_gain = vec![0.0; params.gain.len()];
    let mut d_bias = vec![0.0; params.bias.len()];
    let mut d_cond = vec![0.0; params.cond_gain.len()];
    let mut total = 0.0;
    for ex in batch {
        let (l, pred) = example_loss(params, ex, w)?;
        total += l;
        let g = objective_grad(
            ex.loss,
            &pred,
            &ex.target,
            ex.m_h.as_ref(),
            ex.m_uh.as_ref(),
            w,
        )?;
        let b = params.bin(ex.t)?;
        let n = ex.x_t.voxels();
        for c in 0..c_n {
            let gc = &g[c * n..(c + 1) * n];
            let xc = ex.x_t.channel(c);
            d_gain[b * c_n + c] += gc.iter().zip(xc).map(|(a, x)| a * x).sum::<f64>();
            d_bias[b * c_n + c] += gc.iter().sum::<f64>();
            if let Some(cond) = &ex.cond {
                for k in 0..k_n {
                    d_cond[params.cond_gain_index(b, c, k)] += gc
                        .iter()
                        .zip(cond.channel(k))
                        .map(|(a, m)| a * m)
                        .sum::<f64>();
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grad = Vec::with_capacity(params.param_count());
    grad.extend(d_gain.iter().map(|v| v * inv));
    grad.extend(d_bias.iter().map(|v| v * inv));
    grad.extend(d_cond.iter().map(|v| v * inv));
    Ok((total * inv, grad))
}

/// Stochastic gradient descent on the chosen objective.
///
/// Each iteration draws `batch` examples; for each, a sample index and a step
/// `t ~ U{1..T}`, then the pipeline-specific inputs via [`prepare_example`].
pub fn train_affine(
    dataset: &[TrainSample],
    objective: Objective,
    w: LossWeights,
    sched: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    if !(opts.lr > 0.0) || opts.batch == 0 {
        return Err(Error::InvalidParams {
            lo: 0.0,
            hi: opts.lr,
        });
    }
    let (c, k) = channel_contract(objective, opts.pipeline, first.x0.channels())?;
    let mut params = AffineDenoiserParams::identity(opts.bins, sched.steps(), c, k)?;
    let mut rng = sampler_rng(opts.seed);
    let mut losses = Vec::with_capacity(opts.iters);
    for iter in 0..opts.iters {
        let mut batch = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let i = rng.random_range(0..dataset.len());
            let t = rng.random_range(1..=sched.steps());
            batch.push(prepare_example(
                &dataset[i],
                objective,
                opts.pipeline,
                sched,
                t,
                &mut rng,
            )?);
        }
        let (loss, grad) = batch_loss_and_grad(&params, &batch, w)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!("loss={loss}, lr={}", opts.lr),
            });
        }
        losses.push(loss);
        let mut flat = params.flatten();
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= opts.lr * g;
        }
        params.unflatten(&flat)?;
    }
    Ok(TrainReport { params, losses })
}
