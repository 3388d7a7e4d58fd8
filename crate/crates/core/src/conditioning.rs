//! Conditional sampling pipelines.
//!
//! Local inpainting: `replace` (known region re-noised from the reference
//! scan after every step), `ak` (known region held clean from the voided
//! scan), `akh` (as `ak`, with the unhealthy region voided too).
//!
//! Global synthesis: `default` (known modalities re-noised after every step),
//! `kat` (known modalities held clean, indicator channels appended) and
//! `k3t1` (model input is the clean known modalities plus indicators; only the
//! missing modality is iterated).
//!
//! All inpainting variants finish with an image-space composition so the
//! voxels outside the healthy mask are copied from the input bit for bit.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::denoiser::{Denoiser, GlobalPipeline};
use crate::diffusion::{
    gaussian_vec, q_sample_ab, sample_with, sampler_rng, NoiseLevel, SampleStats, SamplerConfig,
    SamplerKind, SamplerRng, Shape, StepHook,
};
use crate::error::{Error, Result};
use crate::manifest::mask_checksum;
use crate::objectives::GLOBAL_MODALITIES;
use crate::schedule::{Schedule, ScheduleConfig};
use crate::volume::{
    apply_void, compose, voxel_count, Dims, MaskVolume, Modality, NormalizationParams, Volume,
};
use crate::wavelet::{dwt3, dwt3_many, idwt3_single, SubbandStack, SUBBANDS};

/// 2x2x2 max-pooling of a mask to coefficient resolution, as one channel.
pub fn pool_mask(m: &MaskVolume) -> Result<SubbandStack> {
    let d = m.dims();
    if d.iter().any(|x| x % 2 != 0) {
        return Err(Error::OddDimension(d));
    }
    let h = [d[0] / 2, d[1] / 2, d[2] / 2];
    let mut out = vec![0.0; voxel_count(h)];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if m.get(x, y, z) {
                    out[(x / 2) + h[0] * ((y / 2) + h[1] * (z / 2))] = 1.0;
                }
            }
        }
    }
    SubbandStack::new(1, h, out)
}

/// Four constant channels; the missing modality's channel is all ones.
pub fn indicator_channels(missing: usize, dims: Dims) -> Result<SubbandStack> {
    if missing >= GLOBAL_MODALITIES {
        return Err(Error::BadIndex(missing));
    }
    let mut s = SubbandStack::zeros(GLOBAL_MODALITIES, dims)?;
    s.channel_mut(missing).fill(1.0);
    Ok(s)
}

pub enum ConditioningKind<'a> {
    /// One channel per provided mask, in order `m_h`, `m_uh`.
    Masks {
        m_h: &'a MaskVolume,
        m_uh: Option<&'a MaskVolume>,
    },
    Indicator {
        missing: usize,
        dims: Dims,
    },
}

pub fn build_conditioning_channels(kind: ConditioningKind<'_>) -> Result<SubbandStack> {
    match kind {
        ConditioningKind::Masks { m_h, m_uh } => {
            let h = pool_mask(m_h)?;
            match m_uh {
                Some(u) => {
                    u.check_same_dims(m_h.dims())?;
                    SubbandStack::concat(&[&h, &pool_mask(u)?])
                }
                None => Ok(h),
            }
        }
        ConditioningKind::Indicator { missing, dims } => indicator_channels(missing, dims),
    }
}

/// `k ⊙ x + (1 - k) ⊙ known` in place, with `k` one channel broadcast over channel groups.
fn reimpose(x: &mut SubbandStack, k: &SubbandStack, known: &[f64]) {
    let n = k.voxels();
    let kd = k.data();
    for (e, (v, &kn)) in x.data_mut().iter_mut().zip(known).enumerate() {
        let m = kd[e % n];
        if m == 0.0 {
            *v = kn;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintVariant {
    Replace,
    Ak,
    Akh,
}

impl std::str::FromStr for InpaintVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replace" => Ok(InpaintVariant::Replace),
            "ak" => Ok(InpaintVariant::Ak),
            "akh" => Ok(InpaintVariant::Akh),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

pub const DEFAULT_VOID_FILL: f64 = 0.0;

pub struct InpaintRequest {
    /// Full reference scan for `replace`, voided scan for `ak`/`akh`; normalized.
    pub scan: Volume,
    pub m_h: MaskVolume,
    pub m_uh: Option<MaskVolume>,
    pub variant: InpaintVariant,
    pub sampler: SamplerConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Feed `[m_h, m_uh]` channels to a `replace` denoiser (models trained with `DC`).
    pub mask_conditioning: bool,
    pub void_fill: f64,
}

impl InpaintRequest {
    pub fn new(
        scan: Volume,
        m_h: MaskVolume,
        variant: InpaintVariant,
        schedule: Schedule,
        seed: u64,
    ) -> Self {
        Self {
            scan,
            m_h,
            m_uh: None,
            variant,
            sampler: SamplerConfig::Ddpm,
            schedule,
            seed,
            mask_conditioning: false,
            void_fill: DEFAULT_VOID_FILL,
        }
    }

    /// Strict request validation: rejects an empty region to inpaint.
    pub fn validate(&self) -> Result<()> {
        self.m_h.check_same_dims(self.scan.dims())?;
        if let Some(u) = &self.m_uh {
            u.check_same_dims(self.scan.dims())?;
        }
        if self.m_h.is_empty_mask() {
            return Err(Error::EmptyMask);
        }
        if self.variant == InpaintVariant::Akh && self.m_uh.is_none() {
            return Err(Error::MissingUnhealthyMask);
        }
        Ok(())
    }
}

/// What a pipeline run did, for manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub pipeline: String,
    pub sampler: SamplerKind,
    pub schedule: ScheduleConfig,
    pub sigma_grid: Option<Vec<f64>>,
    pub seed: u64,
    pub denoiser: String,
    pub mask_checksums: BTreeMap<String, String>,
    pub timings: SampleStats,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub volume: Volume,
    pub record: RunRecord,
}

fn record(
    pipeline: String,
    sampler: &SamplerConfig,
    sched: &Schedule,
    seed: u64,
    denoiser: &dyn Denoiser,
    masks: BTreeMap<String, String>,
    timings: SampleStats,
) -> RunRecord {
    RunRecord {
        pipeline,
        sampler: sampler.kind(),
        schedule: *sched.config(),
        sigma_grid: match sampler {
            SamplerConfig::Ddpm => None,
            SamplerConfig::Dpmpp2m(g) => Some(g.sigmas.clone()),
        },
        seed,
        denoiser: denoiser.name(),
        mask_checksums: masks,
        timings,
    }
}

fn mask_sums(m_h: &MaskVolume, m_uh: Option<&MaskVolume>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("healthy".into(), mask_checksum(m_h));
    if let Some(u) = m_uh {
        out.insert("unhealthy".into(), mask_checksum(u));
    }
    out
}

fn check_contract(denoiser: &dyn Denoiser, data: usize, cond: usize) -> Result<()> {
    match denoiser.channel_contract() {
        Some((d, c)) if (d, c) != (data, cond) => Err(Error::ChannelContractMismatch(format!(
            "pipeline needs ({data} data, {cond} cond) channels, denoiser has ({d}, {c})"
        ))),
        _ => Ok(()),
    }
}

/// Generated image inside `m_h` (clipped to [-1, 1]), `scan` elsewhere.
fn finish_inpaint(x0: &SubbandStack, scan: &Volume, m_h: &MaskVolume) -> Result<Volume> {
    let generated = idwt3_single(x0)?.map(|v| v.clamp(-1.0, 1.0))?;
    compose(&generated, scan, m_h)
}

struct ReplaceHook<'a> {
    known: &'a SubbandStack,
    roi: &'a SubbandStack,
}

impl StepHook for ReplaceHook<'_> {
    fn on_step(
        &mut self,
        x: &mut SubbandStack,
        level: NoiseLevel,
        rng: &mut SamplerRng,
    ) -> Result<()> {
        let eps = gaussian_vec(rng, self.known.len());
        let noisy = q_sample_ab(self.known, level.alpha_bar, &eps)?;
        reimpose(x, self.roi, noisy.data());
        Ok(())
    }
}

/// Inpainting that re-noises the known region of a full reference scan to the
/// current level after every reverse step.
pub fn repaint_inpaint(denoiser: &dyn Denoiser, req: &InpaintRequest) -> Result<PipelineOutput> {
    req.m_h.check_same_dims(req.scan.dims())?;
    let masks = mask_sums(&req.m_h, req.m_uh.as_ref());
    if req.m_h.is_empty_mask() {
        return Ok(PipelineOutput {
            volume: req.scan.clone(),
            record: record(
                "replace".into(),
                &req.sampler,
                &req.schedule,
                req.seed,
                denoiser,
                masks,
                SampleStats::default(),
            ),
        });
    }
    let known = dwt3(&req.scan)?;
    let roi = pool_mask(&req.m_h)?;
    let cond = if req.mask_conditioning {
        let zeros;
        let m_uh = match &req.m_uh {
            Some(u) => u,
            None => {
                zeros = MaskVolume::zeros(req.scan.dims())?;
                &zeros
            }
        };
        Some(build_conditioning_channels(ConditioningKind::Masks {
            m_h: &req.m_h,
            m_uh: Some(m_uh),
        })?)
    } else {
        None
    };
    check_contract(
        denoiser,
        SUBBANDS,
        cond.as_ref().map_or(0, |c| c.channels()),
    )?;
    let mut rng = sampler_rng(req.seed);
    let mut hook = ReplaceHook {
        known: &known,
        roi: &roi,
    };
    let (x0, stats) = sample_with(
        &req.sampler,
        denoiser,
        Shape::of(&known),
        &req.schedule,
        cond.as_ref(),
        &mut rng,
        &mut hook,
    )?;
    Ok(PipelineOutput {
        volume: finish_inpaint(&x0, &req.scan, &req.m_h)?,
        record: record(
            "replace".into(),
            &req.sampler,
            &req.schedule,
            req.seed,
            denoiser,
            masks,
            stats,
        ),
    })
}

struct KnownHook<'a> {
    known: &'a SubbandStack,
    roi: &'a SubbandStack,
}

impl StepHook for KnownHook<'_> {
    fn on_init(&mut self, x: &mut SubbandStack, _: NoiseLevel, _: &mut SamplerRng) -> Result<()> {
        reimpose(x, self.roi, self.known.data());
        Ok(())
    }

    fn on_step(&mut self, x: &mut SubbandStack, _: NoiseLevel, _: &mut SamplerRng) -> Result<()> {
        reimpose(x, self.roi, self.known.data());
        Ok(())
    }
}

/// Inpainting from a voided scan whose known region stays noise-free
/// throughout sampling (`ak`), optionally with the unhealthy region voided
/// as well (`akh`).
pub fn known_region_inpaint(
    denoiser: &dyn Denoiser,
    req: &InpaintRequest,
) -> Result<PipelineOutput> {
    req.m_h.check_same_dims(req.scan.dims())?;
    let name = match req.variant {
        InpaintVariant::Akh => "akh",
        _ => "ak",
    };
    let voided = match req.variant {
        InpaintVariant::Akh => {
            let u = req.m_uh.as_ref().ok_or(Error::MissingUnhealthyMask)?;
            apply_void(&req.scan, u, req.void_fill)?
        }
        _ => req.scan.clone(),
    };
    let masks = mask_sums(&req.m_h, req.m_uh.as_ref());
    if req.m_h.is_empty_mask() {
        return Ok(PipelineOutput {
            volume: req.scan.clone(),
            record: record(
                name.into(),
                &req.sampler,
                &req.schedule,
                req.seed,
                denoiser,
                masks,
                SampleStats::default(),
            ),
        });
    }
    let known = dwt3(&voided)?;
    let roi = pool_mask(&req.m_h)?;
    check_contract(denoiser, SUBBANDS, 1)?;
    let mut rng = sampler_rng(req.seed);
    let mut hook = KnownHook {
        known: &known,
        roi: &roi,
    };
    let (x0, stats) = sample_with(
        &req.sampler,
        denoiser,
        Shape::of(&known),
        &req.schedule,
        Some(&roi),
        &mut rng,
        &mut hook,
    )?;
    Ok(PipelineOutput {
        // composition against the request's scan: for akh the unhealthy region
        // outside m_h is passed through untouched
        volume: finish_inpaint(&x0, &req.scan, &req.m_h)?,
        record: record(
            name.into(),
            &req.sampler,
            &req.schedule,
            req.seed,
            denoiser,
            masks,
            stats,
        ),
    })
}

/// Dispatches on the request's variant.
pub fn inpaint(denoiser: &dyn Denoiser, req: &InpaintRequest) -> Result<PipelineOutput> {
    match req.variant {
        InpaintVariant::Replace => repaint_inpaint(denoiser, req),
        InpaintVariant::Ak | InpaintVariant::Akh => known_region_inpaint(denoiser, req),
    }
}

pub struct SynthRequest {
    /// Normalized modalities in `(t1n, t1c, t2w, flair)` order; exactly one `None`.
    pub modalities: [Option<Volume>; 4],
    pub pipeline: GlobalPipeline,
    pub sampler: SamplerConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Maps the generated modality back to source intensities when given.
    pub output_norm: Option<NormalizationParams>,
}

impl SynthRequest {
    pub fn missing(&self) -> Result<Modality> {
        let missing: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| self.modalities[m.index()].is_none())
            .collect();
        match missing.as_slice() {
            [m] => Ok(*m),
            other => Err(Error::WrongMissingCount(other.len())),
        }
    }
}

/// Known groups re-noised (`default`) or held clean (`kat`).
struct GlobalHook<'a> {
    known: &'a SubbandStack,
    missing: usize,
    renoise: bool,
}

impl GlobalHook<'_> {
    fn apply(&self, x: &mut SubbandStack, level: NoiseLevel, rng: &mut SamplerRng) -> Result<()> {
        for g in (0..GLOBAL_MODALITIES).filter(|&g| g != self.missing) {
            let group = self.known.select(g * SUBBANDS, SUBBANDS)?;
            let group = if self.renoise {
                let eps = gaussian_vec(rng, group.len());
                q_sample_ab(&group, level.alpha_bar, &eps)?
            } else {
                group
            };
            x.assign(g * SUBBANDS, &group)?;
        }
        Ok(())
    }
}

impl StepHook for GlobalHook<'_> {
    fn on_init(
        &mut self,
        x: &mut SubbandStack,
        level: NoiseLevel,
        rng: &mut SamplerRng,
    ) -> Result<()> {
        self.apply(x, level, rng)
    }

    fn on_step(
        &mut self,
        x: &mut SubbandStack,
        level: NoiseLevel,
        rng: &mut SamplerRng,
    ) -> Result<()> {
        self.apply(x, level, rng)
    }
}

/// Generates the one missing modality from the other three.
pub fn synth_missing(denoiser: &dyn Denoiser, req: &SynthRequest) -> Result<PipelineOutput> {
    let missing = req.missing()?;
    let mi = missing.index();
    let template = req
        .modalities
        .iter()
        .flatten()
        .next()
        .ok_or(Error::WrongMissingCount(GLOBAL_MODALITIES))?;
    let zeros = Volume::zeros(template.dims())?.with_geometry_of(template);
    let vols: Vec<&Volume> = req
        .modalities
        .iter()
        .map(|m| m.as_ref().unwrap_or(&zeros))
        .collect();
    for v in &vols {
        v.check_same_dims(template.dims())?;
    }
    let all = dwt3_many(&vols)?;
    let half = all.dims();
    let indicator = indicator_channels(mi, half)?;
    let mut rng = sampler_rng(req.seed);

    let (generated, stats) = match req.pipeline {
        GlobalPipeline::Default | GlobalPipeline::Kat => {
            let kat = req.pipeline == GlobalPipeline::Kat;
            let cond = kat.then_some(&indicator);
            check_contract(denoiser, all.channels(), cond.map_or(0, |c| c.channels()))?;
            let mut hook = GlobalHook {
                known: &all,
                missing: mi,
                renoise: !kat,
            };
            let (x0, stats) = sample_with(
                &req.sampler,
                denoiser,
                Shape::of(&all),
                &req.schedule,
                cond,
                &mut rng,
                &mut hook,
            )?;
            (x0.select(mi * SUBBANDS, SUBBANDS)?, stats)
        }
        GlobalPipeline::K3t1 => {
            let known: Vec<SubbandStack> = (0..GLOBAL_MODALITIES)
                .filter(|&g| g != mi)
                .map(|g| all.select(g * SUBBANDS, SUBBANDS))
                .collect::<Result<_>>()?;
            let mut parts: Vec<&SubbandStack> = known.iter().collect();
            parts.push(&indicator);
            let cond = SubbandStack::concat(&parts)?;
            check_contract(denoiser, SUBBANDS, cond.channels())?;
            sample_with(
                &req.sampler,
                denoiser,
                Shape::new(SUBBANDS, half),
                &req.schedule,
                Some(&cond),
                &mut rng,
                &mut crate::diffusion::NoHook,
            )?
        }
    };
    let mut out = idwt3_single(&generated)?.map(|v| v.clamp(-1.0, 1.0))?;
    if let Some(p) = &req.output_norm {
        out = crate::volume::denormalize_volume(&out, p)?;
    }
    let mut masks = BTreeMap::new();
    masks.insert("missing".into(), missing.name().to_string());
    Ok(PipelineOutput {
        volume: out,
        record: record(
            req.pipeline.name().into(),
            &req.sampler,
            &req.schedule,
            req.seed,
            denoiser,
            masks,
            stats,
        ),
    })
}
