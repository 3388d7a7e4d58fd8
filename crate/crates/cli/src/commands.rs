use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use wdm3d::conditioning::{
    inpaint as run_inpaint, pool_mask, synth_missing, InpaintRequest, InpaintVariant, SynthRequest,
};
use wdm3d::denoiser::{
    train_affine, AffineDenoiser, Denoiser, GaussianDataSpec, GaussianOracleDenoiser,
    GlobalPipeline, TrainOptions, TrainSample,
};
use wdm3d::diffusion::{SamplerConfig, SamplerKind, Shape};
use wdm3d::maskgen::{
    place_masks_detailed, shift_unhealthy, BlobParams, MaskLibrary, MaskSource, PlacementPolicy,
};
use wdm3d::metrics::{
    evaluate, mean_std, rescale_unit, ssim_roi, DEFAULT_SSIM_SIGMA, DEFAULT_SSIM_WINDOW,
};
use wdm3d::nifti::{
    load_case, read_mask, read_nifti, read_volume, write_mask, write_nifti, write_nifti_image,
    CaseLayout, Datatype, NiftiHeader, NiftiImage, Role, Task,
};
use wdm3d::objectives::{LossWeights, Objective};
use wdm3d::schedule::{Schedule, ScheduleConfig, DEFAULT_RHO};
use wdm3d::selftest::run_selftest;
use wdm3d::synthetic::phantom as make_phantom;
use wdm3d::volume::{
    apply_void, compose, crop_padding, denormalize_volume, normalize_volume, pad_mask_to_even,
    pad_to_even, voxel_count, Dims, NormalizationParams, DEFAULT_HI_PCT, DEFAULT_LO_PCT,
};
use wdm3d::wavelet::{dwt3, dwt3_many, idwt3, SUBBANDS};
use wdm3d::{MaskVolume, Modality, SubbandStack, Volume};

use crate::manifest::{CliError, CliResult, Ctx};
use crate::{
    DwtArgs, InpaintArgs, MaskgenArgs, MetricTask, MetricsArgs, PhantomArgs, ScheduleArgs,
    SelftestArgs, SynthArgs, TrainArgs,
};

/// Voxel budget above which heavy commands need `--big`.
const BIG_VOXELS: usize = 96 * 96 * 96;

fn compressed(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "gz")
}

fn guard_size(dims: Dims, big: bool) -> CliResult<()> {
    if voxel_count(dims) > BIG_VOXELS && !big {
        return Err(CliError::Usage(format!(
            "volume {dims:?} is larger than 96^3; pass --big to run it anyway"
        )));
    }
    Ok(())
}

fn float_template(h: &NiftiHeader, dt: Datatype) -> NiftiHeader {
    let mut h = h.clone();
    h.datatype = dt.code();
    h.bitpix = (dt.bytes() * 8) as i16;
    h.scl_slope = 1.0;
    h.scl_inter = 0.0;
    h
}

fn load_volume(ctx: &mut Ctx, p: &Path) -> CliResult<(Volume, NiftiHeader)> {
    ctx.input(p)?;
    Ok(read_volume(p)?)
}

fn load_mask(ctx: &mut Ctx, p: &Path) -> CliResult<(MaskVolume, NiftiHeader)> {
    ctx.input(p)?;
    Ok(read_mask(p)?)
}

fn save_volume(ctx: &mut Ctx, v: &Volume, template: &NiftiHeader, p: &Path) -> CliResult<()> {
    ensure_parent(p)?;
    write_nifti(
        v,
        &float_template(template, Datatype::F32),
        p,
        compressed(p),
    )?;
    ctx.output(p)
}

fn save_mask(ctx: &mut Ctx, m: &MaskVolume, template: &NiftiHeader, p: &Path) -> CliResult<()> {
    ensure_parent(p)?;
    write_mask(m, template, p, compressed(p))?;
    ctx.output(p)
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn schedule_from(
    kind: wdm3d::schedule::ScheduleKind,
    steps: usize,
    ctx: &mut Ctx,
) -> CliResult<Schedule> {
    let sched = Schedule::from_config(ScheduleConfig::new(kind, steps))?;
    ctx.schedule = Some(*sched.config());
    Ok(sched)
}

fn sampler_from(
    kind: SamplerKind,
    levels: usize,
    sched: &Schedule,
    ctx: &mut Ctx,
) -> CliResult<SamplerConfig> {
    let cfg = match kind {
        SamplerKind::Ddpm => SamplerConfig::Ddpm,
        SamplerKind::Dpmpp2m => SamplerConfig::Dpmpp2m(sched.karras_grid(levels, DEFAULT_RHO)?),
    };
    ctx.sampler = Some(match &cfg {
        SamplerConfig::Ddpm => json!({ "kind": "ddpm", "steps": sched.steps() }),
        SamplerConfig::Dpmpp2m(g) => json!({
            "kind": "dpmpp2m",
            "levels": g.levels(),
            "rho": g.rho,
            "sigma_min": g.sigma_min,
            "sigma_max": g.sigma_max,
        }),
    });
    Ok(cfg)
}

/// `oracle`, `oracle:mu=M,sigma0=S`, or a checkpoint sidecar path.
fn build_denoiser(
    spec: &str,
    shape: Shape,
    sched: &Schedule,
    ctx: &mut Ctx,
) -> CliResult<(Box<dyn Denoiser>, Value)> {
    let oracle_args = if spec == "oracle" {
        Some("")
    } else {
        spec.strip_prefix("oracle:")
    };
    if let Some(rest) = oracle_args {
        let (mut mu, mut sigma0) = (0.0, 1.0);
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("bad oracle parameter {kv:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| CliError::Usage(format!("bad oracle value {v:?}")))?;
            match k {
                "mu" => mu = v,
                "sigma0" => sigma0 = v,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown oracle parameter {other:?}"
                    )))
                }
            }
        }
        let d = GaussianOracleDenoiser::new(
            GaussianDataSpec::constant(shape, mu, sigma0)?,
            sched.clone(),
        );
        return Ok((
            Box::new(d),
            json!({ "kind": "oracle", "mu": mu, "sigma0": sigma0 }),
        ));
    }
    let path = PathBuf::from(spec);
    let (mut d, meta) = AffineDenoiser::load(&path)?;
    let sidecar = if path.extension().is_some_and(|e| e == "json") {
        path.clone()
    } else {
        path.with_extension("json")
    };
    ctx.input(&sidecar)?;
    ctx.input(&sidecar.with_file_name(&meta.blob))?;
    let trained_steps = d.params.steps;
    // bins partition t/T, so a model trained at one T serves any other
    d.params.steps = sched.steps();
    Ok((
        Box::new(d),
        json!({
            "kind": "affine",
            "checkpoint": sidecar.display().to_string(),
            "objective": meta.objective,
            "pipeline": meta.pipeline,
            "trained_steps": trained_steps,
            "schedule_hash": meta.schedule_hash,
        }),
    ))
}

fn half_dims(d: Dims) -> Dims {
    [d[0] / 2, d[1] / 2, d[2] / 2]
}

pub fn dwt(a: &DwtArgs, ctx: &mut Ctx) -> CliResult<()> {
    let start = Instant::now();
    ctx.input(&a.input)?;
    let img = read_nifti(&a.input)?;
    ctx.time("load", start);
    let start = Instant::now();
    let dims = img.header.dims3()?;
    let n = voxel_count(dims);
    let channels = img.data.len() / n;
    let spacing = img.header.spacing();
    let affine = img.header.affine();
    let (out_dims, out_channels, data, out_spacing, out_affine) = if a.forward {
        let vols: Vec<Volume> = img
            .data
            .chunks(n)
            .map(|c| Volume::new(dims, c.to_vec()))
            .collect::<wdm3d::Result<_>>()?;
        let refs: Vec<&Volume> = vols.iter().collect();
        let s = dwt3_many(&refs)?;
        let mut aff = affine;
        for row in aff.iter_mut().take(3) {
            // half-resolution voxel i covers source voxels 2i and 2i + 1
            row[3] += 0.5 * (row[0] + row[1] + row[2]);
            for v in &mut row[..3] {
                *v *= 2.0;
            }
        }
        (
            s.dims(),
            s.channels(),
            s.into_data(),
            spacing.map(|v| 2.0 * v),
            aff,
        )
    } else {
        let s = SubbandStack::new(channels, dims, img.data.clone())?;
        let vols = idwt3(&s)?;
        let full = vols[0].dims();
        let mut aff = affine;
        for row in aff.iter_mut().take(3) {
            for v in &mut row[..3] {
                *v *= 0.5;
            }
            row[3] -= 0.5 * (row[0] + row[1] + row[2]);
        }
        let count = vols.len();
        let data: Vec<f64> = vols.into_iter().flat_map(Volume::into_data).collect();
        (full, count, data, spacing.map(|v| 0.5 * v), aff)
    };
    ctx.time("transform", start);
    let start = Instant::now();
    let shape: Vec<usize> = if out_channels == 1 {
        out_dims.to_vec()
    } else {
        vec![out_dims[0], out_dims[1], out_dims[2], out_channels]
    };
    let header = NiftiHeader::new_3d(Datatype::F64, out_dims, out_spacing, &out_affine);
    ensure_parent(&a.output)?;
    write_nifti_image(
        &NiftiImage {
            header,
            shape: shape.clone(),
            data,
        },
        &a.output,
        compressed(&a.output),
    )?;
    ctx.output(&a.output)?;
    ctx.time("write", start);
    ctx.result = json!({
        "direction": if a.forward { "forward" } else { "inverse" },
        "input_shape": img.shape,
        "output_shape": shape,
    });
    Ok(())
}

pub fn schedule(a: &ScheduleArgs, ctx: &mut Ctx) -> CliResult<()> {
    let mut cfg = ScheduleConfig::new(a.kind, a.steps);
    if let Some(b) = a.beta_start {
        cfg.beta_start = b;
    }
    if let Some(b) = a.beta_end {
        cfg.beta_end = b;
    }
    let s = Schedule::from_config(cfg)?;
    ctx.schedule = Some(cfg);
    let t = s.steps();
    let mut result = json!({
        "kind": a.kind,
        "T": t,
        "hash": s.hash(),
        "beta_1": s.beta(1)?,
        "beta_T": s.beta(t)?,
        "alpha_bar_1": s.alpha_bar(1)?,
        "alpha_bar_T": s.alpha_bar(t)?,
        "sigma_min": s.sigma(1)?,
        "sigma_max": s.sigma(t)?,
    });
    if let Some(n) = a.karras {
        result["karras"] = json!(s.karras_grid(n, DEFAULT_RHO)?.sigmas);
    }
    if let Some(path) = &a.dump {
        let mut csv = String::from("t,beta,alpha,alpha_bar,sigma\n");
        for step in 1..=t {
            writeln!(
                csv,
                "{step},{},{},{},{}",
                s.beta(step)?,
                s.alpha(step)?,
                s.alpha_bar(step)?,
                s.sigma(step)?
            )
            .expect("writing to a String cannot fail");
        }
        ensure_parent(path)?;
        fs::write(path, csv)?;
        ctx.output(path)?;
    }
    ctx.result = result;
    Ok(())
}

/// `dir/name.nii.gz` with index 3 → `dir/name-003.nii.gz`.
fn indexed_path(p: &Path, i: usize) -> PathBuf {
    let name = p
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (stem, ext) = match name.find('.') {
        Some(k) => name.split_at(k),
        None => (name.as_str(), ""),
    };
    p.with_file_name(format!("{stem}-{i:03}{ext}"))
}

pub fn maskgen(a: &MaskgenArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let start = Instant::now();
    let (brain, header) = load_mask(ctx, &a.brain)?;
    let (m_uh, _) = load_mask(ctx, &a.unhealthy)?;
    let mut real = Vec::new();
    for p in &a.library {
        real.push(load_mask(ctx, p)?.0);
    }
    ctx.time("load", start);
    let lib = MaskLibrary::from_masks(real, MaskSource::Real);
    let policy = PlacementPolicy {
        source_prob_real: if lib.is_empty() { 0.0 } else { a.real_prob },
        max_retries: a.max_retries,
        blob: BlobParams {
            size_range_mm: a.blob_size,
            roughness: a.roughness,
            spacing: header.spacing(),
            ..Default::default()
        },
        ..Default::default()
    };
    policy.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut masks = Vec::with_capacity(a.count);
    let mut summary = Vec::with_capacity(a.count);
    for _ in 0..a.count {
        if a.shift {
            let m = shift_unhealthy(&mut rng, &m_uh, &brain, a.max_retries, !a.no_transform)?;
            summary.push(json!({ "voxels": m.count(), "regions": 1 }));
            masks.push(m);
        } else {
            let p = place_masks_detailed(&mut rng, &brain, &m_uh, &lib, &policy)?;
            summary.push(json!({
                "voxels": p.mask.count(),
                "regions": p.regions.len(),
                "sources": p.regions.iter().map(|r| r.source).collect::<Vec<_>>(),
            }));
            masks.push(p.mask);
        }
    }
    ctx.time("place", start);
    let start = Instant::now();
    let mut paths = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let p = if a.count == 1 {
            a.out.clone()
        } else {
            indexed_path(&a.out, i)
        };
        save_mask(ctx, m, &header, &p)?;
        paths.push(p.display().to_string());
    }
    ctx.time("write", start);
    for (s, p) in summary.iter_mut().zip(&paths) {
        s["path"] = json!(p);
    }
    ctx.result = json!({
        "mode": if a.shift { "shift" } else { "place" },
        "source_prob_real": policy.source_prob_real,
        "masks": summary,
    });
    Ok(())
}

fn pooled_or_empty(m: Option<&MaskVolume>, half: Dims, empty: bool) -> CliResult<SubbandStack> {
    Ok(match m {
        Some(m) if !empty => pool_mask(m)?,
        _ => SubbandStack::zeros(1, half)?,
    })
}

fn phantom_samples(a: &TrainArgs) -> CliResult<Vec<TrainSample>> {
    let d = [a.phantom_size; 3];
    guard_size(d, a.big)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x6d61_736b);
    let policy = PlacementPolicy {
        source_prob_real: 0.0,
        blob: BlobParams {
            size_range_mm: (1.0, (a.phantom_size as f64 / 10.0).max(1.5)),
            ..Default::default()
        },
        ..Default::default()
    };
    let lib = MaskLibrary::empty(MaskSource::Real);
    let mut out = Vec::with_capacity(a.phantoms);
    for i in 0..a.phantoms {
        let ph = make_phantom(a.seed.wrapping_add(i as u64), d)?;
        let norm: Vec<Volume> = ph
            .modalities
            .iter()
            .map(|v| {
                normalize_volume(v, DEFAULT_LO_PCT, DEFAULT_HI_PCT).map(|(n, _)| pad_to_even(&n).0)
            })
            .collect::<wdm3d::Result<_>>()?;
        let brain = pad_mask_to_even(&ph.brain).0;
        let lesion = pad_mask_to_even(&ph.lesion).0;
        let m_h = if a.empty_masks {
            None
        } else {
            Some(place_masks_detailed(&mut mask_rng, &brain, &lesion, &lib, &policy)?.mask)
        };
        out.push(train_sample(a, &norm, m_h.as_ref(), Some(&lesion))?);
    }
    Ok(out)
}

fn train_sample(
    a: &TrainArgs,
    mods: &[Volume],
    m_h: Option<&MaskVolume>,
    m_uh: Option<&MaskVolume>,
) -> CliResult<TrainSample> {
    let x0 = if a.objective == Objective::Dg {
        let refs: Vec<&Volume> = mods.iter().collect();
        dwt3_many(&refs)?
    } else {
        dwt3(&mods[0])?
    };
    let half = x0.dims();
    let needs_masks = matches!(a.objective, Objective::DC | Objective::AK | Objective::AKH);
    let (h, u) = if needs_masks {
        (
            Some(pooled_or_empty(m_h, half, a.empty_masks)?),
            Some(pooled_or_empty(m_uh, half, a.empty_masks)?),
        )
    } else {
        (None, None)
    };
    Ok(TrainSample {
        x0,
        m_h: h,
        m_uh: u,
    })
}

fn case_samples(a: &TrainArgs, ctx: &mut Ctx) -> CliResult<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(a.cases.len());
    for dir in &a.cases {
        let layout = CaseLayout::standard(dir, true);
        for p in layout.resolve()?.values() {
            ctx.input(p)?;
        }
        let case = load_case(&layout, Task::Synth)?;
        let dims = case
            .dims()?
            .ok_or(wdm3d::Error::MissingRole(Role::T1n.name().into()))?;
        guard_size(dims, a.big)?;
        let mods: Vec<Volume> = if a.objective == Objective::Dg {
            case.modalities
                .iter()
                .zip(Modality::ALL)
                .map(|(m, which)| {
                    m.clone()
                        .ok_or_else(|| wdm3d::Error::MissingRole(which.name().into()))
                })
                .collect::<wdm3d::Result<_>>()?
        } else {
            vec![case
                .modality(Modality::T1n)
                .cloned()
                .ok_or_else(|| wdm3d::Error::MissingRole(Role::T1n.name().into()))?]
        };
        out.push(train_sample(
            a,
            &mods,
            case.healthy_mask.as_ref(),
            case.unhealthy_mask.as_ref(),
        )?);
    }
    Ok(out)
}

pub fn train(a: &TrainArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    let sched = schedule_from(a.schedule, a.steps, ctx)?;
    let weights = LossWeights::new(a.lambda1)?;
    let start = Instant::now();
    let data = if a.cases.is_empty() {
        phantom_samples(a)?
    } else {
        case_samples(a, ctx)?
    };
    ctx.time("load", start);
    let opts = TrainOptions {
        lr: a.lr,
        iters: a.iters,
        batch: a.batch,
        seed: a.seed,
        bins: a.bins,
        pipeline: a.pipeline,
    };
    let start = Instant::now();
    let report = train_affine(&data, a.objective, weights, &sched, &opts)?;
    ctx.time("train", start);
    let start = Instant::now();
    ensure_parent(&a.out)?;
    let pipeline = (a.objective == Objective::Dg).then(|| a.pipeline.name());
    let model = AffineDenoiser::new(report.params);
    let sidecar = model.save(&a.out, a.objective.name(), pipeline, &sched.hash())?;
    ctx.output(&sidecar)?;
    ctx.output(&a.out.with_extension("bin"))?;
    let csv_path = a.out.with_extension("loss.csv");
    let mut csv = String::from("iter,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("writing to a String cannot fail");
    }
    fs::write(&csv_path, csv)?;
    ctx.output(&csv_path)?;
    ctx.time("write", start);
    ctx.result = json!({
        "objective": a.objective.name(),
        "pipeline": pipeline,
        "samples": data.len(),
        "iters": a.iters,
        "first_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "checkpoint": sidecar.display().to_string(),
        "loss_csv": csv_path.display().to_string(),
    });
    Ok(())
}

pub fn inpaint(a: &InpaintArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    let start = Instant::now();
    let scan_path = a
        .scan
        .as_ref()
        .or(a.voided.as_ref())
        .expect("clap requires one input");
    let (raw, header) = load_volume(ctx, scan_path)?;
    let (m_h, _) = load_mask(ctx, &a.healthy_mask)?;
    let m_uh = match &a.unhealthy_mask {
        Some(p) => Some(load_mask(ctx, p)?.0),
        None => None,
    };
    ctx.time("load", start);
    guard_size(raw.dims(), a.big)?;
    m_h.check_same_dims(raw.dims())?;

    let (norm, params) = normalize_volume(&raw, DEFAULT_LO_PCT, DEFAULT_HI_PCT)?;
    let (mut scan, pad) = pad_to_even(&norm);
    let m_h_even = pad_mask_to_even(&m_h).0;
    if a.scan.is_some() && a.variant != InpaintVariant::Replace {
        scan = apply_void(&scan, &m_h_even, a.void_fill)?;
    }
    let sched = schedule_from(a.schedule, a.steps, ctx)?;
    let sampler = sampler_from(a.sampler, a.levels, &sched, ctx)?;
    let mut req = InpaintRequest::new(scan, m_h_even, a.variant, sched.clone(), a.seed);
    req.m_uh = m_uh.as_ref().map(|u| pad_mask_to_even(u).0);
    req.sampler = sampler;
    req.void_fill = a.void_fill;
    req.validate()?;

    let shape = Shape::new(SUBBANDS, half_dims(req.scan.dims()));
    let (denoiser, denoiser_info) = build_denoiser(&a.denoiser, shape, &sched, ctx)?;
    // replace models trained with mask channels receive them at sampling time
    req.mask_conditioning = a.variant == InpaintVariant::Replace
        && denoiser.channel_contract().is_some_and(|(_, k)| k == 2);

    let start = Instant::now();
    let out = run_inpaint(denoiser.as_ref(), &req)?;
    ctx.time("sample", start);
    let generated = denormalize_volume(&crop_padding(&out.volume, pad)?, &params)?;
    let result = compose(&generated, &raw, &m_h)?.with_geometry_of(&raw);
    let start = Instant::now();
    save_volume(ctx, &result, &header, &a.out)?;
    ctx.time("write", start);
    ctx.result = json!({
        "variant": a.variant,
        "healthy_voxels": m_h.count(),
        "normalization": params,
        "pad": pad,
        "denoiser": denoiser_info,
        "run": out.record,
    });
    Ok(())
}

fn synth_inputs(a: &SynthArgs) -> CliResult<[Option<PathBuf>; 4]> {
    let mut paths: [Option<PathBuf>; 4] = Default::default();
    if let Some(dir) = &a.case {
        let found = CaseLayout::standard(dir, false).resolve()?;
        for (slot, role) in paths
            .iter_mut()
            .zip([Role::T1n, Role::T1c, Role::T2w, Role::Flair])
        {
            *slot = found.get(&role).cloned();
        }
    }
    for (slot, explicit) in paths.iter_mut().zip([&a.t1n, &a.t1c, &a.t2w, &a.flair]) {
        if let Some(p) = explicit {
            *slot = Some(p.clone());
        }
    }
    paths[a.missing.index()] = None;
    Ok(paths)
}

pub fn synth(a: &SynthArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    let start = Instant::now();
    let paths = synth_inputs(a)?;
    let mut modalities: [Option<Volume>; 4] = Default::default();
    let mut template = None;
    let mut pad = [0; 3];
    for (m, path) in Modality::ALL.iter().zip(&paths) {
        let Some(p) = path else {
            if *m != a.missing {
                return Err(wdm3d::Error::MissingRole(m.name().into()).into());
            }
            continue;
        };
        let (raw, header) = load_volume(ctx, p)?;
        guard_size(raw.dims(), a.big)?;
        let (norm, _) = normalize_volume(&raw, DEFAULT_LO_PCT, DEFAULT_HI_PCT)?;
        let (v, pd) = pad_to_even(&norm);
        pad = pd;
        modalities[m.index()] = Some(v);
        template.get_or_insert((raw, header));
    }
    ctx.time("load", start);
    let (reference, header) = template.ok_or(wdm3d::Error::WrongMissingCount(4))?;
    let sched = schedule_from(a.schedule, a.steps, ctx)?;
    let sampler = sampler_from(a.sampler, a.levels, &sched, ctx)?;
    let output_norm = a
        .output_range
        .map(|(lo, hi)| NormalizationParams::new(lo, hi))
        .transpose()?;
    let req = SynthRequest {
        modalities,
        pipeline: a.pipeline,
        sampler,
        schedule: sched.clone(),
        seed: a.seed,
        output_norm,
    };
    let half = half_dims(
        req.modalities
            .iter()
            .flatten()
            .next()
            .expect("three inputs present")
            .dims(),
    );
    let channels = match a.pipeline {
        GlobalPipeline::K3t1 => SUBBANDS,
        _ => 4 * SUBBANDS,
    };
    let (denoiser, denoiser_info) =
        build_denoiser(&a.denoiser, Shape::new(channels, half), &sched, ctx)?;
    let start = Instant::now();
    let out = synth_missing(denoiser.as_ref(), &req)?;
    ctx.time("sample", start);
    let volume = crop_padding(&out.volume, pad)?.with_geometry_of(&reference);
    let start = Instant::now();
    save_volume(ctx, &volume, &header, &a.out)?;
    ctx.time("write", start);
    ctx.result = json!({
        "pipeline": a.pipeline.name(),
        "missing": a.missing,
        "output_range": a.output_range,
        "denoiser": denoiser_info,
        "run": out.record,
    });
    Ok(())
}

#[derive(Serialize)]
struct MetricRecord {
    case_id: String,
    mse: f64,
    psnr: f64,
    ssim: f64,
    roi_voxels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tumor_ssim: Option<f64>,
}

fn case_id(p: &Path) -> String {
    let name = p
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

pub fn metrics(a: &MetricsArgs, ctx: &mut Ctx) -> CliResult<()> {
    let n = a.pred.len();
    let counts_ok = a.reference.len() == n
        && (a.roi.len() == n || (a.roi.is_empty() && matches!(a.task, MetricTask::Synth)))
        && (a.tumor.is_empty() || a.tumor.len() == n)
        && (a.case_id.is_empty() || a.case_id.len() == n);
    if !counts_ok {
        return Err(CliError::Usage(
            "give one --ref and one --roi per --pred (--roi may be omitted for synth)".into(),
        ));
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (pred, _) = load_volume(ctx, &a.pred[i])?;
        let (reference, _) = load_volume(ctx, &a.reference[i])?;
        let roi = match a.roi.get(i) {
            Some(p) => load_mask(ctx, p)?.0,
            None => MaskVolume::from_nonzero(reference.dims(), reference.data())?,
        };
        let report = evaluate(&pred, &reference, &roi)?;
        let tumor_ssim = match a.tumor.get(i) {
            Some(p) => {
                let (t, _) = load_mask(ctx, p)?;
                let pu = rescale_unit(&pred, &reference)?;
                let ru = rescale_unit(&reference, &reference)?;
                Some(ssim_roi(
                    &pu,
                    &ru,
                    &t,
                    1.0,
                    DEFAULT_SSIM_WINDOW,
                    DEFAULT_SSIM_SIGMA,
                )?)
            }
            None => None,
        };
        records.push(MetricRecord {
            case_id: a
                .case_id
                .get(i)
                .cloned()
                .unwrap_or_else(|| case_id(&a.pred[i])),
            mse: report.mse,
            psnr: report.psnr,
            ssim: report.ssim,
            roi_voxels: report.roi_voxels,
            tumor_ssim,
        });
    }
    ctx.time("evaluate", start);
    let stat = |f: fn(&MetricRecord) -> f64| {
        let (mean, std) = mean_std(&records.iter().map(f).collect::<Vec<_>>());
        json!({ "mean": mean, "std": std })
    };
    let report = json!({
        "task": a.task,
        "records": records,
        "aggregate": {
            "mse": stat(|r| r.mse),
            "psnr": stat(|r| r.psnr),
            "ssim": stat(|r| r.ssim),
        },
    });
    if let Some(p) = &a.out {
        ensure_parent(p)?;
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
        ctx.output(p)?;
    }
    ctx.result = report;
    Ok(())
}

pub fn selftest(a: &SelftestArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    let start = Instant::now();
    let results = run_selftest(a.seed);
    ctx.time("checks", start);
    let mut stdout = std::io::stdout();
    for r in &results {
        let _ = writeln!(
            stdout,
            "{} {:<13} {:>8.3}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.secs,
            r.detail
        );
    }
    ctx.printed = true;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    ctx.result = json!({ "checks": results });
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed {
            code: "SelftestFailed",
            message: format!("failed checks: {}", failed.join(", ")),
        })
    }
}

pub fn phantom(a: &PhantomArgs, ctx: &mut Ctx) -> CliResult<()> {
    ctx.seed = Some(a.seed);
    if a.size < 8 {
        return Err(CliError::Usage("--size must be at least 8".into()));
    }
    let d = [a.size; 3];
    let start = Instant::now();
    let ph = make_phantom(a.seed, d)?;
    ctx.time("generate", start);
    let start = Instant::now();
    fs::create_dir_all(&a.out_dir)?;
    let header = NiftiHeader::new_3d(Datatype::F32, d, [1.0; 3], &wdm3d::volume::IDENTITY_AFFINE);
    let mut files = serde_json::Map::new();
    for (m, v) in Modality::ALL.iter().zip(&ph.modalities) {
        let p = a.out_dir.join(format!("{}-{}.nii.gz", a.id, m.name()));
        save_volume(ctx, v, &header, &p)?;
        files.insert(m.name().into(), json!(p.display().to_string()));
    }
    for (role, mask) in [("mask-unhealthy", &ph.lesion), ("brain", &ph.brain)] {
        let p = a.out_dir.join(format!("{}-{role}.nii.gz", a.id));
        save_mask(ctx, mask, &header, &p)?;
        files.insert(role.into(), json!(p.display().to_string()));
    }
    ctx.time("write", start);
    ctx.result = json!({
        "id": a.id,
        "dims": d,
        "brain_voxels": ph.brain.count(),
        "lesion_voxels": ph.lesion.count(),
        "files": files,
    });
    Ok(())
}
