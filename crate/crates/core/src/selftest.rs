//! Fast invariant checks bundled with the library, run by the `selftest` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditioning::{inpaint, InpaintRequest, InpaintVariant};
use crate::denoiser::{GaussianDataSpec, GaussianOracleDenoiser};
use crate::diffusion::{ddpm_sample, Shape};
use crate::error::Result;
use crate::maskgen::{place_masks, BlobParams, MaskLibrary, MaskSource, PlacementPolicy};
use crate::metrics::{mse_roi, psnr_roi, ssim_roi};
use crate::nifti::{decode_nifti, encode_nifti, Datatype, NiftiHeader};
use crate::objectives::{objective_loss, LossWeights, Objective};
use crate::schedule::{build_schedule, ScheduleKind};
use crate::volume::{voxel_count, Dims, MaskVolume, Volume, IDENTITY_AFFINE};
use crate::wavelet::{dwt3, idwt3_single, SubbandStack};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn random_volume(rng: &mut ChaCha8Rng, d: Dims) -> Result<Volume> {
    Volume::new(
        d,
        (0..voxel_count(d))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

fn wavelet_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = [
            2 * rng.random_range(1..9),
            2 * rng.random_range(1..9),
            2 * rng.random_range(1..9),
        ];
        let v = random_volume(rng, d)?;
        let s = dwt3(&v)?;
        let back = idwt3_single(&s)?;
        let err = v
            .data()
            .iter()
            .zip(back.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let e: f64 = v.data().iter().map(|x| x * x).sum();
        worst = worst.max(err).max((s.sum_of_squares() - e).abs() / e);
    }
    Ok((
        worst < 1e-9,
        format!("max reconstruction/energy error {worst:.3e}"),
    ))
}

fn schedule_check() -> Result<(bool, String)> {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for t in [10, 1000, 5000] {
            let s = build_schedule(kind, t)?;
            let ab = s.alpha_bars();
            if !ab.windows(2).all(|w| w[1] < w[0]) || ab.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                return Ok((
                    false,
                    format!("{kind:?} T={t} not strictly decreasing in (0,1)"),
                ));
            }
        }
    }
    Ok((true, "alpha_bar strictly decreasing in (0,1)".into()))
}

fn loss_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let d = [2, 2, 2];
    let n = voxel_count(d) * 8;
    let a = SubbandStack::new(8, d, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let b = SubbandStack::new(8, d, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let ones = SubbandStack::filled(1, d, 1.0)?;
    let zeros = SubbandStack::zeros(1, d)?;
    let w = LossWeights::default();
    let ld = objective_loss(Objective::D, &a, &b, None, None, w)?;
    let full = objective_loss(Objective::DC, &a, &b, Some(&ones), Some(&zeros), w)?;
    let empty = objective_loss(Objective::DC, &a, &b, Some(&zeros), Some(&zeros), w)?;
    let ok = (full - 11.0 * ld).abs() <= 1e-12 * ld.max(1.0) && empty == ld;
    Ok((ok, format!("L_DC(full)/L_D = {:.12}", full / ld)))
}

fn conditioning_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let sched = build_schedule(ScheduleKind::Linear, 10)?;
    let d = [8, 8, 8];
    let oracle = GaussianOracleDenoiser::new(
        GaussianDataSpec::constant(Shape::new(8, [4, 4, 4]), 0.0, 0.5)?,
        sched.clone(),
    );
    for variant in [
        InpaintVariant::Replace,
        InpaintVariant::Ak,
        InpaintVariant::Akh,
    ] {
        let scan = random_volume(rng, d)?;
        let m_h = MaskVolume::from_fn(d, |_, _, _| rng.random_bool(0.2))?;
        let mut req = InpaintRequest::new(
            scan.clone(),
            m_h.clone(),
            variant,
            sched.clone(),
            rng.random(),
        );
        req.m_uh = Some(MaskVolume::from_fn(d, |_, _, _| rng.random_bool(0.1))?);
        let out = inpaint(&oracle, &req)?.volume;
        let leaked = (0..scan.len())
            .filter(|&i| m_h.data()[i] == 0 && out.data()[i].to_bits() != scan.data()[i].to_bits())
            .count();
        if leaked > 0 {
            return Ok((false, format!("{variant:?}: {leaked} known voxels changed")));
        }
    }
    Ok((true, "known region passed through bitwise".into()))
}

fn sampler_check() -> Result<(bool, String)> {
    let sched = build_schedule(ScheduleKind::Linear, 100)?;
    let shape = Shape::new(1, [1, 1, 1]);
    let (mu, sigma0) = (0.5, 0.3);
    let oracle = GaussianOracleDenoiser::new(
        GaussianDataSpec::constant(shape, mu, sigma0)?,
        sched.clone(),
    );
    let n = 400;
    let xs: Vec<f64> = (0..n)
        .map(|seed| ddpm_sample(&oracle, shape, &sched, None, seed).map(|s| s.data()[0]))
        .collect::<Result<_>>()?;
    let m = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sigma0 / (n as f64).sqrt();
    let ok = (m - mu).abs() < 4.0 * se && (sd / sigma0 - 1.0).abs() < 0.15;
    Ok((
        ok,
        format!("mean {m:.4} (target {mu}), std {sd:.4} (target {sigma0})"),
    ))
}

fn maskgen_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let d = [24, 24, 24];
    let brain = MaskVolume::from_fn(d, |x, y, z| {
        let r2 = [x, y, z]
            .iter()
            .map(|&p| (p as f64 - 11.5).powi(2))
            .sum::<f64>();
        r2 <= 121.0
    })?;
    let m_uh = MaskVolume::from_fn(d, |x, y, z| {
        x < 10 && (8..14).contains(&y) && (8..14).contains(&z)
    })?
    .intersection(&brain)?;
    let lib = MaskLibrary::empty(MaskSource::Real);
    let policy = PlacementPolicy {
        source_prob_real: 0.0,
        blob: BlobParams {
            size_range_mm: (1.5, 3.0),
            ..Default::default()
        },
        ..Default::default()
    };
    for _ in 0..50 {
        let m = place_masks(rng, &brain, &m_uh, &lib, &policy)?;
        if m.overlap_count(&m_uh)? > 0 || m.difference(&brain)?.count() > 0 {
            return Ok((false, "placement violated a hard constraint".into()));
        }
    }
    Ok((
        true,
        "50 placements inside brain, disjoint from unhealthy tissue".into(),
    ))
}

fn metrics_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let d = [10, 10, 10];
    let a = random_volume(rng, d)?.map(|v| 0.5 + 0.5 * v)?;
    let roi = MaskVolume::ones(d)?;
    let s = ssim_roi(&a, &a, &roi, 1.0, 7, 1.5)?;
    let b = a.map(|v| v + 0.1)?;
    let mse = mse_roi(&b, &a, &roi)?;
    let psnr = psnr_roi(&b, &a, &roi, 1.0)?;
    let ok = (s - 1.0).abs() < 1e-9
        && (mse - 0.01).abs() < 1e-12
        && (psnr + 10.0 * mse.log10()).abs() < 1e-12;
    Ok((ok, format!("ssim(x,x) = {s:.12}, mse = {mse:.3e}")))
}

fn nifti_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let d = [5, 4, 3];
    for dt in [Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64] {
        let data: Vec<f64> = (0..voxel_count(d))
            .map(|_| match dt {
                Datatype::U8 => rng.random_range(0..=255) as f64,
                Datatype::I16 => rng.random_range(-2000..2000) as f64,
                Datatype::F32 => rng.random::<f32>() as f64,
                Datatype::F64 => rng.random::<f64>(),
            })
            .collect();
        let h = NiftiHeader::new_3d(dt, d, [1.0; 3], &IDENTITY_AFFINE);
        let bytes = encode_nifti(&d, &data, &h)?;
        let back = decode_nifti(&bytes)?;
        if back.data != data || encode_nifti(&back.shape, &back.data, &back.header)? != bytes {
            return Ok((false, format!("{dt:?} round trip differs")));
        }
    }
    Ok((
        true,
        "uint8/int16/float32/float64 round trips are bit-exact".into(),
    ))
}

/// Runs every check; individual failures are reported, not raised.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<(bool, String)>| {
        let start = Instant::now();
        let (passed, detail) = match f(&mut rng) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        out.push(CheckResult {
            name,
            passed,
            detail,
            secs: start.elapsed().as_secs_f64(),
        });
    };
    run("wavelet", &mut wavelet_check);
    run("schedule", &mut |_| schedule_check());
    run("objectives", &mut loss_check);
    run("conditioning", &mut conditioning_check);
    run("sampler", &mut |_| sampler_check());
    run("maskgen", &mut maskgen_check);
    run("metrics", &mut metrics_check);
    run("nifti", &mut nifti_check);
    out
}
