//! ROI-restricted image metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{linear_index, Dims, MaskVolume, Volume};

pub const DEFAULT_SSIM_WINDOW: usize = 7;
pub const DEFAULT_SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    /// `+inf` when `mse == 0`; serialized as `null` by JSON writers.
    pub psnr: f64,
    pub ssim: f64,
    pub roi_voxels: usize,
}

fn check_inputs(pred: &Volume, reference: &Volume, roi: &MaskVolume) -> Result<usize> {
    if pred.dims() != reference.dims() || roi.dims() != pred.dims() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, ref {:?}, roi {:?}",
            pred.dims(),
            reference.dims(),
            roi.dims()
        )));
    }
    match roi.count() {
        0 => Err(Error::EmptyROI),
        n => Ok(n),
    }
}

pub fn mse_roi(pred: &Volume, reference: &Volume, roi: &MaskVolume) -> Result<f64> {
    let n = check_inputs(pred, reference, roi)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .zip(roi.data())
        .filter(|(_, &m)| m != 0)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        // split so that data_range = 1 gives exactly -10 log10(mse)
        20.0 * data_range.log10() - 10.0 * mse.log10()
    }
}

pub fn psnr_roi(
    pred: &Volume,
    reference: &Volume,
    roi: &MaskVolume,
    data_range: f64,
) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidMetricParam(format!(
            "data_range {data_range}"
        )));
    }
    Ok(psnr_from_mse(mse_roi(pred, reference, roi)?, data_range))
}

/// Normalized 1D Gaussian taps of odd length `window`.
fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

/// Edge-inclusive mirror: `... b a | a b c ... z | z y ...`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable filtering along all three axes.
fn filter3(data: &[f64], d: Dims, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let src = cur;
        let mut dst = vec![0.0; src.len()];
        dst.par_chunks_mut(d[0]).enumerate().for_each(|(row, out)| {
            let y = row % d[1];
            let z = row / d[1];
            for (x, o) in out.iter_mut().enumerate() {
                let p = [x, y, z];
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let mut q = p;
                    q[axis] = reflect(p[axis] as isize + k as isize - r, d[axis]);
                    acc += w * src[linear_index(d, q[0], q[1], q[2])];
                }
                *o = acc;
            }
        });
        cur = dst;
    }
    cur
}

pub fn ssim_roi(
    pred: &Volume,
    reference: &Volume,
    roi: &MaskVolume,
    data_range: f64,
    window: usize,
    sigma: f64,
) -> Result<f64> {
    let n = check_inputs(pred, reference, roi)?;
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::InvalidMetricParam(format!(
            "window {window} must be odd"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidMetricParam(format!("sigma {sigma}")));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidMetricParam(format!(
            "data_range {data_range}"
        )));
    }
    let d = pred.dims();
    if d.iter().any(|&k| window > k) {
        return Err(Error::WindowTooLarge { window, dims: d });
    }
    let taps = gaussian_taps(window, sigma);
    let a = pred.data();
    let b = reference.data();
    let prod = |f: &dyn Fn(f64, f64) -> f64| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<f64>>()
    };
    let mu_a = filter3(a, d, &taps);
    let mu_b = filter3(b, d, &taps);
    let e_aa = filter3(&prod(&|x, _| x * x), d, &taps);
    let e_bb = filter3(&prod(&|_, y| y * y), d, &taps);
    let e_ab = filter3(&prod(&|x, y| x * y), d, &taps);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let sum: f64 = roi
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .map(|(i, _)| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(sum / n as f64)
}

/// Maps intensities to [0, 1] with the reference's min/max window (clamped).
pub fn rescale_unit(v: &Volume, reference: &Volume) -> Result<Volume> {
    let (lo, hi) = reference.min_max();
    if !(hi > lo) {
        return Err(Error::ConstantVolume);
    }
    v.map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// All three metrics on [0, 1]-rescaled intensities with `data_range = 1`.
pub fn evaluate(pred: &Volume, reference: &Volume, roi: &MaskVolume) -> Result<MetricReport> {
    let p = rescale_unit(pred, reference)?;
    let r = rescale_unit(reference, reference)?;
    let mse = mse_roi(&p, &r, roi)?;
    Ok(MetricReport {
        mse,
        psnr: psnr_from_mse(mse, 1.0),
        ssim: ssim_roi(&p, &r, roi, 1.0, DEFAULT_SSIM_WINDOW, DEFAULT_SSIM_SIGMA)?,
        roi_voxels: roi.count(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
