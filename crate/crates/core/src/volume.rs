//! Volumetric data model: scalar volumes, binary masks, intensity
//! normalization and voiding.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`, the same
//! order NIfTI uses on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

pub const IDENTITY_AFFINE: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn coords(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

fn check_dims(dims: Dims, len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    let expected = voxel_count(dims);
    if expected != len {
        return Err(Error::LengthMismatch { expected, got: len });
    }
    Ok(())
}

/// A 3D grid of real samples with voxel spacing (mm) and a voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume"));
        }
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            affine: IDENTITY_AFFINE,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data)
    }

    /// Copies spacing and affine from `other`.
    pub fn with_geometry_of(mut self, other: &Volume) -> Self {
        self.spacing = other.spacing;
        self.affine = other.affine;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Replaces the samples, keeping geometry. Fails on length mismatch or non-finite input.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut out = Volume::new(self.dims, data)?;
        out.spacing = self.spacing;
        out.affine = self.affine;
        Ok(out)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = value;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn check_same_dims(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::DimMismatch(self.dims, dims));
        }
        Ok(())
    }
}

/// A binary 3D grid. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryMask);
        }
        Ok(Self { dims, data })
    }

    /// Any nonzero value becomes 1.
    pub fn from_nonzero(dims: Dims, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| u8::from(v != 0.0)).collect())
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0; voxel_count(dims)])
    }

    pub fn ones(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![1; voxel_count(dims)])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    /// `self ∧ ¬other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn overlap_count(&self, other: &Self) -> Result<usize> {
        Ok(self.intersection(other)?.count())
    }

    /// Inclusive bounding box `(min, max)` of the set voxels, or `None` if empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v == 1 {
                any = true;
                let c = coords(self.dims, i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Crops to the bounding box. Returns `None` for an empty mask.
    pub fn crop_to_bbox(&self) -> Option<Self> {
        let (lo, hi) = self.bounding_box()?;
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let m = MaskVolume::from_fn(dims, |x, y, z| self.get(x + lo[0], y + lo[1], z + lo[2]))
            .expect("cropped dims are nonzero");
        Some(m)
    }

    pub fn check_same_dims(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::DimMismatch(self.dims, dims));
        }
        Ok(())
    }
}

/// Source intensities mapped to −1 (`lo`) and +1 (`hi`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationParams {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParams { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (2.0 * (v - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn inverse(&self, v: f64) -> f64 {
        self.lo + (v + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

pub const DEFAULT_LO_PCT: f64 = 0.5;
pub const DEFAULT_HI_PCT: f64 = 99.5;

/// Nearest-rank percentile of an ascending-sorted slice. `pct = 0` yields the minimum.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Percentile clip followed by an affine map onto [−1, 1].
pub fn normalize_volume(
    v: &Volume,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<(Volume, NormalizationParams)> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidPercentile {
            lo: lo_pct,
            hi: hi_pct,
        });
    }
    let (min, max) = v.min_max();
    if min == max {
        return Err(Error::ConstantVolume);
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut lo = nearest_rank(&sorted, lo_pct);
    let mut hi = nearest_rank(&sorted, hi_pct);
    if lo == hi {
        // window collapsed onto a dominant value (e.g. background); widen to the full range
        lo = min;
        hi = max;
    }
    let params = NormalizationParams::new(lo, hi)?;
    Ok((v.map(|x| params.forward(x))?, params))
}

pub fn denormalize_volume(v: &Volume, p: &NormalizationParams) -> Result<Volume> {
    let p = NormalizationParams::new(p.lo, p.hi)?;
    v.map(|x| p.inverse(x))
}

/// Replaces samples under the mask with `fill`.
pub fn apply_void(v: &Volume, m: &MaskVolume, fill: f64) -> Result<Volume> {
    m.check_same_dims(v.dims())?;
    let data = v
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &k)| if k == 1 { fill } else { x })
        .collect();
    v.with_data(data)
}

/// Voxelwise `m ? inside : outside`.
pub fn compose(inside: &Volume, outside: &Volume, m: &MaskVolume) -> Result<Volume> {
    inside.check_same_dims(outside.dims())?;
    m.check_same_dims(inside.dims())?;
    let data = inside
        .data()
        .iter()
        .zip(outside.data())
        .zip(m.data())
        .map(|((&a, &b), &k)| if k == 1 { a } else { b })
        .collect();
    outside.with_data(data)
}

/// Zero-pads every odd axis by one voxel at the high end. Returns the padding applied.
pub fn pad_to_even(v: &Volume) -> (Volume, [usize; 3]) {
    let d = v.dims();
    let pad = [d[0] % 2, d[1] % 2, d[2] % 2];
    if pad == [0, 0, 0] {
        return (v.clone(), pad);
    }
    let nd = [d[0] + pad[0], d[1] + pad[1], d[2] + pad[2]];
    let out = Volume::from_fn(nd, |x, y, z| {
        if x < d[0] && y < d[1] && z < d[2] {
            v.get(x, y, z)
        } else {
            0.0
        }
    })
    .expect("padded dims are valid")
    .with_geometry_of(v);
    (out, pad)
}

pub fn pad_mask_to_even(m: &MaskVolume) -> (MaskVolume, [usize; 3]) {
    let d = m.dims();
    let pad = [d[0] % 2, d[1] % 2, d[2] % 2];
    let nd = [d[0] + pad[0], d[1] + pad[1], d[2] + pad[2]];
    let out = MaskVolume::from_fn(nd, |x, y, z| {
        x < d[0] && y < d[1] && z < d[2] && m.get(x, y, z)
    })
    .expect("padded dims are valid");
    (out, pad)
}

/// Removes `pad` voxels from the high end of each axis.
pub fn crop_padding(v: &Volume, pad: [usize; 3]) -> Result<Volume> {
    let d = v.dims();
    if (0..3).any(|a| pad[a] >= d[a]) {
        return Err(Error::InvalidDims(d));
    }
    let nd = [d[0] - pad[0], d[1] - pad[1], d[2] - pad[2]];
    Ok(Volume::from_fn(nd, |x, y, z| v.get(x, y, z))?.with_geometry_of(v))
}

pub fn crop_mask_padding(m: &MaskVolume, pad: [usize; 3]) -> Result<MaskVolume> {
    let d = m.dims();
    if (0..3).any(|a| pad[a] >= d[a]) {
        return Err(Error::InvalidDims(d));
    }
    let nd = [d[0] - pad[0], d[1] - pad[1], d[2] - pad[2]];
    MaskVolume::from_fn(nd, |x, y, z| m.get(x, y, z))
}

/// The four MRI contrasts, in the fixed order used for channel stacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1n,
    T1c,
    T2w,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1n, Modality::T1c, Modality::T2w, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1n => "t1n",
            Modality::T1c => "t1c",
            Modality::T2w => "t2w",
            Modality::Flair => "flair",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
    }
}

/// One dataset record.
#[derive(Debug, Clone, Default)]
pub struct Case {
    pub id: String,
    /// Indexed by [`Modality::index`].
    pub modalities: [Option<Volume>; 4],
    pub healthy_mask: Option<MaskVolume>,
    pub unhealthy_mask: Option<MaskVolume>,
    pub full_mask: Option<MaskVolume>,
    pub brain_mask: Option<MaskVolume>,
    pub voided: Option<Volume>,
    pub norm: [Option<NormalizationParams>; 4],
    pub voided_norm: Option<NormalizationParams>,
    /// High-end zero padding applied on load.
    pub pad: [usize; 3],
}

impl Case {
    pub fn modality(&self, m: Modality) -> Option<&Volume> {
        self.modalities[m.index()].as_ref()
    }

    pub fn missing_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.modalities[m.index()].is_none())
            .collect()
    }

    /// Shared dims of every present member.
    pub fn dims(&self) -> Result<Option<Dims>> {
        let mut dims: Option<Dims> = None;
        let vols = self
            .modalities
            .iter()
            .flatten()
            .chain(self.voided.iter())
            .map(|v| v.dims());
        let masks = [
            &self.healthy_mask,
            &self.unhealthy_mask,
            &self.full_mask,
            &self.brain_mask,
        ]
        .into_iter()
        .flatten()
        .map(|m| m.dims());
        for d in vols.chain(masks) {
            match dims {
                None => dims = Some(d),
                Some(e) if e != d => return Err(Error::DimMismatch(e, d)),
                _ => {}
            }
        }
        Ok(dims)
    }
}
