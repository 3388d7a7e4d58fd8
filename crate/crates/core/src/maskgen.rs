//! Healthy-mask generation and placement for inpainting training data.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords, linear_index, voxel_count, Dims, MaskVolume};

/// Parameters of the parametric blob generator. Lengths are semi-axes in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub size_range_mm: (f64, f64),
    /// Ratio between the longest and middle semi-axis, and middle and shortest; each ≥ 1.
    pub elongation_range: (f64, f64),
    pub roughness: f64,
    pub spacing: [f64; 3],
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            size_range_mm: (4.0, 10.0),
            elongation_range: (1.0, 1.6),
            roughness: 0.3,
            spacing: [1.0; 3],
        }
    }
}

impl BlobParams {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range_mm;
        let (elo, ehi) = self.elongation_range;
        let ok = lo > 0.0
            && hi >= lo
            && hi.is_finite()
            && elo >= 1.0
            && ehi >= elo
            && ehi.is_finite()
            && (0.0..=1.0).contains(&self.roughness)
            && self.spacing.iter().all(|&s| s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateSize(format!("{self:?}")))
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Three passes of a 3-tap box filter along each axis, clamped at the borders.
fn smooth(field: &mut [f64], d: Dims) {
    for _ in 0..3 {
        for axis in 0..3 {
            let src = field.to_vec();
            for (i, v) in field.iter_mut().enumerate() {
                let p = coords(d, i);
                let mut acc = 0.0;
                for off in [-1isize, 0, 1] {
                    let mut q = p;
                    q[axis] = (p[axis] as isize + off).clamp(0, d[axis] as isize - 1) as usize;
                    acc += src[linear_index(d, q[0], q[1], q[2])];
                }
                *v = acc / 3.0;
            }
        }
    }
}

fn neighbors6(d: Dims, i: usize) -> impl Iterator<Item = usize> {
    let p = coords(d, i);
    (0..6).filter_map(move |k| {
        let axis = k / 2;
        let mut q = p;
        if k % 2 == 0 {
            q[axis] = q[axis].checked_sub(1)?;
        } else {
            q[axis] += 1;
            if q[axis] >= d[axis] {
                return None;
            }
        }
        Some(linear_index(d, q[0], q[1], q[2]))
    })
}

/// Labels 6-connected components; returns `(labels, sizes)` with label 0 for background.
pub fn connected_components(m: &MaskVolume) -> (Vec<usize>, Vec<usize>) {
    let d = m.dims();
    let mut labels = vec![0usize; m.data().len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if m.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len();
        sizes.push(0);
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[label] += 1;
            for j in neighbors6(d, i) {
                if m.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, sizes)
}

/// Random ellipsoid, optionally roughened by smoothed noise; the largest
/// 6-connected component cropped to its bounding box.
pub fn generate_blob_mask(rng: &mut impl Rng, params: &BlobParams) -> Result<MaskVolume> {
    params.validate()?;
    let r = uniform(rng, params.size_range_mm);
    let e1 = uniform(rng, params.elongation_range);
    let e2 = uniform(rng, params.elongation_range);
    let mut axes = [r * e1, r, r / e2];
    // random axis assignment
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        axes.swap(i, j);
    }
    let grow = 1.0 + params.roughness;
    let half: [usize; 3] =
        std::array::from_fn(|k| (axes[k] * grow / params.spacing[k]).ceil() as usize + 1);
    let d: Dims = std::array::from_fn(|k| 2 * half[k] + 1);
    let n = voxel_count(d);
    let noise = if params.roughness > 0.0 {
        let mut f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        smooth(&mut f, d);
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            f.iter_mut().for_each(|v| *v /= peak);
        }
        Some(f)
    } else {
        None
    };
    let raw = MaskVolume::from_fn(d, |x, y, z| {
        let p = [x, y, z];
        let q: f64 = (0..3)
            .map(|k| {
                let mm = (p[k] as f64 - half[k] as f64) * params.spacing[k];
                (mm / axes[k]).powi(2)
            })
            .sum();
        let thr = 1.0
            + noise
                .as_ref()
                .map_or(0.0, |f| params.roughness * f[linear_index(d, x, y, z)]);
        q <= thr
    })?;
    let (labels, sizes) = connected_components(&raw);
    let best = (1..sizes.len())
        .max_by_key(|&l| sizes[l])
        .ok_or_else(|| Error::DegenerateSize("empty blob".into()))?;
    let kept = MaskVolume::new(d, labels.iter().map(|&l| u8::from(l == best)).collect())?;
    kept.crop_to_bbox()
        .ok_or_else(|| Error::DegenerateSize("empty blob".into()))
}

/// Element of the 48-element group of axis permutations combined with flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymmetryOp {
    /// Output axis `j` reads input axis `perm[j]`.
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl SymmetryOp {
    pub const ORDER: usize = 48;

    pub const IDENTITY: SymmetryOp = SymmetryOp {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    /// Index 0 is the identity.
    pub fn from_index(i: usize) -> Result<Self> {
        if i >= Self::ORDER {
            return Err(Error::BadIndex(i));
        }
        Ok(Self {
            perm: PERMUTATIONS[i / 8],
            flip: [i & 4 != 0, i & 2 != 0, i & 1 != 0],
        })
    }

    pub fn apply(&self, m: &MaskVolume) -> MaskVolume {
        let d = m.dims();
        let od: Dims = std::array::from_fn(|j| d[self.perm[j]]);
        let mut out = vec![0u8; m.data().len()];
        for (i, &v) in m.data().iter().enumerate() {
            if v == 0 {
                continue;
            }
            let p = coords(d, i);
            let q: [usize; 3] = std::array::from_fn(|j| {
                let c = p[self.perm[j]];
                if self.flip[j] {
                    od[j] - 1 - c
                } else {
                    c
                }
            });
            out[linear_index(od, q[0], q[1], q[2])] = 1;
        }
        MaskVolume::new(od, out).expect("permuted dims keep the voxel count")
    }
}

/// Applies a uniformly drawn axis-aligned symmetry.
pub fn transform_real_mask(rng: &mut impl Rng, m: &MaskVolume) -> Result<MaskVolume> {
    if m.is_empty_mask() {
        return Err(Error::EmptyMask);
    }
    let op = SymmetryOp::from_index(rng.random_range(0..SymmetryOp::ORDER))?;
    Ok(op.apply(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Real,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    /// Cropped to its bounding box.
    pub mask: MaskVolume,
    pub voxels: usize,
}

#[derive(Debug, Clone)]
pub struct MaskLibrary {
    pub entries: Vec<LibraryEntry>,
    pub source: MaskSource,
}

impl MaskLibrary {
    /// Crops every mask to its bounding box; empty masks are dropped.
    pub fn from_masks(masks: impl IntoIterator<Item = MaskVolume>, source: MaskSource) -> Self {
        let entries = masks
            .into_iter()
            .filter_map(|m| m.crop_to_bbox())
            .map(|mask| LibraryEntry {
                voxels: mask.count(),
                mask,
            })
            .collect();
        Self { entries, source }
    }

    pub fn empty(source: MaskSource) -> Self {
        Self {
            entries: Vec::new(),
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    /// Probabilities of 1, 2 and 3 regions.
    pub region_count_probs: [f64; 3],
    pub source_prob_real: f64,
    pub max_retries: usize,
    pub blob: BlobParams,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self {
            region_count_probs: [0.45, 0.45, 0.10],
            source_prob_real: 0.5,
            max_retries: 100,
            blob: BlobParams::default(),
        }
    }
}

impl PlacementPolicy {
    pub fn validate(&self) -> Result<()> {
        let p = self.region_count_probs;
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPolicy(format!(
                "region_count_probs {p:?} must sum to 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.source_prob_real) {
            return Err(Error::InvalidPolicy(format!(
                "source_prob_real {}",
                self.source_prob_real
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidPolicy("max_retries must be positive".into()));
        }
        Ok(())
    }

    fn draw_region_count(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let [p1, p2, _] = self.region_count_probs;
        if u < p1 {
            1
        } else if u < p1 + p2 {
            2
        } else {
            3
        }
    }
}

/// Voxel coordinates of a tight mask, relative to its bounding-box center.
fn offsets(shape: &MaskVolume) -> Vec<[isize; 3]> {
    let d = shape.dims();
    let c: [isize; 3] = std::array::from_fn(|k| ((d[k] - 1) / 2) as isize);
    shape
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| {
            let p = coords(d, i);
            std::array::from_fn(|k| p[k] as isize - c[k])
        })
        .collect()
}

/// Linear indices covered when the shape is centered at `center`; `None` if it leaves the volume.
fn place_at(offs: &[[isize; 3]], center: [usize; 3], dims: Dims) -> Option<Vec<usize>> {
    offs.iter()
        .map(|o| {
            let q: [isize; 3] = std::array::from_fn(|k| center[k] as isize + o[k]);
            if (0..3).all(|k| q[k] >= 0 && (q[k] as usize) < dims[k]) {
                Some(linear_index(
                    dims,
                    q[0] as usize,
                    q[1] as usize,
                    q[2] as usize,
                ))
            } else {
                None
            }
        })
        .collect()
}

/// Rejection placement: centers are drawn uniformly from `eligible`; a
/// placement is kept when every voxel lies in the volume and in `allowed`.
fn place_shape(
    rng: &mut impl Rng,
    shape: &MaskVolume,
    eligible: &[usize],
    allowed: &[bool],
    dims: Dims,
    max_retries: usize,
) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        return Err(Error::PlacementExhausted(0));
    }
    let offs = offsets(shape);
    for _ in 0..max_retries {
        let c = coords(dims, *eligible.choose(rng).expect("nonempty"));
        if let Some(idx) = place_at(&offs, c, dims) {
            if idx.iter().all(|&i| allowed[i]) {
                return Ok(idx);
            }
        }
    }
    Err(Error::PlacementExhausted(max_retries))
}

#[derive(Debug, Clone)]
pub struct PlacedRegion {
    pub source: MaskSource,
    pub voxels: usize,
}

#[derive(Debug, Clone)]
pub struct Placement {
    pub mask: MaskVolume,
    pub regions: Vec<PlacedRegion>,
}

/// Draws 1-3 mutually disjoint regions inside `brain` and outside `m_uh`.
pub fn place_masks_detailed(
    rng: &mut impl Rng,
    brain: &MaskVolume,
    m_uh: &MaskVolume,
    lib: &MaskLibrary,
    policy: &PlacementPolicy,
) -> Result<Placement> {
    policy.validate()?;
    if brain.is_empty_mask() {
        return Err(Error::EmptyMask);
    }
    m_uh.check_same_dims(brain.dims())?;
    let dims = brain.dims();
    let mut allowed: Vec<bool> = brain
        .data()
        .iter()
        .zip(m_uh.data())
        .map(|(&b, &u)| b != 0 && u == 0)
        .collect();
    let mut out = vec![0u8; allowed.len()];
    let k = policy.draw_region_count(rng);
    let mut regions = Vec::with_capacity(k);
    for _ in 0..k {
        let real = rng.random_bool(policy.source_prob_real);
        let (shape, source) = if real {
            let entry = lib.entries.choose(rng).ok_or(Error::EmptyLibrary)?;
            (transform_real_mask(rng, &entry.mask)?, MaskSource::Real)
        } else {
            (
                generate_blob_mask(rng, &policy.blob)?,
                MaskSource::Synthetic,
            )
        };
        let eligible: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i]).collect();
        let idx = place_shape(rng, &shape, &eligible, &allowed, dims, policy.max_retries)?;
        for &i in &idx {
            out[i] = 1;
            allowed[i] = false;
        }
        regions.push(PlacedRegion {
            source,
            voxels: idx.len(),
        });
    }
    Ok(Placement {
        mask: MaskVolume::new(dims, out)?,
        regions,
    })
}

pub fn place_masks(
    rng: &mut impl Rng,
    brain: &MaskVolume,
    m_uh: &MaskVolume,
    lib: &MaskLibrary,
    policy: &PlacementPolicy,
) -> Result<MaskVolume> {
    Ok(place_masks_detailed(rng, brain, m_uh, lib, policy)?.mask)
}

/// Translates `m_uh` (after a random symmetry when `transform` is set) to a
/// spot inside `brain` that does not touch the original.
pub fn shift_unhealthy(
    rng: &mut impl Rng,
    m_uh: &MaskVolume,
    brain: &MaskVolume,
    max_retries: usize,
    transform: bool,
) -> Result<MaskVolume> {
    m_uh.check_same_dims(brain.dims())?;
    let tight = m_uh.crop_to_bbox().ok_or(Error::EmptyMask)?;
    let shape = if transform {
        transform_real_mask(rng, &tight)?
    } else {
        tight
    };
    let allowed: Vec<bool> = brain
        .data()
        .iter()
        .zip(m_uh.data())
        .map(|(&b, &u)| b != 0 && u == 0)
        .collect();
    let eligible: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i]).collect();
    let idx = place_shape(
        rng,
        &shape,
        &eligible,
        &allowed,
        brain.dims(),
        max_retries.max(1),
    )?;
    let mut out = vec![0u8; allowed.len()];
    for i in idx {
        out[i] = 1;
    }
    MaskVolume::new(brain.dims(), out)
}
