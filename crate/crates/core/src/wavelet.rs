//! Single-level orthonormal 3D Haar analysis and synthesis.
//!
//! A volume of dims `(nx, ny, nz)` becomes eight half-resolution subbands
//! ordered `LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH`, where the letters refer to
//! the x, y and z filters in that order. Channel index is
//! `4 * x_band + 2 * y_band + z_band` with low = 0 and high = 1.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, Volume, IDENTITY_AFFINE};

pub const SUBBANDS: usize = 8;
pub const SUBBAND_NAMES: [&str; SUBBANDS] =
    ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// A stack of channel grids sharing one spatial shape, stored channel-major.
///
/// [`dwt3`] produces 8 channels per input volume; conditioning code also uses
/// this type for mask and indicator channels at subband resolution, so the
/// multiple-of-8 requirement is only enforced by [`idwt3`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
    /// Geometry of the full-resolution source, restored by [`idwt3`].
    pub source_spacing: [f64; 3],
    pub source_affine: [[f64; 4]; 4],
}

impl SubbandStack {
    pub fn new(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(dims));
        }
        let expected = channels * voxel_count(dims);
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            dims,
            data,
            source_spacing: [1.0; 3],
            source_affine: IDENTITY_AFFINE,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Result<Self> {
        Self::new(channels, dims, vec![0.0; channels * voxel_count(dims)])
    }

    pub fn filled(channels: usize, dims: Dims, value: f64) -> Result<Self> {
        Self::new(channels, dims, vec![value; channels * voxel_count(dims)])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial dims of each channel (half the source dims for wavelet output).
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &SubbandStack) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn check_same_shape(&self, other: &SubbandStack) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{:?} vs {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )));
        }
        Ok(())
    }

    /// A copy with the same shape and geometry but new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(self.channels, self.dims, data)?;
        s.source_spacing = self.source_spacing;
        s.source_affine = self.source_affine;
        Ok(s)
    }

    /// Channels `start..start + count` as a new stack.
    pub fn select(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.channels || count == 0 {
            return Err(Error::ShapeMismatch(format!(
                "channel range {start}..{} of {}",
                start + count,
                self.channels
            )));
        }
        let n = self.voxels();
        let mut s = Self::new(
            count,
            self.dims,
            self.data[start * n..(start + count) * n].to_vec(),
        )?;
        s.source_spacing = self.source_spacing;
        s.source_affine = self.source_affine;
        Ok(s)
    }

    /// Overwrites channels starting at `start` with `src`.
    pub fn assign(&mut self, start: usize, src: &SubbandStack) -> Result<()> {
        if src.dims != self.dims || start + src.channels > self.channels {
            return Err(Error::ShapeMismatch(format!(
                "cannot assign {}x{:?} at channel {start} of {}x{:?}",
                src.channels, src.dims, self.channels, self.dims
            )));
        }
        let n = self.voxels();
        self.data[start * n..(start + src.channels) * n].copy_from_slice(&src.data);
        Ok(())
    }

    /// Channel-wise concatenation. Geometry is taken from the first part.
    pub fn concat(parts: &[&SubbandStack]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::ShapeMismatch(format!(
                    "concat dims {:?} vs {:?}",
                    p.dims, first.dims
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        let mut s = Self::new(channels, first.dims, data)?;
        s.source_spacing = first.source_spacing;
        s.source_affine = first.source_affine;
        Ok(s)
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// In-place 3D Haar butterfly on one 2x2x2 block indexed `4*dx + 2*dy + dz`.
/// The orthonormal 2-point Haar matrix is symmetric and orthogonal, so the
/// same routine is its own inverse.
#[inline]
fn haar_block(b: &mut [f64; 8]) {
    for bit in [4usize, 2, 1] {
        for i in 0..8 {
            if i & bit == 0 {
                let (a, c) = (b[i], b[i | bit]);
                b[i] = (a + c) * FRAC_1_SQRT_2;
                b[i | bit] = (a - c) * FRAC_1_SQRT_2;
            }
        }
    }
}

fn analyze_into(v: &Volume, out: &mut [f64]) {
    let d = v.dims();
    let h = [d[0] / 2, d[1] / 2, d[2] / 2];
    let n = voxel_count(h);
    let src = v.data();
    let mut block = [0.0f64; 8];
    for k in 0..h[2] {
        for j in 0..h[1] {
            for i in 0..h[0] {
                for (s, slot) in block.iter_mut().enumerate() {
                    let (dx, dy, dz) = (s >> 2, (s >> 1) & 1, s & 1);
                    *slot = src[linear_index(d, 2 * i + dx, 2 * j + dy, 2 * k + dz)];
                }
                haar_block(&mut block);
                let o = linear_index(h, i, j, k);
                for (band, &c) in block.iter().enumerate() {
                    out[band * n + o] = c;
                }
            }
        }
    }
}

/// Forward transform of one volume into 8 subband channels.
pub fn dwt3(v: &Volume) -> Result<SubbandStack> {
    dwt3_many(&[v])
}

/// Forward transform of several co-registered volumes, concatenating their
/// subbands (8 channels per volume, in input order).
pub fn dwt3_many(vols: &[&Volume]) -> Result<SubbandStack> {
    let first = vols
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no volumes to transform".into()))?;
    let d = first.dims();
    if d.iter().any(|x| x % 2 != 0) {
        return Err(Error::OddDimension(d));
    }
    let h = [d[0] / 2, d[1] / 2, d[2] / 2];
    let per = SUBBANDS * voxel_count(h);
    let mut data = vec![0.0; per * vols.len()];
    for (v, out) in vols.iter().zip(data.chunks_mut(per)) {
        v.check_same_dims(d)?;
        analyze_into(v, out);
    }
    let mut s = SubbandStack::new(SUBBANDS * vols.len(), h, data)?;
    s.source_spacing = first.spacing;
    s.source_affine = first.affine;
    Ok(s)
}

/// Inverse transform: one volume per group of 8 channels.
pub fn idwt3(s: &SubbandStack) -> Result<Vec<Volume>> {
    if s.channels() == 0 || !s.channels().is_multiple_of(SUBBANDS) {
        return Err(Error::BadChannelCount(s.channels()));
    }
    let h = s.dims();
    let d = [2 * h[0], 2 * h[1], 2 * h[2]];
    let n = s.voxels();
    let mut vols = Vec::with_capacity(s.channels() / SUBBANDS);
    for g in 0..s.channels() / SUBBANDS {
        let coeffs = &s.data()[g * SUBBANDS * n..(g + 1) * SUBBANDS * n];
        let mut out = vec![0.0; voxel_count(d)];
        let mut block = [0.0f64; 8];
        for k in 0..h[2] {
            for j in 0..h[1] {
                for i in 0..h[0] {
                    let o = linear_index(h, i, j, k);
                    for (band, slot) in block.iter_mut().enumerate() {
                        *slot = coeffs[band * n + o];
                    }
                    haar_block(&mut block);
                    for (s_, &val) in block.iter().enumerate() {
                        let (dx, dy, dz) = (s_ >> 2, (s_ >> 1) & 1, s_ & 1);
                        out[linear_index(d, 2 * i + dx, 2 * j + dy, 2 * k + dz)] = val;
                    }
                }
            }
        }
        let mut v = Volume::new(d, out)?;
        v.spacing = s.source_spacing;
        v.affine = s.source_affine;
        vols.push(v);
    }
    Ok(vols)
}

/// Inverse transform of an 8-channel stack.
pub fn idwt3_single(s: &SubbandStack) -> Result<Volume> {
    if s.channels() != SUBBANDS {
        return Err(Error::BadChannelCount(s.channels()));
    }
    Ok(idwt3(s)?.remove(0))
}
