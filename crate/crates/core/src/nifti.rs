//! NIfTI-1 single-file images (`.nii`, `.nii.gz`) and dataset case loading.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    normalize_volume, pad_mask_to_even, pad_to_even, voxel_count, Case, Dims, MaskVolume, Modality,
    Volume, DEFAULT_HI_PCT, DEFAULT_LO_PCT, IDENTITY_AFFINE,
};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// All fields of the 348-byte header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p: [f32; 3],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    /// `quatern_b, quatern_c, quatern_d`.
    pub quatern: [f32; 3],
    /// `qoffset_x, qoffset_y, qoffset_z`.
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// A fresh little-endian header for a 3D image with an sform affine.
    pub fn new_3d(
        datatype: Datatype,
        dims: Dims,
        spacing: [f64; 3],
        affine: &[[f64; 4]; 4],
    ) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for k in 0..3 {
            dim[k + 1] = dims[k].min(i16::MAX as usize) as i16;
        }
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        for k in 0..3 {
            pixdim[k + 1] = spacing[k] as f32;
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = affine[r][c] as f32;
            }
        }
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim,
            intent_p: [0.0; 3],
            intent_code: 0,
            datatype: datatype.code(),
            bitpix: (datatype.bytes() * 8) as i16,
            slice_start: 0,
            pixdim,
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
            intent_name: [0; 16],
            magic: MAGIC,
        }
    }

    pub fn datatype(&self) -> Result<Datatype> {
        Datatype::from_code(self.datatype)
    }

    /// Array shape from `dim[1..=dim[0]]`.
    pub fn shape(&self) -> Result<Vec<usize>> {
        let n = self.dim[0];
        if !(1..=7).contains(&n) {
            return Err(Error::InvalidDims([n.max(0) as usize, 0, 0]));
        }
        self.dim[1..=n as usize]
            .iter()
            .map(|&d| {
                if d < 1 {
                    Err(Error::InvalidDims([d.max(0) as usize, 0, 0]))
                } else {
                    Ok(d as usize)
                }
            })
            .collect()
    }

    /// Spatial dims; trailing axes beyond the third must be singleton for a 3D read.
    pub fn dims3(&self) -> Result<Dims> {
        let s = self.shape()?;
        Ok([s[0], *s.get(1).unwrap_or(&1), *s.get(2).unwrap_or(&1)])
    }

    pub fn spacing(&self) -> [f64; 3] {
        std::array::from_fn(|k| {
            let p = self.pixdim[k + 1] as f64;
            if p > 0.0 {
                p
            } else {
                1.0
            }
        })
    }

    /// Voxel-to-world affine: sform if set, else qform, else a spacing diagonal.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut a = IDENTITY_AFFINE;
        if self.sform_code > 0 {
            for (row, src) in a.iter_mut().zip(&self.srow) {
                for (v, &s) in row.iter_mut().zip(src) {
                    *v = s as f64;
                }
            }
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let aa = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = [
                [
                    aa * aa + b * b - c * c - d * d,
                    2.0 * (b * c - aa * d),
                    2.0 * (b * d + aa * c),
                ],
                [
                    2.0 * (b * c + aa * d),
                    aa * aa + c * c - b * b - d * d,
                    2.0 * (c * d - aa * b),
                ],
                [
                    2.0 * (b * d - aa * c),
                    2.0 * (c * d + aa * b),
                    aa * aa + d * d - c * c - b * b,
                ],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let sp = self.spacing();
            for r in 0..3 {
                a[r][0] = rot[r][0] * sp[0];
                a[r][1] = rot[r][1] * sp[1];
                a[r][2] = rot[r][2] * sp[2] * qfac;
                a[r][3] = self.qoffset[r] as f64;
            }
        } else {
            let sp = self.spacing();
            for k in 0..3 {
                a[k][k] = sp[k];
            }
        }
        a
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        let (s, i) = (self.scl_slope as f64, self.scl_inter as f64);
        if s == 0.0 || (s == 1.0 && i == 0.0) {
            None
        } else {
            Some((s, i))
        }
    }
}

/// Field codec over a runtime-selected byte order.
struct Codec {
    big: bool,
}

impl Codec {
    fn i16(&self, b: &[u8], o: usize) -> i16 {
        if self.big {
            BigEndian::read_i16(&b[o..])
        } else {
            LittleEndian::read_i16(&b[o..])
        }
    }

    fn i32(&self, b: &[u8], o: usize) -> i32 {
        if self.big {
            BigEndian::read_i32(&b[o..])
        } else {
            LittleEndian::read_i32(&b[o..])
        }
    }

    fn f32(&self, b: &[u8], o: usize) -> f32 {
        if self.big {
            BigEndian::read_f32(&b[o..])
        } else {
            LittleEndian::read_f32(&b[o..])
        }
    }

    fn f64(&self, b: &[u8], o: usize) -> f64 {
        if self.big {
            BigEndian::read_f64(&b[o..])
        } else {
            LittleEndian::read_f64(&b[o..])
        }
    }

    fn f32s<const N: usize>(&self, b: &[u8], o: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(b, o + 4 * i))
    }
}

fn bytes<const N: usize>(b: &[u8], o: usize) -> [u8; N] {
    b[o..o + N].try_into().expect("slice length matches")
}

/// Parses a header, detecting byte order from `sizeof_hdr`. Returns the header and whether it was big-endian.
pub fn parse_header(b: &[u8]) -> Result<(NiftiHeader, bool)> {
    if b.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile {
            need: HEADER_SIZE,
            have: b.len(),
        });
    }
    let le = LittleEndian::read_i32(b);
    let big = if le == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(b) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::EndianDetectFailure(le));
    };
    let c = Codec { big };
    let magic: [u8; 4] = bytes(b, 344);
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let h = NiftiHeader {
        sizeof_hdr: c.i32(b, 0),
        data_type: bytes(b, 4),
        db_name: bytes(b, 14),
        extents: c.i32(b, 32),
        session_error: c.i16(b, 36),
        regular: b[38],
        dim_info: b[39],
        dim: std::array::from_fn(|i| c.i16(b, 40 + 2 * i)),
        intent_p: c.f32s(b, 56),
        intent_code: c.i16(b, 68),
        datatype: c.i16(b, 70),
        bitpix: c.i16(b, 72),
        slice_start: c.i16(b, 74),
        pixdim: c.f32s(b, 76),
        vox_offset: c.f32(b, 108),
        scl_slope: c.f32(b, 112),
        scl_inter: c.f32(b, 116),
        slice_end: c.i16(b, 120),
        slice_code: b[122],
        xyzt_units: b[123],
        cal_max: c.f32(b, 124),
        cal_min: c.f32(b, 128),
        slice_duration: c.f32(b, 132),
        toffset: c.f32(b, 136),
        glmax: c.i32(b, 140),
        glmin: c.i32(b, 144),
        descrip: bytes(b, 148),
        aux_file: bytes(b, 228),
        qform_code: c.i16(b, 252),
        sform_code: c.i16(b, 254),
        quatern: c.f32s(b, 256),
        qoffset: c.f32s(b, 268),
        srow: [c.f32s(b, 280), c.f32s(b, 296), c.f32s(b, 312)],
        intent_name: bytes(b, 328),
        magic,
    };
    h.datatype()?;
    h.shape()?;
    Ok((h, big))
}

/// Serializes a header little-endian.
pub fn encode_header(h: &NiftiHeader) -> [u8; HEADER_SIZE] {
    let mut b = [0u8; HEADER_SIZE];
    let put_f32s = |b: &mut [u8], o: usize, v: &[f32]| {
        for (i, x) in v.iter().enumerate() {
            LittleEndian::write_f32(&mut b[o + 4 * i..], *x);
        }
    };
    LittleEndian::write_i32(&mut b[0..], h.sizeof_hdr);
    b[4..14].copy_from_slice(&h.data_type);
    b[14..32].copy_from_slice(&h.db_name);
    LittleEndian::write_i32(&mut b[32..], h.extents);
    LittleEndian::write_i16(&mut b[36..], h.session_error);
    b[38] = h.regular;
    b[39] = h.dim_info;
    for (i, d) in h.dim.iter().enumerate() {
        LittleEndian::write_i16(&mut b[40 + 2 * i..], *d);
    }
    put_f32s(&mut b, 56, &h.intent_p);
    LittleEndian::write_i16(&mut b[68..], h.intent_code);
    LittleEndian::write_i16(&mut b[70..], h.datatype);
    LittleEndian::write_i16(&mut b[72..], h.bitpix);
    LittleEndian::write_i16(&mut b[74..], h.slice_start);
    put_f32s(&mut b, 76, &h.pixdim);
    put_f32s(&mut b, 108, &[h.vox_offset, h.scl_slope, h.scl_inter]);
    LittleEndian::write_i16(&mut b[120..], h.slice_end);
    b[122] = h.slice_code;
    b[123] = h.xyzt_units;
    put_f32s(
        &mut b,
        124,
        &[h.cal_max, h.cal_min, h.slice_duration, h.toffset],
    );
    LittleEndian::write_i32(&mut b[140..], h.glmax);
    LittleEndian::write_i32(&mut b[144..], h.glmin);
    b[148..228].copy_from_slice(&h.descrip);
    b[228..252].copy_from_slice(&h.aux_file);
    LittleEndian::write_i16(&mut b[252..], h.qform_code);
    LittleEndian::write_i16(&mut b[254..], h.sform_code);
    put_f32s(&mut b, 256, &h.quatern);
    put_f32s(&mut b, 268, &h.qoffset);
    for (r, row) in h.srow.iter().enumerate() {
        put_f32s(&mut b, 280 + 16 * r, row);
    }
    b[328..344].copy_from_slice(&h.intent_name);
    b[344..348].copy_from_slice(&h.magic);
    b
}

/// Decoded image of any rank: samples in file order with intensity scaling applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn decode_nifti(b: &[u8]) -> Result<NiftiImage> {
    let (header, big) = parse_header(b)?;
    let dt = header.datatype()?;
    let shape = header.shape()?;
    let n: usize = shape.iter().product();
    let off = header.vox_offset as usize;
    if off < HEADER_SIZE {
        return Err(Error::TruncatedFile {
            need: HEADER_SIZE,
            have: off,
        });
    }
    let need = off + n * dt.bytes();
    if b.len() < need {
        return Err(Error::TruncatedFile {
            need,
            have: b.len(),
        });
    }
    let p = &b[off..need];
    let c = Codec { big };
    let mut data: Vec<f64> = match dt {
        Datatype::U8 => p.iter().map(|&v| v as f64).collect(),
        Datatype::I16 => (0..n).map(|i| c.i16(p, 2 * i) as f64).collect(),
        Datatype::F32 => (0..n).map(|i| c.f32(p, 4 * i) as f64).collect(),
        Datatype::F64 => (0..n).map(|i| c.f64(p, 8 * i)).collect(),
    };
    if let Some((s, i)) = header.scaling() {
        data.iter_mut().for_each(|v| *v = s * *v + i);
    }
    Ok(NiftiImage {
        header,
        shape,
        data,
    })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    decode_nifti(&read_file_bytes(path)?)
}

/// Encodes samples with the template's datatype and scaling; dims come from `shape`.
pub fn encode_nifti(shape: &[usize], data: &[f64], template: &NiftiHeader) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > 7 {
        return Err(Error::InvalidDims([shape.len(), 0, 0]));
    }
    if let Some(&d) = shape.iter().find(|&&d| d > i16::MAX as usize || d == 0) {
        return Err(Error::DimOverflow(d));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::LengthMismatch {
            expected: n,
            got: data.len(),
        });
    }
    let dt = template.datatype()?;
    let mut h = template.clone();
    h.sizeof_hdr = HEADER_SIZE as i32;
    h.dim = [1; 8];
    h.dim[0] = shape.len() as i16;
    for (k, &d) in shape.iter().enumerate() {
        h.dim[k + 1] = d as i16;
    }
    h.bitpix = (dt.bytes() * 8) as i16;
    h.vox_offset = DEFAULT_VOX_OFFSET as f32;
    h.magic = MAGIC;
    let (slope, inter) = h.scaling().unwrap_or((1.0, 0.0));
    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + n * dt.bytes());
    out.extend_from_slice(&encode_header(&h));
    out.extend_from_slice(&[0u8; DEFAULT_VOX_OFFSET - HEADER_SIZE]);
    let stored = data.iter().map(|&v| (v - inter) / slope);
    match dt {
        Datatype::U8 => {
            for v in stored {
                let r = v.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(Error::InvalidRange(format!("{v} does not fit uint8")));
                }
                out.push(r as u8);
            }
        }
        Datatype::I16 => {
            for v in stored {
                let r = v.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                    return Err(Error::InvalidRange(format!("{v} does not fit int16")));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
        }
        Datatype::F32 => {
            for v in stored {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Datatype::F64 => {
            for v in stored {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8], compress: bool) -> Result<()> {
    if compress {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn write_nifti_image(img: &NiftiImage, path: &Path, compress: bool) -> Result<()> {
    write_bytes(
        path,
        &encode_nifti(&img.shape, &img.data, &img.header)?,
        compress,
    )
}

/// Writes a volume; spacing and affine come from the volume, everything else from the template.
pub fn write_nifti(v: &Volume, template: &NiftiHeader, path: &Path, compress: bool) -> Result<()> {
    let mut h = template.clone();
    for k in 0..3 {
        h.pixdim[k + 1] = v.spacing[k] as f32;
    }
    if h.sform_code > 0 {
        for r in 0..3 {
            for c in 0..4 {
                h.srow[r][c] = v.affine[r][c] as f32;
            }
        }
    }
    write_bytes(path, &encode_nifti(&v.dims(), v.data(), &h)?, compress)
}

/// Masks are always stored as uint8 {0, 1}.
pub fn write_mask(
    m: &MaskVolume,
    template: &NiftiHeader,
    path: &Path,
    compress: bool,
) -> Result<()> {
    let mut h = template.clone();
    h.datatype = Datatype::U8.code();
    h.scl_slope = 1.0;
    h.scl_inter = 0.0;
    write_bytes(path, &encode_nifti(&m.dims(), &m.as_f64(), &h)?, compress)
}

fn image_to_volume(img: NiftiImage) -> Result<(Volume, NiftiHeader)> {
    if img.shape.iter().skip(3).any(|&d| d != 1) {
        return Err(Error::InvalidDims(img.header.dims3()?));
    }
    let dims = img.header.dims3()?;
    let mut v = Volume::new(dims, img.data)?;
    v.spacing = img.header.spacing();
    v.affine = img.header.affine();
    Ok((v, img.header))
}

pub fn read_volume(path: &Path) -> Result<(Volume, NiftiHeader)> {
    image_to_volume(read_nifti(path)?)
}

/// Any nonzero sample is inside the mask.
pub fn read_mask(path: &Path) -> Result<(MaskVolume, NiftiHeader)> {
    let (v, h) = read_volume(path)?;
    Ok((MaskVolume::from_nonzero(v.dims(), v.data())?, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    T1n,
    T1c,
    T2w,
    Flair,
    Mask,
    MaskHealthy,
    MaskUnhealthy,
    Voided,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::T1n => "t1n",
            Role::T1c => "t1c",
            Role::T2w => "t2w",
            Role::Flair => "flair",
            Role::Mask => "mask",
            Role::MaskHealthy => "mask-healthy",
            Role::MaskUnhealthy => "mask-unhealthy",
            Role::Voided => "voided",
        }
    }

    fn modality(self) -> Option<Modality> {
        match self {
            Role::T1n => Some(Modality::T1n),
            Role::T1c => Some(Modality::T1c),
            Role::T2w => Some(Modality::T2w),
            Role::Flair => Some(Modality::Flair),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Inpaint,
    Synth,
}

/// Maps filename suffixes inside one case directory to roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLayout {
    pub dir: PathBuf,
    pub roles: BTreeMap<String, Role>,
    #[serde(default)]
    pub pad_to_even: bool,
}

impl CaseLayout {
    /// The conventional `-<role>.nii.gz` suffix for every role.
    pub fn standard(dir: impl Into<PathBuf>, pad_to_even: bool) -> Self {
        let roles = [
            Role::T1n,
            Role::T1c,
            Role::T2w,
            Role::Flair,
            Role::Mask,
            Role::MaskHealthy,
            Role::MaskUnhealthy,
            Role::Voided,
        ]
        .into_iter()
        .map(|r| (format!("-{}.nii.gz", r.name()), r))
        .collect();
        Self {
            dir: dir.into(),
            roles,
            pad_to_even,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let layout: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in self.roles.values() {
            if !seen.insert(*r) {
                return Err(Error::InvalidLayout(format!(
                    "role {} mapped twice",
                    r.name()
                )));
            }
        }
        Ok(())
    }

    /// Existing file for each role. A longer suffix wins when several match one file.
    pub fn resolve(&self) -> Result<BTreeMap<Role, PathBuf>> {
        self.validate()?;
        let mut names: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut suffixes: Vec<(&String, &Role)> = self.roles.iter().collect();
        suffixes.sort_by_key(|(s, _)| std::cmp::Reverse(s.len()));
        let mut found = BTreeMap::new();
        for name in &names {
            if let Some((_, role)) = suffixes.iter().find(|(s, _)| name.ends_with(s.as_str())) {
                found.entry(**role).or_insert_with(|| self.dir.join(name));
            }
        }
        Ok(found)
    }
}

/// Loads and normalizes one case, checking the roles the task needs.
pub fn load_case(layout: &CaseLayout, task: Task) -> Result<Case> {
    let files = layout.resolve()?;
    match task {
        Task::Inpaint => {
            if !files.contains_key(&Role::MaskHealthy) {
                return Err(Error::MissingRole(Role::MaskHealthy.name().into()));
            }
            if !files.contains_key(&Role::Voided) && !files.contains_key(&Role::T1n) {
                return Err(Error::MissingRole(Role::Voided.name().into()));
            }
        }
        Task::Synth => {
            let absent: Vec<&str> = Modality::ALL
                .iter()
                .map(|m| match m {
                    Modality::T1n => Role::T1n,
                    Modality::T1c => Role::T1c,
                    Modality::T2w => Role::T2w,
                    Modality::Flair => Role::Flair,
                })
                .filter(|r| !files.contains_key(r))
                .map(Role::name)
                .collect();
            if absent.len() > 1 {
                return Err(Error::MissingRole(absent.join(",")));
            }
        }
    }
    let mut case = Case {
        id: layout
            .dir
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ..Default::default()
    };
    let prep = |v: Volume| {
        if layout.pad_to_even {
            pad_to_even(&v)
        } else {
            (v, [0, 0, 0])
        }
    };
    let prep_mask = |m: MaskVolume| {
        if layout.pad_to_even {
            pad_mask_to_even(&m).0
        } else {
            m
        }
    };
    let mut pad = [0usize; 3];
    for (&role, path) in &files {
        match role {
            Role::MaskHealthy => case.healthy_mask = Some(prep_mask(read_mask(path)?.0)),
            Role::MaskUnhealthy => case.unhealthy_mask = Some(prep_mask(read_mask(path)?.0)),
            Role::Mask => case.full_mask = Some(prep_mask(read_mask(path)?.0)),
            Role::Voided | Role::T1n | Role::T1c | Role::T2w | Role::Flair => {
                let (raw, _) = read_volume(path)?;
                if case.brain_mask.is_none() && role != Role::Voided {
                    case.brain_mask =
                        Some(prep_mask(MaskVolume::from_nonzero(raw.dims(), raw.data())?));
                }
                let (norm, params) = normalize_volume(&raw, DEFAULT_LO_PCT, DEFAULT_HI_PCT)?;
                let (v, p) = prep(norm);
                pad = p;
                match role.modality() {
                    Some(m) => {
                        case.modalities[m.index()] = Some(v);
                        case.norm[m.index()] = Some(params);
                    }
                    None => {
                        case.voided = Some(v);
                        case.voided_norm = Some(params);
                    }
                }
            }
        }
    }
    case.pad = pad;
    case.dims()?;
    Ok(case)
}

pub fn voxel_bytes(dims: Dims, dt: Datatype) -> usize {
    voxel_count(dims) * dt.bytes()
}
