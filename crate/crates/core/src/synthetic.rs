//! Procedural four-contrast brain phantoms with a lesion, for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::maskgen::{generate_blob_mask, BlobParams};
use crate::volume::{voxel_count, Dims, MaskVolume, Modality, Volume};

/// Zero-mean, unit-peak smooth random field.
pub fn smooth_field(rng: &mut impl Rng, d: Dims, passes: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..voxel_count(d))
        .map(|_| rng.sample(StandardNormal))
        .collect();
    for _ in 0..passes {
        for axis in 0..3 {
            let stride = [1, d[0], d[0] * d[1]][axis];
            let src = f.clone();
            for (i, v) in f.iter_mut().enumerate() {
                let p = (i / stride) % d[axis];
                let lo = if p > 0 { src[i - stride] } else { src[i] };
                let hi = if p + 1 < d[axis] {
                    src[i + stride]
                } else {
                    src[i]
                };
                *v = (lo + src[i] + hi) / 3.0;
            }
        }
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let peak = f.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    f.iter()
        .map(|v| if peak > 0.0 { (v - mean) / peak } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Source-unit intensities in modality order; zero outside the brain.
    pub modalities: [Volume; 4],
    pub brain: MaskVolume,
    pub lesion: MaskVolume,
}

/// Lesion contrast relative to tissue, per modality.
const LESION_CONTRAST: [f64; 4] = [-0.35, 0.6, 0.8, 0.7];
const TISSUE_BASE: [f64; 4] = [600.0, 650.0, 400.0, 350.0];
const TISSUE_SWING: [f64; 4] = [200.0, 180.0, -150.0, 120.0];

pub fn phantom(seed: u64, d: Dims) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: [f64; 3] = std::array::from_fn(|k| (d[k] as f64 - 1.0) / 2.0);
    let semi: [f64; 3] = std::array::from_fn(|k| 0.42 * d[k] as f64);
    let brain = MaskVolume::from_fn(d, |x, y, z| {
        let p = [x, y, z];
        (0..3)
            .map(|k| ((p[k] as f64 - c[k]) / semi[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    })?;
    let texture = smooth_field(&mut rng, d, 3);
    let detail = smooth_field(&mut rng, d, 1);

    let r = 0.12 * d.iter().copied().min().unwrap_or(1) as f64;
    let blob = generate_blob_mask(
        &mut rng,
        &BlobParams {
            size_range_mm: (r.max(1.0), (1.4 * r).max(1.0)),
            roughness: 0.2,
            ..Default::default()
        },
    )?;
    let bd = blob.dims();
    // lesion center offset toward one hemisphere, kept inside the brain core
    let center: [usize; 3] = std::array::from_fn(|k| {
        let shift = rng.random_range(-0.15..0.15) * d[k] as f64;
        (c[k] + shift).round() as usize
    });
    let lesion = MaskVolume::from_fn(d, |x, y, z| {
        let p = [x, y, z];
        let q: Option<[usize; 3]> = (0..3)
            .map(|k| {
                (p[k] + (bd[k] - 1) / 2)
                    .checked_sub(center[k])
                    .filter(|&v| v < bd[k])
            })
            .collect::<Option<Vec<_>>>()
            .map(|v| [v[0], v[1], v[2]]);
        q.is_some_and(|q| blob.get(q[0], q[1], q[2])) && brain.get(x, y, z)
    })?;

    let modalities = Modality::ALL.map(|m| {
        let i = m.index();
        Volume::from_fn(d, |x, y, z| {
            if !brain.get(x, y, z) {
                return 0.0;
            }
            let j = x + d[0] * (y + d[1] * z);
            let tissue = TISSUE_BASE[i] + TISSUE_SWING[i] * texture[j] + 25.0 * detail[j];
            if lesion.get(x, y, z) {
                tissue * (1.0 + LESION_CONTRAST[i])
            } else {
                tissue
            }
        })
        .expect("phantom dims are valid")
    });
    Ok(Phantom {
        modalities,
        brain,
        lesion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_plausible() {
        let a = phantom(3, [16, 16, 16]).unwrap();
        let b = phantom(3, [16, 16, 16]).unwrap();
        assert_eq!(a.modalities[0], b.modalities[0]);
        assert_eq!(a.lesion, b.lesion);
        assert!(a.lesion.count() > 0);
        assert_eq!(a.lesion.difference(&a.brain).unwrap().count(), 0);
        for v in &a.modalities {
            assert!(v.data().iter().all(|&x| x >= 0.0));
            assert!(v.min_max().1 > 0.0);
        }
        assert!(phantom(4, [16, 16, 16]).unwrap().modalities[0] != a.modalities[0]);
    }

    #[test]
    fn field_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = smooth_field(&mut rng, [6, 5, 4], 2);
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(f.iter().sum::<f64>().abs() < 1e-9);
    }
}
