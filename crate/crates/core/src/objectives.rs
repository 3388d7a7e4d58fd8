//! Training losses, evaluated on wavelet coefficients.
//!
//! Squared norms are means over *all* elements, including the masked terms:
//! `mean((m ⊙ r)^2)` divides by the total element count, not by `|m|`.
//!
//! Masks are coefficient grids with either one channel (broadcast over every
//! data channel) or as many channels as the data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::{SubbandStack, SUBBANDS};

pub const DEFAULT_LAMBDA1: f64 = 10.0;
pub const GLOBAL_MODALITIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Plain reconstruction MSE.
    D,
    /// MSE plus weighted MSE on the union of healthy and unhealthy masks.
    DC,
    /// MSE plus weighted MSE on the healthy mask; only that region is noised.
    AK,
    /// MSE outside the unhealthy mask plus weighted MSE on the healthy mask.
    AKH,
    /// Joint MSE over all four modalities.
    Dg,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::D,
        Objective::DC,
        Objective::AK,
        Objective::AKH,
        Objective::Dg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::D => "D",
            Objective::DC => "DC",
            Objective::AK => "AK",
            Objective::AKH => "AKH",
            Objective::Dg => "Dg",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Objective::ALL
            .into_iter()
            .find(|o| {
                o.name().eq_ignore_ascii_case(s)
                    || (s.eq_ignore_ascii_case("D_g") && *o == Objective::Dg)
            })
            .ok_or_else(|| format!("unknown objective {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64) -> Result<Self> {
        if !(lambda1.is_finite() && lambda1 >= 0.0) {
            return Err(Error::InvalidParams {
                lo: 0.0,
                hi: lambda1,
            });
        }
        Ok(Self { lambda1 })
    }
}

/// Per-element mask lookup with single-channel broadcast.
struct MaskView<'a> {
    mask: &'a SubbandStack,
    voxels: usize,
}

impl<'a> MaskView<'a> {
    fn new(mask: &'a SubbandStack, data: &SubbandStack) -> Result<Self> {
        if mask.dims() != data.dims()
            || !(mask.channels() == 1 || mask.channels() == data.channels())
        {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{:?} vs data {}x{:?}",
                mask.channels(),
                mask.dims(),
                data.channels(),
                data.dims()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask);
        }
        Ok(Self {
            mask,
            voxels: data.voxels(),
        })
    }

    #[inline]
    fn at(&self, element: usize) -> f64 {
        if self.mask.channels() == 1 {
            self.mask.data()[element % self.voxels]
        } else {
            self.mask.data()[element]
        }
    }
}

type Multipliers<'a> = Box<dyn Fn(usize) -> (f64, f64) + 'a>;

/// Per-element `(base, roi)` multipliers: the loss is
/// `mean((base ⊙ r)^2) + lambda1 * mean((roi ⊙ r)^2)`.
fn multipliers<'a>(
    objective: Objective,
    x0: &SubbandStack,
    m_h: Option<&'a SubbandStack>,
    m_uh: Option<&'a SubbandStack>,
) -> Result<Multipliers<'a>> {
    let need = |m: Option<&'a SubbandStack>, which: &'static str| -> Result<MaskView<'a>> {
        MaskView::new(m.ok_or(Error::MissingMask(which))?, x0)
    };
    Ok(match objective {
        Objective::D | Objective::Dg => Box::new(|_| (1.0, 0.0)),
        Objective::DC => {
            let h = need(m_h, "DC")?;
            let u = need(m_uh, "DC")?;
            Box::new(move |e| (1.0, h.at(e).max(u.at(e))))
        }
        Objective::AK => {
            let h = need(m_h, "AK")?;
            Box::new(move |e| (1.0, h.at(e)))
        }
        Objective::AKH => {
            let h = need(m_h, "AKH")?;
            let u = need(m_uh, "AKH")?;
            Box::new(move |e| (1.0 - u.at(e), h.at(e)))
        }
    })
}

fn residual(x0_hat: &SubbandStack, x0: &SubbandStack) -> Result<Vec<f64>> {
    x0_hat.check_same_shape(x0)?;
    Ok(x0_hat
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| a - b)
        .collect())
}

/// Local-task loss for `D`, `DC`, `AK` or `AKH`.
pub fn loss_local(
    objective: Objective,
    x0_hat: &SubbandStack,
    x0: &SubbandStack,
    m_h: Option<&SubbandStack>,
    m_uh: Option<&SubbandStack>,
    w: LossWeights,
) -> Result<f64> {
    if objective == Objective::Dg {
        return Err(Error::ChannelContractMismatch(
            "Dg is a global objective; use loss_global".into(),
        ));
    }
    let r = residual(x0_hat, x0)?;
    let mult = multipliers(objective, x0, m_h, m_uh)?;
    let n = r.len() as f64;
    let (mut base, mut roi) = (0.0, 0.0);
    for (e, &re) in r.iter().enumerate() {
        let (b, m) = mult(e);
        base += (b * re).powi(2);
        roi += (m * re).powi(2);
    }
    Ok(base / n + w.lambda1 * roi / n)
}

/// Joint MSE over a 4-modality coefficient stack (4 × 8 channels).
pub fn loss_global(a0_hat: &SubbandStack, a0: &SubbandStack) -> Result<f64> {
    if a0.channels() != GLOBAL_MODALITIES * SUBBANDS {
        return Err(Error::WrongModalityCount(a0.channels() / SUBBANDS));
    }
    let r = residual(a0_hat, a0)?;
    Ok(r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64)
}

/// Loss for any objective. `Dg` ignores masks.
pub fn objective_loss(
    objective: Objective,
    x0_hat: &SubbandStack,
    x0: &SubbandStack,
    m_h: Option<&SubbandStack>,
    m_uh: Option<&SubbandStack>,
    w: LossWeights,
) -> Result<f64> {
    match objective {
        Objective::Dg => loss_global(x0_hat, x0),
        _ => loss_local(objective, x0_hat, x0, m_h, m_uh, w),
    }
}

/// Gradient of [`objective_loss`] with respect to `x0_hat`.
pub fn objective_grad(
    objective: Objective,
    x0_hat: &SubbandStack,
    x0: &SubbandStack,
    m_h: Option<&SubbandStack>,
    m_uh: Option<&SubbandStack>,
    w: LossWeights,
) -> Result<Vec<f64>> {
    if objective == Objective::Dg && x0.channels() != GLOBAL_MODALITIES * SUBBANDS {
        return Err(Error::WrongModalityCount(x0.channels() / SUBBANDS));
    }
    let r = residual(x0_hat, x0)?;
    let mult = multipliers(objective, x0, m_h, m_uh)?;
    let n = r.len() as f64;
    Ok(r.iter()
        .enumerate()
        .map(|(e, &re)| {
            let (b, m) = mult(e);
            2.0 * (b * b + w.lambda1 * m * m) * re / n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, c: usize) -> SubbandStack {
        let d = [2, 3, 2];
        SubbandStack::new(
            c,
            d,
            (0..c * 12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng) -> SubbandStack {
        SubbandStack::new(
            1,
            [2, 3, 2],
            (0..12)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect(),
        )
        .unwrap()
    }

    fn offset(x: &SubbandStack, c: f64) -> SubbandStack {
        x.with_data(x.data().iter().map(|v| v + c).collect())
            .unwrap()
    }

    #[test]
    fn zero_residual_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_stack(&mut rng, 8);
        let (h, u) = (random_mask(&mut rng), random_mask(&mut rng));
        for o in [Objective::D, Objective::DC, Objective::AK, Objective::AKH] {
            assert_eq!(
                loss_local(o, &x, &x, Some(&h), Some(&u), LossWeights::default()).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn dc_full_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_stack(&mut rng, 8);
        let c = 0.3;
        let y = offset(&x, c);
        let ones = SubbandStack::filled(1, [2, 3, 2], 1.0).unwrap();
        let zeros = SubbandStack::zeros(1, [2, 3, 2]).unwrap();
        let w = LossWeights::default();
        let full = loss_local(Objective::DC, &y, &x, Some(&ones), Some(&zeros), w).unwrap();
        assert!((full - 11.0 * c * c).abs() < 1e-12);
        let z = random_stack(&mut rng, 8);
        let d = loss_local(Objective::D, &z, &x, None, None, w).unwrap();
        let dc = loss_local(Objective::DC, &z, &x, Some(&zeros), Some(&zeros), w).unwrap();
        assert_eq!(d, dc);
    }

    #[test]
    fn akh_ignores_everything_when_fully_unhealthy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (random_stack(&mut rng, 8), random_stack(&mut rng, 8));
        let ones = SubbandStack::filled(1, [2, 3, 2], 1.0).unwrap();
        let zeros = SubbandStack::zeros(1, [2, 3, 2]).unwrap();
        let l = loss_local(
            Objective::AKH,
            &y,
            &x,
            Some(&zeros),
            Some(&ones),
            LossWeights::default(),
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn missing_masks_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_stack(&mut rng, 8);
        let w = LossWeights::default();
        assert!(matches!(
            loss_local(Objective::AK, &x, &x, None, None, w),
            Err(Error::MissingMask(_))
        ));
        assert!(matches!(
            loss_local(Objective::DC, &x, &x, Some(&random_mask(&mut rng)), None, w),
            Err(Error::MissingMask(_))
        ));
        let other = random_stack(&mut rng, 4);
        assert!(matches!(
            loss_local(Objective::D, &x, &other, None, None, w),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            loss_global(&x, &x),
            Err(Error::WrongModalityCount(1))
        ));
    }

    #[test]
    fn global_single_modality_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = random_stack(&mut rng, 32);
        let mut hat = a0.clone();
        let c = 0.7;
        for ch in 16..24 {
            for v in hat.channel_mut(ch) {
                *v += c;
            }
        }
        assert!((loss_global(&hat, &a0).unwrap() - c * c / 4.0).abs() < 1e-12);
        let d = loss_local(Objective::D, &hat, &a0, None, None, LossWeights::default()).unwrap();
        assert_eq!(d, loss_global(&hat, &a0).unwrap());
    }

    #[test]
    fn lambda_monotone_and_union_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (x, y) = (random_stack(&mut rng, 8), random_stack(&mut rng, 8));
            let (h, u) = (random_mask(&mut rng), random_mask(&mut rng));
            let mut prev = -1.0;
            for lam in [0.0, 0.5, 1.0, 10.0, 100.0] {
                let l = loss_local(
                    Objective::AKH,
                    &y,
                    &x,
                    Some(&h),
                    Some(&u),
                    LossWeights::new(lam).unwrap(),
                )
                .unwrap();
                assert!(l >= prev && l >= 0.0);
                prev = l;
            }
            // masked term on the union = on m_h + on m_uh - on the intersection
            let masked = |m: &SubbandStack| {
                let z = SubbandStack::zeros(1, [2, 3, 2]).unwrap();
                loss_local(
                    Objective::DC,
                    &y,
                    &x,
                    Some(m),
                    Some(&z),
                    LossWeights::new(1.0).unwrap(),
                )
                .unwrap()
                    - loss_local(Objective::D, &y, &x, None, None, LossWeights::default()).unwrap()
            };
            let union = loss_local(
                Objective::DC,
                &y,
                &x,
                Some(&h),
                Some(&u),
                LossWeights::new(1.0).unwrap(),
            )
            .unwrap()
                - loss_local(Objective::D, &y, &x, None, None, LossWeights::default()).unwrap();
            let inter = h
                .with_data(h.data().iter().zip(u.data()).map(|(a, b)| a * b).collect())
                .unwrap();
            assert!((union - (masked(&h) + masked(&u) - masked(&inter))).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = LossWeights::default();
        for o in Objective::ALL {
            let c = if o == Objective::Dg { 32 } else { 8 };
            let (x, y) = (random_stack(&mut rng, c), random_stack(&mut rng, c));
            let (h, u) = (random_mask(&mut rng), random_mask(&mut rng));
            let g = objective_grad(o, &y, &x, Some(&h), Some(&u), w).unwrap();
            for e in (0..y.len()).step_by(7) {
                let eps = 1e-6;
                let mut p = y.clone();
                p.data_mut()[e] += eps;
                let mut m = y.clone();
                m.data_mut()[e] -= eps;
                let fd = (objective_loss(o, &p, &x, Some(&h), Some(&u), w).unwrap()
                    - objective_loss(o, &m, &x, Some(&h), Some(&u), w).unwrap())
                    / (2.0 * eps);
                assert!(
                    (fd - g[e]).abs() <= 1e-6 * fd.abs().max(1e-3),
                    "{o:?} e={e}: {fd} vs {}",
                    g[e]
                );
            }
        }
    }
}
