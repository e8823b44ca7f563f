//! Gamma/exposure domain transforms and the μ-law tonemap.
//!
//! Arithmetic runs in `f64`; results are stored as `f32`.

use crate::error::{Error, Result};
use crate::tensorio::{ExposureFrame, ImagePlane};

pub const DEFAULT_MU: f64 = 5000.0;

/// Compression strength of the μ-law curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapConfig {
    pub mu: f64,
}

impl Default for TonemapConfig {
    fn default() -> Self {
        TonemapConfig { mu: DEFAULT_MU }
    }
}

impl TonemapConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")));
        }
        Ok(TonemapConfig { mu })
    }
}

fn check_exposure(e: f64) -> Result<()> {
    if !(e > 0.0) || !e.is_finite() {
        return Err(Error::NonPositiveExposure(e));
    }
    Ok(())
}

fn check_gamma(g: f64) -> Result<()> {
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::NonPositiveGamma(g));
    }
    Ok(())
}

/// `L^γ / e` for one value.
#[inline]
pub fn linearize(l: f64, exposure: f64, gamma: f64) -> f64 {
    l.max(0.0).powf(gamma) / exposure
}

/// `(I·e)^{1/γ}` before clipping.
#[inline]
pub fn delinearize_raw(i: f64, exposure: f64, gamma: f64) -> f64 {
    (i.max(0.0) * exposure).powf(1.0 / gamma)
}

/// Exposure-normalized value before the `[0, 1]` clip.
#[inline]
pub fn normalize_raw(l: f64, source: f64, target: f64, gamma: f64) -> f64 {
    delinearize_raw(linearize(l, source, gamma), target, gamma)
}

/// LDR frame to the linear HDR domain.
pub fn ldr_to_hdr(frame: &ExposureFrame) -> Result<ImagePlane> {
    check_exposure(frame.exposure)?;
    check_gamma(frame.gamma)?;
    Ok(frame
        .image
        .map(|l| linearize(l as f64, frame.exposure, frame.gamma) as f32))
}

/// Linear HDR back to LDR at `exposure`, clipped to `[0, 1]`.
pub fn hdr_to_ldr(image: &ImagePlane, exposure: f64, gamma: f64) -> Result<ImagePlane> {
    check_exposure(exposure)?;
    check_gamma(gamma)?;
    Ok(image.map(|i| delinearize_raw(i as f64, exposure, gamma).clamp(0.0, 1.0) as f32))
}

/// Re-expose an LDR frame as if captured at `target` exposure.
pub fn exposure_normalize(frame: &ExposureFrame, target: f64) -> Result<ImagePlane> {
    check_exposure(frame.exposure)?;
    check_exposure(target)?;
    check_gamma(frame.gamma)?;
    if target == frame.exposure {
        return Ok(frame.image.map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(frame
        .image
        .map(|l| normalize_raw(l as f64, frame.exposure, target, frame.gamma).clamp(0.0, 1.0) as f32))
}

#[inline]
pub fn mu_law(h: f64, mu: f64) -> f64 {
    (mu * h).ln_1p() / mu.ln_1p()
}

#[inline]
pub fn mu_law_derivative(h: f64, mu: f64) -> f64 {
    mu / ((1.0 + mu * h) * mu.ln_1p())
}

#[inline]
pub fn mu_law_inverse(t: f64, mu: f64) -> f64 {
    (t * mu.ln_1p()).exp_m1() / mu
}

fn check_nonnegative(image: &ImagePlane) -> Result<()> {
    match image.data().iter().find(|v| **v < 0.0) {
        Some(&v) => Err(Error::NegativeInput(v as f64)),
        None => Ok(()),
    }
}

pub fn tonemap_mu(image: &ImagePlane, cfg: TonemapConfig) -> Result<ImagePlane> {
    check_nonnegative(image)?;
    Ok(image.map(|h| mu_law(h as f64, cfg.mu) as f32))
}

pub fn tonemap_mu_derivative(image: &ImagePlane, cfg: TonemapConfig) -> Result<ImagePlane> {
    check_nonnegative(image)?;
    Ok(image.map(|h| mu_law_derivative(h as f64, cfg.mu) as f32))
}

pub fn inverse_tonemap_mu(image: &ImagePlane, cfg: TonemapConfig) -> Result<ImagePlane> {
    check_nonnegative(image)?;
    Ok(image.map(|t| mu_law_inverse(t as f64, cfg.mu) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(v: f32, e: f64) -> ExposureFrame {
        ExposureFrame::with_default_gamma(ImagePlane::filled(1, 1, 1, v), e).unwrap()
    }

    fn first(img: &ImagePlane) -> f32 {
        img.data()[0]
    }

    #[test]
    fn ldr_to_hdr_cases() {
        assert_eq!(first(&ldr_to_hdr(&frame(1.0, 1.0)).unwrap()), 1.0);
        assert_eq!(first(&ldr_to_hdr(&frame(0.0, 4.0)).unwrap()), 0.0);
        // 0.5^2.2 / 4 evaluated through exp/ln rather than powf.
        let oracle = (2.2 * 0.5f64.ln()).exp() / 4.0;
        let got = first(&ldr_to_hdr(&frame(0.5, 4.0)).unwrap()) as f64;
        assert!((got - oracle).abs() <= oracle * 1e-7);
    }

    #[test]
    fn exposure_errors() {
        let mut f = frame(0.5, 1.0);
        f.exposure = 0.0;
        assert!(matches!(ldr_to_hdr(&f), Err(Error::NonPositiveExposure(_))));
        assert!(matches!(
            exposure_normalize(&frame(0.5, 1.0), -1.0),
            Err(Error::NonPositiveExposure(_))
        ));
    }

    #[test]
    fn exposure_normalize_cases() {
        let img = ImagePlane::from_fn(4, 4, 3, |y, x, c| ((y * 16 + x * 3 + c) % 17) as f32 / 16.0);
        let f = ExposureFrame::with_default_gamma(img.clone(), 4.0).unwrap();
        assert!(exposure_normalize(&f, 4.0).unwrap().bit_eq(&img));
        assert_eq!(first(&exposure_normalize(&frame(1.0, 1.0), 4.0).unwrap()), 1.0);
        let oracle = 0.5 / (4.0f64.ln() / 2.2).exp();
        let got = first(&exposure_normalize(&frame(0.5, 4.0), 1.0).unwrap()) as f64;
        assert!((got - oracle).abs() <= oracle * 1e-7);
    }

    #[test]
    fn tonemap_cases() {
        let cfg = TonemapConfig::default();
        let t = |h: f32| first(&tonemap_mu(&ImagePlane::filled(1, 1, 1, h), cfg).unwrap()) as f64;
        assert_eq!(t(0.0), 0.0);
        assert_eq!(t(1.0), 1.0);
        let oracle = 2f64.ln() / 5001f64.ln();
        assert!((t(1.0 / 5000.0) - oracle).abs() < 1e-7);
        assert!(matches!(
            tonemap_mu(&ImagePlane::filled(1, 1, 1, -0.1), cfg),
            Err(Error::NegativeInput(_))
        ));
        assert!(TonemapConfig::new(0.0).is_err());
    }

    #[test]
    fn tonemap_derivative_at_zero() {
        let oracle = 5000.0 / 5001f64.ln();
        assert!((mu_law_derivative(0.0, 5000.0) - oracle).abs() < 1e-12 * oracle);
    }

    proptest! {
        #[test]
        fn ldr_hdr_round_trip(l in 0f32..=1.0, e in 1.0f64..8.0) {
            let i = first(&ldr_to_hdr(&frame(l, e)).unwrap());
            let back = delinearize_raw(i as f64, e, 2.2);
            prop_assert!((back - l as f64).abs() <= 1e-5);
        }

        #[test]
        fn normalize_inverse_without_clipping(l in 0f32..=1.0, e1 in 1.0f64..8.0, e2 in 1.0f64..8.0) {
            let raw = normalize_raw(l as f64, e1, e2, 2.2);
            prop_assume!(raw <= 1.0);
            let mid = exposure_normalize(&frame(l, e1), e2).unwrap();
            let back = exposure_normalize(&frame(first(&mid), e2), e1).unwrap();
            prop_assert!((first(&back) - l).abs() <= 1e-5);
        }

        #[test]
        fn normalize_idempotent_for_same_exposure(l in 0f32..=1.0, e in 1.0f64..8.0) {
            let once = exposure_normalize(&frame(l, e), e).unwrap();
            let twice = exposure_normalize(&frame(first(&once), e), e).unwrap();
            prop_assert_eq!(first(&once).to_bits(), first(&twice).to_bits());
        }

        #[test]
        fn tonemap_monotone_and_invertible(a in 0f64..=1.0, b in 0f64..=1.0) {
            prop_assume!(a < b);
            prop_assert!(mu_law(a, DEFAULT_MU) < mu_law(b, DEFAULT_MU));
            let cfg = TonemapConfig::default();
            let img = ImagePlane::filled(1, 1, 1, a as f32);
            let back = inverse_tonemap_mu(&tonemap_mu(&img, cfg).unwrap(), cfg).unwrap();
            prop_assert!((first(&back) as f64 - a as f32 as f64).abs() <= 1e-5);
        }

        #[test]
        fn tonemap_derivative_matches_finite_difference(h in 1e-3f64..1.0) {
            let step = 1e-6 * h.max(1e-3);
            let numeric = (mu_law(h + step, DEFAULT_MU) - mu_law(h - step, DEFAULT_MU)) / (2.0 * step);
            let analytic = mu_law_derivative(h, DEFAULT_MU);
            prop_assert!(analytic > 0.0);
            prop_assert!((numeric - analytic).abs() <= 1e-5 * analytic);
        }
    }
}
