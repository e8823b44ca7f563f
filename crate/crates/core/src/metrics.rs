//! Image quality metrics in the linear and μ-law domains, flow warping
//! quality and per-sequence reports.

use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exposure::{exposure_normalize, mu_law};
use crate::stage1::backward_warp;
use crate::tensorio::{read_pfm, ExposureFrame, FlowField, ImagePlane, SequenceManifest};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Pixels excluded at each side when scoring warped frames.
pub const WARP_BORDER: usize = 8;

fn check_same(a: &ImagePlane, b: &ImagePlane, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// PSNR over two equally long value lists.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

fn values(img: &ImagePlane) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    check_same(a, b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!("psnr peak must be positive, got {peak}")));
    }
    Ok(psnr_values(&values(a), &values(b), peak))
}

fn tonemapped(img: &ImagePlane, mu: f64) -> Result<Vec<f64>> {
    img.data()
        .iter()
        .map(|&v| {
            if v < 0.0 {
                Err(Error::NegativeInput(v as f64))
            } else {
                Ok(mu_law(v as f64, mu))
            }
        })
        .collect()
}

/// PSNR after μ-law tonemapping both images.
pub fn psnr_t(a: &ImagePlane, b: &ImagePlane, mu: f64) -> Result<f64> {
    check_same(a, b, "psnr_t")?;
    Ok(psnr_values(&tonemapped(a, mu)?, &tonemapped(b, mu)?, 1.0))
}

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h × w` channel.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean luminance and contrast-structure terms of single-channel SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    pub contrast_structure: f64,
}

/// SSIM of one channel. Images narrower than the window use the largest odd
/// window that fits.
pub fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> SsimParts {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size.max(1));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len() as f64;
    let (mut total, mut cs_total) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        cs_total += cs;
        total += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
    }
    SsimParts {
        ssim: total / n,
        contrast_structure: cs_total / n,
    }
}

fn channel_values(img: &ImagePlane, c: usize, map: &dyn Fn(f64) -> f64) -> Vec<f64> {
    img.data()
        .iter()
        .skip(c)
        .step_by(img.channels())
        .map(|&v| map(v as f64))
        .collect()
}

fn ssim_mapped(a: &ImagePlane, b: &ImagePlane, map: &dyn Fn(f64) -> f64) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (h, w, c) = a.dims();
    let total: f64 = (0..c)
        .map(|ch| ssim_channel(&channel_values(a, ch, map), &channel_values(b, ch, map), h, w).ssim)
        .sum();
    Ok(total / c as f64)
}

/// Single-scale Gaussian SSIM averaged over channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    ssim_mapped(a, b, &|v| v)
}

/// SSIM after μ-law tonemapping both images.
pub fn ssim_t(a: &ImagePlane, b: &ImagePlane, mu: f64) -> Result<f64> {
    tonemapped(a, mu)?;
    tonemapped(b, mu)?;
    ssim_mapped(a, b, &|v| mu_law(v, mu))
}

fn crop(img: &ImagePlane, border: usize) -> ImagePlane {
    let (h, w, c) = img.dims();
    if h <= 2 * border || w <= 2 * border {
        return img.clone();
    }
    ImagePlane::from_fn(h - 2 * border, w - 2 * border, c, |y, x, ch| img.get(y + border, x + border, ch))
}

/// PSNR and SSIM of a warped LDR frame against its exposure-matched target,
/// ignoring an 8-pixel border.
pub fn warping_quality(warped: &ImagePlane, target: &ImagePlane) -> Result<(f64, f64)> {
    check_same(warped, target, "warping quality")?;
    let (a, b) = (crop(warped, WARP_BORDER), crop(target, WARP_BORDER));
    Ok((psnr(&a, &b, 1.0)?, ssim(&a, &b)?))
}

/// Mean interior warping PSNR of both neighbours against the reference
/// re-exposed to the neighbour exposure.
pub fn window_warp_psnr(frames: &[ExposureFrame; 3], prev: &FlowField, next: &FlowField) -> Result<f64> {
    let mut total = 0.0;
    for (nb, flow) in [(&frames[0], prev), (&frames[2], next)] {
        let target = exposure_normalize(&frames[1], nb.exposure)?;
        let warped = backward_warp(&nb.image, flow)?;
        total += warping_quality(&warped, &target)?.0;
    }
    Ok(total / 2.0)
}

/// Scores of one reconstructed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub psnr_l: f64,
    pub ssim_l: f64,
    pub epe: Option<f64>,
    pub warp_psnr: Option<f64>,
}

/// Scores `result` against `gt` in both domains.
pub fn frame_metrics(frame: usize, result: &ImagePlane, gt: &ImagePlane, mu: f64) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        frame,
        psnr_t: psnr_t(result, gt, mu)?,
        ssim_t: ssim_t(result, gt, mu)?,
        psnr_l: psnr(result, gt, 1.0)?,
        ssim_l: ssim(result, gt)?,
        epe: None,
        warp_psnr: None,
    })
}

/// Means over the finite per-frame values; `None` when no frame has one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr_t: Option<f64>,
    pub ssim_t: Option<f64>,
    pub psnr_l: Option<f64>,
    pub ssim_l: Option<f64>,
    pub epe: Option<f64>,
    pub warp_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub means: MetricMeans,
    pub psnr_cap_db: f64,
    pub mu: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten().filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn new(frames: Vec<FrameMetrics>, mu: f64) -> Self {
        let means = MetricMeans {
            psnr_t: mean_of(frames.iter().map(|f| Some(f.psnr_t))),
            ssim_t: mean_of(frames.iter().map(|f| Some(f.ssim_t))),
            psnr_l: mean_of(frames.iter().map(|f| Some(f.psnr_l))),
            ssim_l: mean_of(frames.iter().map(|f| Some(f.ssim_l))),
            epe: mean_of(frames.iter().map(|f| f.epe)),
            warp_psnr: mean_of(frames.iter().map(|f| f.warp_psnr)),
        };
        MetricReport {
            frames,
            means,
            psnr_cap_db: PSNR_CAP,
            mu,
        }
    }

    /// Tab-separated records, one per frame, under a commented header.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("# psnr_cap_db={} mu={}\n", self.psnr_cap_db, self.mu);
        s.push_str("frame\tpsnr_t\tssim_t\tpsnr_l\tssim_l\tepe\twarp_psnr\n");
        for f in &self.frames {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                f.frame,
                f.psnr_t,
                f.ssim_t,
                f.psnr_l,
                f.ssim_l,
                opt(f.epe),
                opt(f.warp_psnr)
            ));
        }
        let m = &self.means;
        s.push_str(&format!(
            "mean\t{}\t{}\t{}\t{}\t{}\t{}\n",
            opt(m.psnr_t),
            opt(m.ssim_t),
            opt(m.psnr_l),
            opt(m.ssim_l),
            opt(m.epe),
            opt(m.warp_psnr)
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// File stem used for every per-window output of centre frame `index`.
pub fn frame_stem(manifest: &SequenceManifest, index: usize) -> String {
    manifest.frames[index]
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("frame_{index:05}"))
}

/// HDR file of centre frame `index` inside `dir`.
pub fn hdr_path(dir: &Path, manifest: &SequenceManifest, index: usize) -> PathBuf {
    dir.join(format!("{}.pfm", frame_stem(manifest, index)))
}

/// Loads the ground-truth HDR of centre frame `index`.
pub fn load_ground_truth(gt_dir: &Path, manifest: &SequenceManifest, index: usize) -> Result<ImagePlane> {
    let path = hdr_path(gt_dir, manifest, index);
    if !path.is_file() {
        return Err(Error::MissingGroundTruth(path));
    }
    read_pfm(path)
}

/// Scores stored reconstructions `<results>/<stem>.pfm` against
/// `<gt>/<stem>.pfm` for every window centre of the manifest.
pub fn evaluate_results(
    manifest: &SequenceManifest,
    results_dir: &Path,
    gt_dir: &Path,
    mu: f64,
) -> Result<MetricReport> {
    let mut frames = Vec::new();
    for center in manifest.window_centers() {
        let path = hdr_path(results_dir, manifest, center);
        if !path.is_file() {
            return Err(Error::MissingResult(path));
        }
        let result = read_pfm(path)?;
        let gt = load_ground_truth(gt_dir, manifest, center)?;
        frames.push(frame_metrics(center, &result, &gt, mu)?);
    }
    Ok(MetricReport::new(frames, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exposure::{tonemap_mu, TonemapConfig, DEFAULT_MU};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImagePlane {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(h, w, 3, |_, _, _| r.random_range(0.1f32..0.9))
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(1, 8, 8);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let zero = ImagePlane::zeros(4, 4, 3);
        let v = psnr_values(&vec![0.0; 48], &vec![0.1; 48], 1.0);
        assert!((v - 20.0).abs() < 1e-9);
        let v = psnr_values(&vec![0.5; 48], &vec![0.51; 48], 1.0);
        assert!((v - 40.0).abs() < 1e-9);
        assert!(matches!(psnr(&zero, &ImagePlane::zeros(4, 5, 3), 1.0), Err(Error::DimMismatch(_))));
        assert!(psnr(&zero, &zero, 0.0).is_err());
    }

    #[test]
    fn psnr_t_is_psnr_after_tonemap() {
        let a = random_image(2, 12, 12);
        let b = random_image(3, 12, 12);
        let ta: Vec<f64> = a.data().iter().map(|&v| (5000.0 * v as f64).ln_1p() / 5001f64.ln()).collect();
        let tb: Vec<f64> = b.data().iter().map(|&v| (5000.0 * v as f64).ln_1p() / 5001f64.ln()).collect();
        let mse = ta.iter().zip(&tb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.len() as f64;
        let direct = 10.0 * (1.0 / mse).log10();
        assert!((psnr_t(&a, &b, 5000.0).unwrap() - direct).abs() < 1e-9);
        let cfg = TonemapConfig::default();
        let composed = psnr(&tonemap_mu(&a, cfg).unwrap(), &tonemap_mu(&b, cfg).unwrap(), 1.0).unwrap();
        assert!((composed - direct).abs() < 1e-4);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let a = random_image(4, 16, 16);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let pattern: Vec<f32> = (0..a.data().len()).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let scores: Vec<f64> = [0.005f32, 0.01, 0.02, 0.04, 0.08]
            .iter()
            .map(|&amp| {
                let mut data = a.data().to_vec();
                data.iter_mut().zip(&pattern).for_each(|(v, n)| *v += amp * n);
                psnr(&a, &ImagePlane::new(16, 16, 3, data).unwrap(), 1.0).unwrap()
            })
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(5, 20, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let zero = ImagePlane::zeros(16, 16, 1);
        let one = ImagePlane::filled(16, 16, 1, 1.0);
        let (c1, c2) = (1e-4, 9e-4);
        let oracle = (c1 * c2) / ((0.0 + 1.0 + c1) * (0.0 + c2));
        assert!((ssim(&zero, &one).unwrap() - oracle).abs() < 1e-12);
        let b = random_image(6, 20, 20);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = random_image(7, 6, 9);
        assert_eq!(ssim(&small, &small).unwrap(), 1.0);
    }

    #[test]
    fn ssim_contrast_structure_ignores_offsets() {
        let a = random_image(8, 18, 18);
        let b = random_image(9, 18, 18);
        let va = channel_values(&a, 0, &|v| v);
        let vb = channel_values(&b, 0, &|v| v);
        let shift = |v: &[f64]| v.iter().map(|x| x + 0.37).collect::<Vec<_>>();
        let base = ssim_channel(&va, &vb, 18, 18);
        let moved = ssim_channel(&shift(&va), &shift(&vb), 18, 18);
        assert!((base.contrast_structure - moved.contrast_structure).abs() < 1e-6);
        let same = ssim_channel(&va, &va, 18, 18);
        let same_moved = ssim_channel(&shift(&va), &shift(&va), 18, 18);
        assert!((same.ssim - same_moved.ssim).abs() < 1e-6);
    }

    #[test]
    fn warping_quality_cases() {
        let a = random_image(10, 24, 24);
        assert_eq!(warping_quality(&a, &a).unwrap().0, PSNR_CAP);
        let mut b = a.clone();
        b.set(0, 0, 0, 0.0);
        assert_eq!(warping_quality(&a, &b).unwrap().0, PSNR_CAP);
        b.set(12, 12, 0, 0.0);
        assert!(warping_quality(&a, &b).unwrap().0 < PSNR_CAP);
    }

    #[test]
    fn report_means_and_formats() {
        let mk = |i: usize, p: f64, e: Option<f64>| FrameMetrics {
            frame: i,
            psnr_t: p,
            ssim_t: 0.9,
            psnr_l: p - 1.0,
            ssim_l: 0.8,
            epe: e,
            warp_psnr: None,
        };
        let report = MetricReport::new(vec![mk(1, 30.0, Some(1.0)), mk(2, 40.0, None), mk(3, 20.0, Some(2.0))], DEFAULT_MU);
        assert_eq!(report.means.psnr_t, Some(30.0));
        assert_eq!(report.means.epe, Some(1.5));
        assert_eq!(report.means.warp_psnr, None);
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 6);
        assert!(tsv.starts_with("# psnr_cap_db=99"));
        let back: MetricReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 12, 12);
            let b = random_image(s2, 12, 12);
            let x = ssim(&a, &b).unwrap();
            prop_assert_eq!(x, ssim(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
