//! Coarse optical flow: flow-file ingestion or a built-in pyramidal
//! Horn–Schunck estimator, plus end-point error.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nnkit::{bilinear_resize, Tensor4};
use crate::stage1::warp_tensor;
use crate::tensorio::{read_flow_file, FlowField, ImagePlane};

/// Luma is scaled to 8-bit units so the smoothness weight has its usual magnitude.
const INTENSITY_SCALE: f64 = 255.0;
const MIN_LEVEL_SIZE: usize = 8;

/// Settings of the pyramidal Horn–Schunck estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HornSchunckConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Smoothness weight, in units of 8-bit intensity.
    pub alpha: f64,
}

impl Default for HornSchunckConfig {
    fn default() -> Self {
        HornSchunckConfig {
            levels: 3,
            iterations: 100,
            alpha: 15.0,
        }
    }
}

impl HornSchunckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations == 0 || !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid Horn-Schunck settings {self:?}")));
        }
        Ok(())
    }
}

/// Where coarse flow comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowSource {
    /// A precomputed `.flo` file for this pair.
    Ingest(PathBuf),
    Classical(HornSchunckConfig),
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Classical(HornSchunckConfig::default())
    }
}

/// Flow from the (exposure-matched) reference to its neighbour.
pub fn estimate_coarse_pair(ref_norm: &ImagePlane, neighbor: &ImagePlane, src: &FlowSource) -> Result<FlowField> {
    if (ref_norm.height(), ref_norm.width()) != (neighbor.height(), neighbor.width()) {
        return Err(Error::DimMismatch(format!(
            "flow pair {:?} vs {:?}",
            ref_norm.dims(),
            neighbor.dims()
        )));
    }
    match src {
        FlowSource::Ingest(path) => {
            if !path.is_file() {
                return Err(Error::IngestFileMissing(path.clone()));
            }
            let flow = read_flow_file(path)?;
            if flow.dims() != (ref_norm.height(), ref_norm.width()) {
                return Err(Error::DimMismatch(format!(
                    "ingested flow {:?} for frame {:?}",
                    flow.dims(),
                    (ref_norm.height(), ref_norm.width())
                )));
            }
            Ok(flow)
        }
        FlowSource::Classical(cfg) => classical_flow(ref_norm, neighbor, cfg),
    }
}

/// Mean per-pixel Euclidean distance between two flows.
pub fn endpoint_error(flow: &FlowField, gt: &FlowField) -> Result<f64> {
    endpoint_error_interior(flow, gt, 0)
}

/// End-point error over pixels at least `border` px from the edge.
pub fn endpoint_error_interior(flow: &FlowField, gt: &FlowField, border: usize) -> Result<f64> {
    if flow.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!("EPE {:?} vs {:?}", flow.dims(), gt.dims())));
    }
    let (h, w) = flow.dims();
    if h <= 2 * border || w <= 2 * border {
        return Err(Error::DimMismatch(format!("{h}x{w} has no interior for border {border}")));
    }
    let mut sum = 0.0;
    for y in border..h - border {
        for x in border..w - border {
            let du = (flow.u(y, x) - gt.u(y, x)) as f64;
            let dv = (flow.v(y, x) - gt.v(y, x)) as f64;
            sum += du.hypot(dv);
        }
    }
    Ok(sum / ((h - 2 * border) * (w - 2 * border)) as f64)
}

/// Single-channel intensity plane in 8-bit units.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn tensor(&self) -> Tensor4<f64> {
        Tensor4 {
            n: 1,
            c: 1,
            h: self.h,
            w: self.w,
            data: self.data.clone(),
        }
    }
}

fn luma(img: &ImagePlane) -> Plane {
    let (h, w, c) = img.dims();
    let data = img
        .data()
        .chunks_exact(c)
        .map(|px| {
            let y = if c >= 3 {
                0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
            } else {
                px[0] as f64
            };
            y * INTENSITY_SCALE
        })
        .collect();
    Plane { h, w, data }
}

fn gaussian_taps() -> [f64; 5] {
    let raw: Vec<f64> = (-2i32..=2).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    [raw[0] / s, raw[1] / s, raw[2] / s, raw[3] / s, raw[4] / s]
}

/// Separable 5×5 Gaussian (σ = 1) with replicate borders.
fn blur(p: &Plane) -> Plane {
    let k = gaussian_taps();
    let mut tmp = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = (0..5).map(|i| k[i] * p.at(y as isize, x as isize + i as isize - 2)).sum();
        }
    }
    let t = Plane {
        h: p.h,
        w: p.w,
        data: tmp,
    };
    let mut out = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = (0..5).map(|i| k[i] * t.at(y as isize + i as isize - 2, x as isize)).sum();
        }
    }
    Plane {
        h: p.h,
        w: p.w,
        data: out,
    }
}

fn downsample(p: &Plane) -> Plane {
    let b = blur(p);
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let t = bilinear_resize(&b.tensor(), h, w);
    Plane { h, w, data: t.data }
}

fn pyramid(p: Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![p];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.h.div_ceil(2) < MIN_LEVEL_SIZE || last.w.div_ceil(2) < MIN_LEVEL_SIZE {
            break;
        }
        let next = downsample(last);
        out.push(next);
    }
    out
}

/// Central-difference derivatives with replicate borders.
fn gradients(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; p.data.len()];
    let mut gy = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            let (yi, xi) = (y as isize, x as isize);
            gx[y * p.w + x] = 0.5 * (p.at(yi, xi + 1) - p.at(yi, xi - 1));
            gy[y * p.w + x] = 0.5 * (p.at(yi + 1, xi) - p.at(yi - 1, xi));
        }
    }
    (gx, gy)
}

/// Linearised brightness-constancy system at one pyramid level.
struct LevelSystem {
    h: usize,
    w: usize,
    ix: Vec<f64>,
    iy: Vec<f64>,
    /// Constant term: `It − Ix·u0 − Iy·v0`.
    c: Vec<f64>,
    alpha2: f64,
}

impl LevelSystem {
    fn new(a: &Plane, b: &Plane, u0: &[f64], v0: &[f64], alpha: f64) -> Self {
        let (h, w) = (a.h, a.w);
        let mut flow = Tensor4::<f64>::zeros(1, 2, h, w);
        flow.data[..h * w].copy_from_slice(u0);
        flow.data[h * w..].copy_from_slice(v0);
        let bw = warp_tensor(&b.tensor(), &flow).expect("matching level dims");
        let bw = Plane { h, w, data: bw.data };
        let (ax, ay) = gradients(a);
        let (bx, by) = gradients(&bw);
        let n = h * w;
        let mut ix = vec![0.0; n];
        let mut iy = vec![0.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            ix[i] = 0.5 * (ax[i] + bx[i]);
            iy[i] = 0.5 * (ay[i] + by[i]);
            let it = bw.data[i] - a.data[i];
            c[i] = it - ix[i] * u0[i] - iy[i] * v0[i];
        }
        LevelSystem {
            h,
            w,
            ix,
            iy,
            c,
            alpha2: alpha * alpha,
        }
    }

    /// Neighbour mean and count over the 4-neighbourhood inside the image.
    fn neighbor_mean(&self, f: &[f64], y: usize, x: usize) -> (f64, f64) {
        let w = self.w;
        let mut s = 0.0;
        let mut n = 0.0;
        if y > 0 {
            s += f[(y - 1) * w + x];
            n += 1.0;
        }
        if y + 1 < self.h {
            s += f[(y + 1) * w + x];
            n += 1.0;
        }
        if x > 0 {
            s += f[y * w + x - 1];
            n += 1.0;
        }
        if x + 1 < w {
            s += f[y * w + x + 1];
            n += 1.0;
        }
        if n == 0.0 {
            (f[y * w + x], 0.0)
        } else {
            (s / n, n)
        }
    }

    fn jacobi(&self, u: &mut Vec<f64>, v: &mut Vec<f64>) {
        let mut nu = vec![0.0; u.len()];
        let mut nv = vec![0.0; v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                let (ub, np) = self.neighbor_mean(u, y, x);
                let (vb, _) = self.neighbor_mean(v, y, x);
                let (gx, gy) = (self.ix[i], self.iy[i]);
                let denom = self.alpha2 * np + gx * gx + gy * gy;
                if denom == 0.0 {
                    nu[i] = ub;
                    nv[i] = vb;
                    continue;
                }
                let r = (gx * ub + gy * vb + self.c[i]) / denom;
                nu[i] = ub - gx * r;
                nv[i] = vb - gy * r;
            }
        }
        *u = nu;
        *v = nv;
    }

    /// Data plus smoothness energy of the current estimate.
    fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let w = self.w;
        let mut e = 0.0;
        for y in 0..self.h {
            for x in 0..w {
                let i = y * w + x;
                let r = self.ix[i] * u[i] + self.iy[i] * v[i] + self.c[i];
                e += r * r;
                if x + 1 < w {
                    e += self.alpha2 * ((u[i + 1] - u[i]).powi(2) + (v[i + 1] - v[i]).powi(2));
                }
                if y + 1 < self.h {
                    e += self.alpha2 * ((u[i + w] - u[i]).powi(2) + (v[i + w] - v[i]).powi(2));
                }
            }
        }
        e
    }
}

fn upsample_flow(u: &[f64], v: &[f64], from: (usize, usize), to: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let (fh, fw) = from;
    let (th, tw) = to;
    let mut t = Tensor4::<f64>::zeros(1, 2, fh, fw);
    t.data[..fh * fw].copy_from_slice(u);
    t.data[fh * fw..].copy_from_slice(v);
    let up = bilinear_resize(&t, th, tw);
    let (sx, sy) = (tw as f64 / fw as f64, th as f64 / fh as f64);
    let nu = up.data[..th * tw].iter().map(|x| x * sx).collect();
    let nv = up.data[th * tw..].iter().map(|y| y * sy).collect();
    (nu, nv)
}

fn run_pyramid(
    a: &ImagePlane,
    b: &ImagePlane,
    cfg: &HornSchunckConfig,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<FlowField> {
    cfg.validate()?;
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::DimMismatch(format!("flow pair {:?} vs {:?}", a.dims(), b.dims())));
    }
    let pa = pyramid(luma(a), cfg.levels);
    let pb = pyramid(luma(b), cfg.levels);
    let coarsest = pa.last().expect("non-empty pyramid");
    let mut dims = (coarsest.h, coarsest.w);
    let mut u = vec![0.0; dims.0 * dims.1];
    let mut v = vec![0.0; dims.0 * dims.1];
    for (la, lb) in pa.iter().zip(&pb).rev() {
        if (la.h, la.w) != dims {
            (u, v) = upsample_flow(&u, &v, dims, (la.h, la.w));
            dims = (la.h, la.w);
        }
        let sys = LevelSystem::new(la, lb, &u, &v, cfg.alpha);
        let mut energies = Vec::new();
        if trace.is_some() {
            energies.push(sys.energy(&u, &v));
        }
        for _ in 0..cfg.iterations {
            sys.jacobi(&mut u, &mut v);
            if trace.is_some() {
                energies.push(sys.energy(&u, &v));
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(energies);
        }
    }
    let (h, w) = dims;
    let uv = (0..h * w).flat_map(|i| [u[i] as f32, v[i] as f32]).collect();
    FlowField::new(h, w, uv)
}

/// Pyramidal Horn–Schunck flow from `a` to `b` (sampling `b` at `p + f(p)` reproduces `a`).
pub fn classical_flow(a: &ImagePlane, b: &ImagePlane, cfg: &HornSchunckConfig) -> Result<FlowField> {
    run_pyramid(a, b, cfg, None)
}

/// Like [`classical_flow`], also returning the energy before and after every
/// Jacobi sweep, one list per pyramid level from coarse to fine.
pub fn classical_flow_traced(
    a: &ImagePlane,
    b: &ImagePlane,
    cfg: &HornSchunckConfig,
) -> Result<(FlowField, Vec<Vec<f64>>)> {
    let mut trace = Vec::new();
    let flow = run_pyramid(a, b, cfg, Some(&mut trace))?;
    Ok((flow, trace))
}
