//! Coarse fusion: flow adapter, backward warping and the five-frame
//! weight-map fusion that produces `H_coarse`.

use serde::{Deserialize, Serialize};
use crate::coarseflow::{estimate_coarse_pair, FlowSource};
use crate::error::{Error, Result};
use crate::exposure::{exposure_normalize, ldr_to_hdr};
use crate::motionphys::{mask_backward, mask_forward, weight_head_layers, MaskForward, MaskOptions, MotionMask};
use crate::nnkit::{
    bilinear_resize, bilinear_resize_backward, concat_channels, softplus, softplus_backward, split_channels,
    ConvCache, ConvLayer, ConvSpec, Real, Tensor4,
};
use crate::tensorio::{ExposureFrame, FlowField, ImagePlane, ParamStore};

pub const DEFAULT_LAMBDA: f64 = 20.0;
pub const FUSE_EPS: f64 = 1e-8;
/// Channels of the adapter input: three LDR frames and two flows.
pub const ADAPTER_IN: usize = 13;
/// Channels of the fusion input: five HDR frames.
pub const FUSION_IN: usize = 15;
pub const FUSION_WEIGHTS: usize = 5;

// ---------------------------------------------------------------------------
// Backward warping

fn check_warp_args<T: Real>(x: &Tensor4<T>, flow: &Tensor4<T>) -> Result<()> {
    if x.n != 1 || flow.dims() != (1, 2, x.h, x.w) {
        return Err(Error::DimMismatch(format!(
            "warp input {:?} with flow {:?}",
            x.dims(),
            flow.dims()
        )));
    }
    Ok(())
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a + (b - a) * t
    }
}

/// Bilinear sampling position with clamping.
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// Whether each coordinate stayed inside the image (gradient passes).
    free_x: bool,
    free_y: bool,
}

fn tap<T: Real>(x: usize, y: usize, u: T, v: T, w: usize, h: usize) -> Tap<T> {
    let (wmax, hmax) = (T::from_f64((w - 1) as f64), T::from_f64((h - 1) as f64));
    let px = T::from_f64(x as f64) + u;
    let py = T::from_f64(y as f64) + v;
    let free_x = px >= T::zero() && px <= wmax;
    let free_y = py >= T::zero() && py <= hmax;
    let px = px.max(T::zero()).min(wmax);
    let py = py.max(T::zero()).min(hmax);
    let x0 = px.floor().as_f64() as usize;
    let y0 = py.floor().as_f64() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: px - T::from_f64(x0 as f64),
        fy: py - T::from_f64(y0 as f64),
        free_x,
        free_y,
    }
}

/// Samples every channel of `x` at `p + flow(p)`; `flow` is `[1, 2, H, W]`.
pub fn warp_tensor<T: Real>(x: &Tensor4<T>, flow: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_warp_args(x, flow)?;
    let (h, w) = (x.h, x.w);
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    let mut out = x.zeros_like();
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let t = tap(xx, y, u[i], v[i], w, h);
            for c in 0..x.c {
                let s = x.plane(0, c);
                let top = lerp(s[t.y0 * w + t.x0], s[t.y0 * w + t.x1], t.fx);
                let bot = lerp(s[t.y1 * w + t.x0], s[t.y1 * w + t.x1], t.fx);
                out.data[c * h * w + i] = lerp(top, bot, t.fy);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp_tensor`] with respect to the image and the flow.
pub fn warp_tensor_backward<T: Real>(
    grad_out: &Tensor4<T>,
    x: &Tensor4<T>,
    flow: &Tensor4<T>,
    need_grad_x: bool,
) -> Result<(Option<Tensor4<T>>, Tensor4<T>)> {
    check_warp_args(x, flow)?;
    if grad_out.dims() != x.dims() {
        return Err(Error::DimMismatch("warp grad_out".into()));
    }
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    let mut gx = if need_grad_x { Some(x.zeros_like()) } else { None };
    let mut gflow = flow.zeros_like();
    let one = T::one();
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let t = tap(xx, y, u[i], v[i], w, h);
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for c in 0..x.c {
                let g = grad_out.data[c * hw + i];
                let s = x.plane(0, c);
                let (v00, v01) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                let (v10, v11) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                if t.free_x {
                    gu += g * ((v01 - v00) * (one - t.fy) + (v11 - v10) * t.fy);
                }
                if t.free_y {
                    let top = v00 + (v01 - v00) * t.fx;
                    let bot = v10 + (v11 - v10) * t.fx;
                    gv += g * (bot - top);
                }
                if let Some(gx) = gx.as_mut() {
                    let d = gx.plane_mut(0, c);
                    d[t.y0 * w + t.x0] += g * (one - t.fx) * (one - t.fy);
                    d[t.y0 * w + t.x1] += g * t.fx * (one - t.fy);
                    d[t.y1 * w + t.x0] += g * (one - t.fx) * t.fy;
                    d[t.y1 * w + t.x1] += g * t.fx * t.fy;
                }
            }
            gflow.data[i] = gu;
            gflow.data[hw + i] = gv;
        }
    }
    Ok((gx, gflow))
}

/// Reconstructs the reference by sampling `image` at `p + flow(p)`.
pub fn backward_warp(image: &ImagePlane, flow: &FlowField) -> Result<ImagePlane> {
    if (image.height(), image.width()) != flow.dims() {
        return Err(Error::DimMismatch(format!(
            "warp image {:?} with flow {:?}",
            image.dims(),
            flow.dims()
        )));
    }
    let out = warp_tensor(&Tensor4::<f32>::from_image(image), &Tensor4::from_flow(flow))?;
    out.to_image()
}

// ---------------------------------------------------------------------------
// Weighted fusion

/// `Σ W_i·X_i / (Σ W_i + ε)` where `inputs` stacks five 3-channel frames.
pub fn fuse_tensor<T: Real>(inputs: &Tensor4<T>, weights: &Tensor4<T>) -> Result<Tensor4<T>> {
    let k = weights.c;
    if inputs.n != 1 || weights.n != 1 || inputs.c != 3 * k || (inputs.h, inputs.w) != (weights.h, weights.w) {
        return Err(Error::DimMismatch(format!(
            "fuse inputs {:?} with weights {:?}",
            inputs.dims(),
            weights.dims()
        )));
    }
    let hw = inputs.plane_len();
    let eps = T::from_f64(FUSE_EPS);
    let mut out = Tensor4::zeros(1, 3, inputs.h, inputs.w);
    for p in 0..hw {
        let mut den = T::zero();
        let mut num = [T::zero(); 3];
        for i in 0..k {
            let wi = weights.data[i * hw + p];
            den += wi;
            for (c, n) in num.iter_mut().enumerate() {
                *n += wi * inputs.data[(3 * i + c) * hw + p];
            }
        }
        den += eps;
        for (c, n) in num.iter().enumerate() {
            out.data[c * hw + p] = *n / den;
        }
    }
    Ok(out)
}

/// Returns gradients with respect to the stacked inputs and the weights.
pub fn fuse_tensor_backward<T: Real>(
    grad_out: &Tensor4<T>,
    inputs: &Tensor4<T>,
    weights: &Tensor4<T>,
    fused: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let k = weights.c;
    let hw = inputs.plane_len();
    let eps = T::from_f64(FUSE_EPS);
    let mut gi = inputs.zeros_like();
    let mut gw = weights.zeros_like();
    for p in 0..hw {
        let den = (0..k).map(|i| weights.data[i * hw + p]).sum::<T>() + eps;
        for i in 0..k {
            let wi = weights.data[i * hw + p];
            let mut acc = T::zero();
            for c in 0..3 {
                let g = grad_out.data[c * hw + p];
                gi.data[(3 * i + c) * hw + p] = g * wi / den;
                acc += g * (inputs.data[(3 * i + c) * hw + p] - fused.data[c * hw + p]);
            }
            gw.data[i * hw + p] = acc / den;
        }
    }
    (gi, gw)
}

/// Per-pixel weighted average of five HDR frames.
pub fn fuse_weighted(inputs: &[ImagePlane], weights: &[ImagePlane]) -> Result<ImagePlane> {
    if inputs.len() != FUSION_WEIGHTS || weights.len() != FUSION_WEIGHTS {
        return Err(Error::DimMismatch(format!(
            "fusion takes {FUSION_WEIGHTS} frames and weights, got {} and {}",
            inputs.len(),
            weights.len()
        )));
    }
    let (h, w) = (inputs[0].height(), inputs[0].width());
    for img in inputs {
        if img.dims() != (h, w, 3) {
            return Err(Error::DimMismatch(format!("fusion frame {:?}", img.dims())));
        }
    }
    for wt in weights {
        if wt.dims() != (h, w, 1) {
            return Err(Error::DimMismatch(format!("fusion weight {:?}", wt.dims())));
        }
    }
    let xs: Vec<Tensor4<f32>> = inputs.iter().map(Tensor4::from_image).collect();
    let ws: Vec<Tensor4<f32>> = weights.iter().map(Tensor4::from_image).collect();
    let x = concat_channels(&xs.iter().collect::<Vec<_>>())?;
    let wt = concat_channels(&ws.iter().collect::<Vec<_>>())?;
    fuse_tensor(&x, &wt)?.to_image()
}

// ---------------------------------------------------------------------------
// Networks

/// Dilated Conv–PReLU stack predicting residual flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub lambda: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            channels: 32,
            dilations: vec![1, 2, 4, 2, 1],
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.channels == 0 || self.dilations.is_empty() {
            return Err(Error::InvalidConfig(format!("invalid adapter config {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut layers = Vec::new();
        let mut cin = ADAPTER_IN;
        for (i, &d) in self.dilations.iter().enumerate() {
            layers.push(ConvLayer::new(
                format!("adapter.block{i}"),
                ConvSpec::new(cin, self.channels, 3).dilation(d),
                true,
            ));
            cin = self.channels;
        }
        layers.push(ConvLayer::new("adapter.head", ConvSpec::new(cin, 4, 3), false).zero_init());
        layers
    }
}

/// Three-scale U-Net emitting five softplus weight maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionNetConfig {
    pub channels: [usize; 3],
    pub res_blocks: usize,
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        FusionNetConfig {
            channels: [32, 64, 128],
            res_blocks: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvLayer,
    b: ConvLayer,
}

type ResCache<T> = (ConvCache<T>, ConvCache<T>);

impl ResBlock {
    fn new(name: &str, ch: usize) -> Self {
        ResBlock {
            a: ConvLayer::new(format!("{name}.a"), ConvSpec::new(ch, ch, 3), true),
            b: ConvLayer::new(format!("{name}.b"), ConvSpec::new(ch, ch, 3), false),
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, ResCache<T>)> {
        let (h, ca) = self.a.forward(p, x)?;
        let (mut y, cb) = self.b.forward(p, &h)?;
        y.add_assign(x);
        Ok((y, (ca, cb)))
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ResCache<T>,
        gy: &Tensor4<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor4<T>> {
        let gh = self.b.backward(p, &cache.1, gy, grads, true)?.expect("grad requested");
        let mut gx = self.a.backward(p, &cache.0, &gh, grads, true)?.expect("grad requested");
        gx.add_assign(gy);
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    /// Entry conv and the two stride-2 downsampling convs.
    enc: [ConvLayer; 3],
    res: [Vec<ResBlock>; 3],
    up1: ConvLayer,
    up2: ConvLayer,
    head: ConvLayer,
}

impl FusionNetConfig {
    fn unet(&self) -> UNet {
        let [c0, c1, c2] = self.channels;
        let res = |scale: usize, ch: usize| {
            (0..self.res_blocks)
                .map(|j| ResBlock::new(&format!("fusion.res{scale}.{j}"), ch))
                .collect()
        };
        UNet {
            enc: [
                ConvLayer::new("fusion.enc0", ConvSpec::new(FUSION_IN, c0, 3), true),
                ConvLayer::new("fusion.enc1", ConvSpec::new(c0, c1, 3).stride(2), true),
                ConvLayer::new("fusion.enc2", ConvSpec::new(c1, c2, 3).stride(2), true),
            ],
            res: [res(0, c0), res(1, c1), res(2, c2)],
            up1: ConvLayer::new("fusion.up1", ConvSpec::new(c2 + c1, c1, 3), true),
            up2: ConvLayer::new("fusion.up2", ConvSpec::new(c1 + c0, c0, 3), true),
            head: ConvLayer::new("fusion.head", ConvSpec::new(c0, FUSION_WEIGHTS, 3), false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid fusion config {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let u = self.unet();
        let mut out = Vec::new();
        for (enc, blocks) in u.enc.iter().zip(&u.res) {
            out.push(enc.clone());
            for b in blocks {
                out.push(b.a.clone());
                out.push(b.b.clone());
            }
        }
        out.extend([u.up1, u.up2, u.head]);
        out
    }
}

#[derive(Clone, Debug)]
struct UNetCache<T> {
    enc: Vec<ConvCache<T>>,
    res: Vec<Vec<ResCache<T>>>,
    /// Feature sizes at each scale.
    dims: [(usize, usize, usize); 3],
    up1: ConvCache<T>,
    up2: ConvCache<T>,
    head: ConvCache<T>,
    head_pre: Tensor4<T>,
}

impl UNet {
    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, UNetCache<T>)> {
        let mut enc = Vec::new();
        let mut res = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (layer, blocks) in self.enc.iter().zip(&self.res) {
            let (mut y, c) = layer.forward(p, &cur)?;
            enc.push(c);
            let mut rc = Vec::new();
            for b in blocks {
                let (z, c) = b.forward(p, &y)?;
                rc.push(c);
                y = z;
            }
            res.push(rc);
            skips.push(y.clone());
            cur = y;
        }
        let dims = [
            (skips[0].c, skips[0].h, skips[0].w),
            (skips[1].c, skips[1].h, skips[1].w),
            (skips[2].c, skips[2].h, skips[2].w),
        ];
        let up = bilinear_resize(&skips[2], skips[1].h, skips[1].w);
        let (d1, up1) = self.up1.forward(p, &concat_channels(&[&up, &skips[1]])?)?;
        let up = bilinear_resize(&d1, skips[0].h, skips[0].w);
        let (d2, up2) = self.up2.forward(p, &concat_channels(&[&up, &skips[0]])?)?;
        let (head_pre, head) = self.head.forward(p, &d2)?;
        let out = softplus(&head_pre);
        Ok((
            out,
            UNetCache {
                enc,
                res,
                dims,
                up1,
                up2,
                head,
                head_pre,
            },
        ))
    }


    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &UNetCache<T>,
        g_out: &Tensor4<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor4<T>> {
        let [(c0, _, _), (c1, h1, w1), (c2, h2, w2)] = cache.dims;
        let g_pre = softplus_backward(g_out, &cache.head_pre);
        let g_d2 = self.head.backward(p, &cache.head, &g_pre, grads, true)?.expect("grad");
        let g_cat2 = self.up2.backward(p, &cache.up2, &g_d2, grads, true)?.expect("grad");
        let parts2 = split_channels(&g_cat2, &[c1, c0]);
        let g_d1 = bilinear_resize_backward(&parts2[0], h1, w1);
        let g_cat1 = self.up1.backward(p, &cache.up1, &g_d1, grads, true)?.expect("grad");
        let parts1 = split_channels(&g_cat1, &[c2, c1]);
        let skips = [
            parts2[1].clone(),
            parts1[1].clone(),
            bilinear_resize_backward(&parts1[0], h2, w2),
        ];
        let mut carry: Option<Tensor4<T>> = None;
        for s in (0..3).rev() {
            let mut g = skips[s].clone();
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            for (b, c) in self.res[s].iter().zip(&cache.res[s]).rev() {
                g = b.backward(p, c, &g, grads)?;
            }
            carry = self.enc[s].backward(p, &cache.enc[s], &g, grads, true)?;
        }
        Ok(carry.expect("input gradient"))
    }
}

// ---------------------------------------------------------------------------
// Stage composition

/// Networks of the coarse stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub adapter: AdapterConfig,
    pub fusion: FusionNetConfig,
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.fusion.validate()
    }

    /// Adapter, fusion net and energy-weight head layers.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut l = self.adapter.layers();
        l.extend(self.fusion.layers());
        l.extend(weight_head_layers());
        l
    }
}

/// Tensor form of one window. Index 0 is the previous frame, 1 the
/// reference, 2 the next frame.
#[derive(Clone, Debug)]
pub struct Stage1Inputs<T> {
    pub ldr: [Tensor4<T>; 3],
    pub hdr: [Tensor4<T>; 3],
    pub coarse_prev: Tensor4<T>,
    pub coarse_next: Tensor4<T>,
}

impl<T: Real> Stage1Inputs<T> {
    pub fn from_window(window: &[ExposureFrame; 3], coarse_prev: &FlowField, coarse_next: &FlowField) -> Result<Self> {
        let dims = (window[1].image.height(), window[1].image.width());
        for f in window {
            if f.image.dims() != (dims.0, dims.1, 3) {
                return Err(Error::DimMismatch(format!("window frame {:?}", f.image.dims())));
            }
        }
        for f in [coarse_prev, coarse_next] {
            if f.dims() != dims {
                return Err(Error::DimMismatch(format!("coarse flow {:?} for {:?}", f.dims(), dims)));
            }
        }
        let hdr = [ldr_to_hdr(&window[0])?, ldr_to_hdr(&window[1])?, ldr_to_hdr(&window[2])?];
        Ok(Stage1Inputs {
            ldr: [
                Tensor4::from_image(&window[0].image),
                Tensor4::from_image(&window[1].image),
                Tensor4::from_image(&window[2].image),
            ],
            hdr: [
                Tensor4::from_image(&hdr[0]),
                Tensor4::from_image(&hdr[1]),
                Tensor4::from_image(&hdr[2]),
            ],
            coarse_prev: Tensor4::from_flow(coarse_prev),
            coarse_next: Tensor4::from_flow(coarse_next),
        })
    }

    /// Horizontally mirrored copy; flows change the sign of `u`.
    pub fn flipped(&self) -> Self {
        let flip = |t: &Tensor4<T>| {
            let mut o = t.clone();
            for c in 0..t.c {
                for y in 0..t.h {
                    for x in 0..t.w {
                        *o.at_mut(0, c, y, x) = t.at(0, c, y, t.w - 1 - x);
                    }
                }
            }
            o
        };
        let flip_flow = |t: &Tensor4<T>| {
            let mut o = flip(t);
            o.plane_mut(0, 0).iter_mut().for_each(|v| *v = -*v);
            o
        };
        Stage1Inputs {
            ldr: [flip(&self.ldr[0]), flip(&self.ldr[1]), flip(&self.ldr[2])],
            hdr: [flip(&self.hdr[0]), flip(&self.hdr[1]), flip(&self.hdr[2])],
            coarse_prev: flip_flow(&self.coarse_prev),
            coarse_next: flip_flow(&self.coarse_next),
        }
    }

    pub fn cast<U: Real>(&self) -> Stage1Inputs<U> {
        Stage1Inputs {
            ldr: [self.ldr[0].cast(), self.ldr[1].cast(), self.ldr[2].cast()],
            hdr: [self.hdr[0].cast(), self.hdr[1].cast(), self.hdr[2].cast()],
            coarse_prev: self.coarse_prev.cast(),
            coarse_next: self.coarse_next.cast(),
        }
    }
}

/// `[L_prev, L_ref, L_next, f_prev/λ, f_next/λ]`.
pub fn adapter_input_tensor<T: Real>(
    ldr: &[Tensor4<T>; 3],
    f_prev: &Tensor4<T>,
    f_next: &Tensor4<T>,
    lambda: f64,
) -> Result<Tensor4<T>> {
    let inv = T::from_f64(1.0 / lambda);
    let fp = f_prev.map(|v| v * inv);
    let fnx = f_next.map(|v| v * inv);
    concat_channels(&[&ldr[0], &ldr[1], &ldr[2], &fp, &fnx])
}

/// `f + λ·Δ`, leaving `f` untouched where `Δ` is exactly zero.
pub fn apply_residual<T: Real>(flow: &Tensor4<T>, delta: &Tensor4<T>, lambda: f64) -> Tensor4<T> {
    let l = T::from_f64(lambda);
    flow.zip_map(delta, |f, d| if d == T::zero() { f } else { f + l * d })
}

/// Forward values of the coarse stage kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Stage1Forward<T> {
    pub h_coarse: Tensor4<T>,
    pub flow_prev: Tensor4<T>,
    pub flow_next: Tensor4<T>,
    pub mask_prev: MaskForward<T>,
    pub mask_next: MaskForward<T>,
    pub weights: Tensor4<T>,
    adapter: Vec<ConvCache<T>>,
    fusion_in: Tensor4<T>,
    unet: UNetCache<T>,
}

/// Upstream gradients arriving at the coarse stage outputs.
#[derive(Clone, Debug)]
pub struct Stage1Grads<T> {
    pub h_coarse: Tensor4<T>,
    pub flow_prev: Tensor4<T>,
    pub flow_next: Tensor4<T>,
    pub mask_prev: Tensor4<T>,
    pub mask_next: Tensor4<T>,
}

pub fn stage1_forward<T: Real>(
    cfg: &Stage1Config,
    p: &ParamStore<T>,
    inp: &Stage1Inputs<T>,
    mask_opts: [MaskOptions; 2],
) -> Result<Stage1Forward<T>> {
    let layers = cfg.adapter.layers();
    let mut x = adapter_input_tensor(&inp.ldr, &inp.coarse_prev, &inp.coarse_next, cfg.adapter.lambda)?;
    let mut adapter = Vec::with_capacity(layers.len());
    for layer in &layers {
        let (y, c) = layer.forward(p, &x)?;
        adapter.push(c);
        x = y;
    }
    let deltas = split_channels(&x, &[2, 2]);
    let flow_prev = apply_residual(&inp.coarse_prev, &deltas[0], cfg.adapter.lambda);
    let flow_next = apply_residual(&inp.coarse_next, &deltas[1], cfg.adapter.lambda);

    let warped_prev = warp_tensor(&inp.hdr[0], &flow_prev)?;
    let warped_next = warp_tensor(&inp.hdr[2], &flow_next)?;
    let fusion_in = concat_channels(&[&warped_prev, &warped_next, &inp.hdr[1], &inp.hdr[2], &inp.hdr[0]])?;
    let (weights, unet) = cfg.fusion.unet().forward(p, &fusion_in)?;
    let h_coarse = fuse_tensor(&fusion_in, &weights)?;

    let mask_prev = mask_forward(&flow_prev, p, mask_opts[0])?;
    let mask_next = mask_forward(&flow_next, p, mask_opts[1])?;
    Ok(Stage1Forward {
        h_coarse,
        flow_prev,
        flow_next,
        mask_prev,
        mask_next,
        weights,
        adapter,
        fusion_in,
        unet,
    })
}

/// Accumulates parameter gradients of the coarse stage into `grads`.
pub fn stage1_backward<T: Real>(
    cfg: &Stage1Config,
    p: &ParamStore<T>,
    inp: &Stage1Inputs<T>,
    fw: &Stage1Forward<T>,
    g: &Stage1Grads<T>,
    grads: &mut ParamStore<T>,
) -> Result<()> {
    let mut g_prev = g.flow_prev.clone();
    let mut g_next = g.flow_next.clone();
    g_prev.add_assign(&mask_backward(&fw.mask_prev, &g.mask_prev, p, grads)?);
    g_next.add_assign(&mask_backward(&fw.mask_next, &g.mask_next, p, grads)?);

    let (mut g_in, g_w) = fuse_tensor_backward(&g.h_coarse, &fw.fusion_in, &fw.weights, &fw.h_coarse);
    g_in.add_assign(&cfg.fusion.unet().backward(p, &fw.unet, &g_w, grads)?);
    let parts = split_channels(&g_in, &[3, 3, 9]);
    let (_, gf) = warp_tensor_backward(&parts[0], &inp.hdr[0], &fw.flow_prev, false)?;
    g_prev.add_assign(&gf);
    let (_, gf) = warp_tensor_backward(&parts[1], &inp.hdr[2], &fw.flow_next, false)?;
    g_next.add_assign(&gf);

    let l = T::from_f64(cfg.adapter.lambda);
    let mut g_x = concat_channels(&[&g_prev.scale(l), &g_next.scale(l)])?;
    let layers = cfg.adapter.layers();
    for (i, (layer, cache)) in layers.iter().zip(&fw.adapter).enumerate().rev() {
        match layer.backward(p, cache, &g_x, grads, i > 0)? {
            Some(gx) => g_x = gx,
            None => break,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Image-level API

/// Coarse-stage results for one window.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub h_coarse: ImagePlane,
    pub coarse_prev: FlowField,
    pub coarse_next: FlowField,
    pub flow_prev: FlowField,
    pub flow_next: FlowField,
    pub mask_prev: MotionMask,
    pub mask_next: MotionMask,
}

pub fn adapter_input(
    l_prev: &ImagePlane,
    l_ref: &ImagePlane,
    l_next: &ImagePlane,
    f_prev: &FlowField,
    f_next: &FlowField,
    lambda: f64,
) -> Result<Tensor4<f32>> {
    let dims = (l_ref.height(), l_ref.width());
    for img in [l_prev, l_next] {
        if (img.height(), img.width()) != dims {
            return Err(Error::DimMismatch(format!("adapter frame {:?} vs {:?}", img.dims(), dims)));
        }
    }
    for f in [f_prev, f_next] {
        if f.dims() != dims {
            return Err(Error::DimMismatch(format!("adapter flow {:?} vs {:?}", f.dims(), dims)));
        }
    }
    let ldr = [
        Tensor4::from_image(l_prev),
        Tensor4::from_image(l_ref),
        Tensor4::from_image(l_next),
    ];
    adapter_input_tensor(&ldr, &Tensor4::from_flow(f_prev), &Tensor4::from_flow(f_next), lambda)
}

/// Residual flows `(Δf_prev, Δf_next)` predicted from an adapter input.
pub fn adapt_flows(x: &Tensor4<f32>, params: &ParamStore<f32>, cfg: &AdapterConfig) -> Result<(FlowField, FlowField)> {
    let mut cur = x.clone();
    for layer in cfg.adapter_layers_checked(x)? {
        cur = layer.infer(params, &cur)?;
    }
    let parts = split_channels(&cur, &[2, 2]);
    Ok((parts[0].to_flow()?, parts[1].to_flow()?))
}

impl AdapterConfig {
    fn adapter_layers_checked(&self, x: &Tensor4<f32>) -> Result<Vec<ConvLayer>> {
        self.validate()?;
        if x.c != ADAPTER_IN || x.n != 1 {
            return Err(Error::ShapeMismatch(format!("adapter input {:?}", x.dims())));
        }
        Ok(self.layers())
    }
}

/// `f̃ = f + λ·Δf`.
pub fn refine_flow(flow: &FlowField, delta: &FlowField, lambda: f64) -> Result<FlowField> {
    if flow.dims() != delta.dims() {
        return Err(Error::DimMismatch("flow vs residual".into()));
    }
    apply_residual(&Tensor4::<f32>::from_flow(flow), &Tensor4::from_flow(delta), lambda).to_flow()
}

/// Coarse flows from the reference to each neighbour, with the reference
/// re-exposed to match the neighbour first.
pub fn coarse_flows(window: &[ExposureFrame; 3], sources: [&FlowSource; 2]) -> Result<(FlowField, FlowField)> {
    let ref_prev = exposure_normalize(&window[1], window[0].exposure)?;
    let ref_next = exposure_normalize(&window[1], window[2].exposure)?;
    let prev = estimate_coarse_pair(&ref_prev, &window[0].image, sources[0])?;
    let next = estimate_coarse_pair(&ref_next, &window[2].image, sources[1])?;
    Ok((prev, next))
}

fn mask_of(fw: &MaskForward<f32>) -> Result<MotionMask> {
    Ok(MotionMask {
        values: fw.mask.to_image()?,
        threshold: fw.threshold,
    })
}

/// Runs the coarse stage with already estimated coarse flows.
pub fn run_stage1_with_flows(
    window: &[ExposureFrame; 3],
    coarse_prev: FlowField,
    coarse_next: FlowField,
    params: &ParamStore<f32>,
    cfg: &Stage1Config,
) -> Result<(Stage1Output, Stage1Inputs<f32>, Stage1Forward<f32>)> {
    cfg.validate()?;
    let inp = Stage1Inputs::from_window(window, &coarse_prev, &coarse_next)?;
    let fw = stage1_forward(cfg, params, &inp, [MaskOptions::default(); 2])?;
    let out = Stage1Output {
        h_coarse: fw.h_coarse.to_image()?,
        coarse_prev,
        coarse_next,
        flow_prev: fw.flow_prev.to_flow()?,
        flow_next: fw.flow_next.to_flow()?,
        mask_prev: mask_of(&fw.mask_prev)?,
        mask_next: mask_of(&fw.mask_next)?,
    };
    Ok((out, inp, fw))
}

/// Full coarse stage: flow estimation, adapter, warping, fusion and masks.
pub fn run_stage1(
    window: &[ExposureFrame; 3],
    sources: [&FlowSource; 2],
    params: &ParamStore<f32>,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    let (prev, next) = coarse_flows(window, sources)?;
    Ok(run_stage1_with_flows(window, prev, next, params, cfg)?.0)
}
