//! Refinement: per-frame LDR/HDR features, motion-gated alignment of the
//! neighbour features, dilated enhancement and a residual decoder on top of
//! `H_coarse`.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::motionphys::MotionMask;
use crate::nnkit::{concat_channels, sigmoid, sigmoid_backward, split_channels, ConvCache, ConvLayer, ConvSpec, Real, Tensor4};
use crate::stage1::{warp_tensor, warp_tensor_backward, Stage1Grads, Stage1Inputs, Stage1Output};
use crate::tensorio::{ExposureFrame, FlowField, ImagePlane, ParamStore};

pub const FLOW_MAX_FLOOR: f64 = 1e-6;

/// Widths and switches of the refinement network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub channels: usize,
    pub dilations: [usize; 3],
    pub decoder: [usize; 2],
    /// When false the neighbour features pass through ungated.
    pub gate: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            channels: 32,
            dilations: [1, 2, 4],
            decoder: [32, 16],
            gate: true,
        }
    }
}

/// Named layers of the refinement network.
#[derive(Clone, Debug)]
struct Net {
    enc: [ConvLayer; 2],
    fuse_li: ConvLayer,
    gate: Option<ConvLayer>,
    branches: [ConvLayer; 3],
    merge: ConvLayer,
    henc: [ConvLayer; 2],
    dec: [ConvLayer; 3],
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.decoder.contains(&0) || self.dilations.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid refine config {self:?}")));
        }
        Ok(())
    }

    fn net(&self) -> Net {
        let c = self.channels;
        let [d0, d1] = self.decoder;
        let branch = |d: usize| ConvLayer::new(format!("refine.enhance.d{d}"), ConvSpec::new(3 * c, c, 3).dilation(d), true);
        Net {
            enc: [
                ConvLayer::new("refine.enc.conv1", ConvSpec::new(3, c, 3), true),
                ConvLayer::new("refine.enc.conv2", ConvSpec::new(c, c, 3), true),
            ],
            fuse_li: ConvLayer::new("refine.fuse_li", ConvSpec::new(2 * c, c, 1), false),
            gate: self
                .gate
                .then(|| ConvLayer::new("refine.gate", ConvSpec::new(3, c, 3), false)),
            branches: [branch(self.dilations[0]), branch(self.dilations[1]), branch(self.dilations[2])],
            merge: ConvLayer::new("refine.enhance.merge", ConvSpec::new(3 * c, c, 1), false),
            henc: [
                ConvLayer::new("refine.henc.conv1", ConvSpec::new(3, c, 3), true),
                ConvLayer::new("refine.henc.conv2", ConvSpec::new(c, c, 3), true),
            ],
            dec: [
                ConvLayer::new("refine.dec.conv1", ConvSpec::new(2 * c, d0, 3), true),
                ConvLayer::new("refine.dec.conv2", ConvSpec::new(d0, d1, 3), true),
                ConvLayer::new("refine.dec.head", ConvSpec::new(d1, 3, 3), false).zero_init(),
            ],
        }
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let n = self.net();
        let [e0, e1] = n.enc;
        let mut out = vec![e0, e1, n.fuse_li];
        out.extend(n.gate);
        out.extend(n.branches);
        out.push(n.merge);
        out.extend(n.henc);
        out.extend(n.dec);
        out
    }
}

type PairCache<T> = (ConvCache<T>, ConvCache<T>);

fn run_pair<T: Real>(layers: &[ConvLayer; 2], p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, PairCache<T>)> {
    let (h, c1) = layers[0].forward(p, x)?;
    let (y, c2) = layers[1].forward(p, &h)?;
    Ok((y, (c1, c2)))
}

fn back_pair<T: Real>(
    layers: &[ConvLayer; 2],
    p: &ParamStore<T>,
    cache: &PairCache<T>,
    g: &Tensor4<T>,
    grads: &mut ParamStore<T>,
) -> Result<()> {
    let gh = layers[1].backward(p, &cache.1, g, grads, true)?.expect("grad");
    layers[0].backward(p, &cache.0, &gh, grads, false)?;
    Ok(())
}

#[derive(Clone, Debug)]
struct EncodeCache<T> {
    l: PairCache<T>,
    i: PairCache<T>,
    fuse: ConvCache<T>,
}

fn encode<T: Real>(net: &Net, p: &ParamStore<T>, l: &Tensor4<T>, i: &Tensor4<T>) -> Result<(Tensor4<T>, EncodeCache<T>)> {
    let (fl, cl) = run_pair(&net.enc, p, l)?;
    let (fi, ci) = run_pair(&net.enc, p, i)?;
    let (f, fuse) = net.fuse_li.forward(p, &concat_channels(&[&fl, &fi])?)?;
    Ok((f, EncodeCache { l: cl, i: ci, fuse }))
}

fn encode_backward<T: Real>(
    net: &Net,
    p: &ParamStore<T>,
    cache: &EncodeCache<T>,
    g: &Tensor4<T>,
    grads: &mut ParamStore<T>,
) -> Result<()> {
    let gcat = net.fuse_li.backward(p, &cache.fuse, g, grads, true)?.expect("grad");
    let c = gcat.c / 2;
    let parts = split_channels(&gcat, &[c, c]);
    back_pair(&net.enc, p, &cache.l, &parts[0], grads)?;
    back_pair(&net.enc, p, &cache.i, &parts[1], grads)
}

/// Flow magnitude over its (floored) maximum, with what the gradient needs.
#[derive(Clone, Debug)]
struct NormMag<T> {
    mag: Tensor4<T>,
    norm: Tensor4<T>,
    denom: T,
    /// Index of the maximum when it sets the denominator.
    argmax: Option<usize>,
}

fn norm_magnitude<T: Real>(flow: &Tensor4<T>) -> NormMag<T> {
    let hw = flow.plane_len();
    let mut mag = Tensor4::zeros(1, 1, flow.h, flow.w);
    for i in 0..hw {
        let (u, v) = (flow.data[i], flow.data[hw + i]);
        mag.data[i] = (u * u + v * v).sqrt();
    }
    let mut max = mag.data[0];
    let mut idx = 0;
    for (i, &m) in mag.data.iter().enumerate() {
        if m > max {
            max = m;
            idx = i;
        }
    }
    let floor = T::from_f64(FLOW_MAX_FLOOR);
    let (denom, argmax) = if max > floor { (max, Some(idx)) } else { (floor, None) };
    let norm = mag.map(|m| m / denom);
    NormMag { mag, norm, denom, argmax }
}

fn norm_magnitude_backward<T: Real>(nm: &NormMag<T>, flow: &Tensor4<T>, g_norm: &Tensor4<T>) -> Tensor4<T> {
    let hw = flow.plane_len();
    let mut g_mag = g_norm.map(|g| g / nm.denom);
    if let Some(a) = nm.argmax {
        let d2 = nm.denom * nm.denom;
        let g_den: T = g_norm.data.iter().zip(&nm.mag.data).map(|(&g, &m)| -g * m / d2).sum();
        g_mag.data[a] += g_den;
    }
    let mut g_flow = flow.zeros_like();
    for i in 0..hw {
        let m = nm.mag.data[i];
        if m > T::zero() {
            g_flow.data[i] = g_mag.data[i] * flow.data[i] / m;
            g_flow.data[hw + i] = g_mag.data[i] * flow.data[hw + i] / m;
        }
    }
    g_flow
}

fn gate_input<T: Real>(nm: &NormMag<T>, mask: &Tensor4<T>) -> Result<Tensor4<T>> {
    let ones = Tensor4::filled(1, 1, mask.h, mask.w, T::one());
    concat_channels(&[&nm.norm, mask, &ones])
}

#[derive(Clone, Debug)]
struct GateCache<T> {
    nm: NormMag<T>,
    conv: ConvCache<T>,
    gate: Tensor4<T>,
}

fn gate_forward<T: Real>(layer: &ConvLayer, p: &ParamStore<T>, flow: &Tensor4<T>, mask: &Tensor4<T>) -> Result<GateCache<T>> {
    let nm = norm_magnitude(flow);
    let (pre, conv) = layer.forward(p, &gate_input(&nm, mask)?)?;
    Ok(GateCache {
        nm,
        conv,
        gate: sigmoid(&pre),
    })
}

/// Returns gradients for the flow and the mask.
fn gate_backward<T: Real>(
    layer: &ConvLayer,
    p: &ParamStore<T>,
    cache: &GateCache<T>,
    flow: &Tensor4<T>,
    g_gate: &Tensor4<T>,
    grads: &mut ParamStore<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let g_pre = sigmoid_backward(g_gate, &cache.gate);
    let g_in = layer.backward(p, &cache.conv, &g_pre, grads, true)?.expect("grad");
    let parts = split_channels(&g_in, &[1, 1, 1]);
    Ok((norm_magnitude_backward(&cache.nm, flow, &parts[0]), parts[1].clone()))
}

/// Forward values of the refinement stage kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Stage2Forward<T> {
    pub h_final: Tensor4<T>,
    pub gate_prev: Option<Tensor4<T>>,
    pub gate_next: Option<Tensor4<T>>,
    enc: Vec<EncodeCache<T>>,
    f_li: Vec<Tensor4<T>>,
    warped: [Tensor4<T>; 2],
    gates: [Option<GateCache<T>>; 2],
    branches: Vec<ConvCache<T>>,
    merge: ConvCache<T>,
    henc: PairCache<T>,
    dec: Vec<ConvCache<T>>,
    pre_clamp: Tensor4<T>,
}

/// Tensors handed from the coarse stage.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Inputs<'a, T> {
    pub ldr: &'a [Tensor4<T>; 3],
    pub hdr: &'a [Tensor4<T>; 3],
    pub h_coarse: &'a Tensor4<T>,
    pub flows: [&'a Tensor4<T>; 2],
    pub masks: [&'a Tensor4<T>; 2],
}

pub fn stage2_forward<T: Real>(cfg: &RefineConfig, p: &ParamStore<T>, inp: Stage2Inputs<'_, T>) -> Result<Stage2Forward<T>> {
    let net = cfg.net();
    let mut enc = Vec::with_capacity(3);
    let mut f_li = Vec::with_capacity(3);
    for k in 0..3 {
        let (f, c) = encode(&net, p, &inp.ldr[k], &inp.hdr[k])?;
        enc.push(c);
        f_li.push(f);
    }
    let warped = [warp_tensor(&f_li[0], inp.flows[0])?, warp_tensor(&f_li[2], inp.flows[1])?];
    let mut gates: [Option<GateCache<T>>; 2] = [None, None];
    let mut modulated = Vec::with_capacity(2);
    for k in 0..2 {
        match &net.gate {
            Some(layer) => {
                let gc = gate_forward(layer, p, inp.flows[k], inp.masks[k])?;
                modulated.push(warped[k].zip_map(&gc.gate, |f, g| f * g));
                gates[k] = Some(gc);
            }
            None => modulated.push(warped[k].clone()),
        }
    }
    let enh_in = concat_channels(&[&modulated[0], &f_li[1], &modulated[1]])?;
    let mut branch_out = Vec::with_capacity(3);
    let mut branches = Vec::with_capacity(3);
    for b in &net.branches {
        let (y, c) = b.forward(p, &enh_in)?;
        branch_out.push(y);
        branches.push(c);
    }
    let (enhanced, merge) = net.merge.forward(p, &concat_channels(&[&branch_out[0], &branch_out[1], &branch_out[2]])?)?;
    let (f_h, henc) = run_pair(&net.henc, p, inp.h_coarse)?;
    let mut x = concat_channels(&[&enhanced, &f_h])?;
    let mut dec = Vec::with_capacity(3);
    for layer in &net.dec {
        let (y, c) = layer.forward(p, &x)?;
        dec.push(c);
        x = y;
    }
    let pre_clamp = inp.h_coarse.zip_map(&x, |h, d| if d == T::zero() { h } else { h + d });
    let h_final = pre_clamp.map(|v| v.max(T::zero()).min(T::one()));
    let [g0, g1] = &gates;
    Ok(Stage2Forward {
        h_final,
        gate_prev: g0.as_ref().map(|g| g.gate.clone()),
        gate_next: g1.as_ref().map(|g| g.gate.clone()),
        enc,
        f_li,
        warped,
        gates,
        branches,
        merge,
        henc,
        dec,
        pre_clamp,
    })
}

/// Backpropagates `g_final`, accumulating parameter gradients and returning
/// gradients for the coarse-stage outputs.
pub fn stage2_backward<T: Real>(
    cfg: &RefineConfig,
    p: &ParamStore<T>,
    inp: Stage2Inputs<'_, T>,
    fw: &Stage2Forward<T>,
    g_final: &Tensor4<T>,
    grads: &mut ParamStore<T>,
) -> Result<Stage1Grads<T>> {
    let net = cfg.net();
    let c = cfg.channels;
    let g_pre = g_final.zip_map(&fw.pre_clamp, |g, v| if v >= T::zero() && v <= T::one() { g } else { T::zero() });

    let mut g = g_pre.clone();
    for (layer, cache) in net.dec.iter().zip(&fw.dec).rev() {
        g = layer.backward(p, cache, &g, grads, true)?.expect("grad");
    }
    let parts = split_channels(&g, &[c, c]);
    let (g_enh, g_fh) = (&parts[0], &parts[1]);

    let gh1 = net.henc[1].backward(p, &fw.henc.1, g_fh, grads, true)?.expect("grad");
    let mut g_hc = net.henc[0].backward(p, &fw.henc.0, &gh1, grads, true)?.expect("grad");
    g_hc.add_assign(&g_pre);

    let g_cat = net.merge.backward(p, &fw.merge, g_enh, grads, true)?.expect("grad");
    let g_branch = split_channels(&g_cat, &[c, c, c]);
    let mut g_enh_in: Option<Tensor4<T>> = None;
    for ((b, cache), gb) in net.branches.iter().zip(&fw.branches).zip(&g_branch) {
        let gi = b.backward(p, cache, gb, grads, true)?.expect("grad");
        match g_enh_in.as_mut() {
            Some(acc) => acc.add_assign(&gi),
            None => g_enh_in = Some(gi),
        }
    }
    let g_enh_in = g_enh_in.expect("three branches");
    let parts = split_channels(&g_enh_in, &[c, c, c]);
    let g_mod = [&parts[0], &parts[2]];
    let mut g_fli = [Tensor4::zeros(1, c, g.h, g.w), parts[1].clone(), Tensor4::zeros(1, c, g.h, g.w)];

    let mut g_flow = [inp.flows[0].zeros_like(), inp.flows[1].zeros_like()];
    let mut g_mask = [inp.masks[0].zeros_like(), inp.masks[1].zeros_like()];
    for k in 0..2 {
        let g_warped = match (&fw.gates[k], &net.gate) {
            (Some(gc), Some(layer)) => {
                let g_gate = g_mod[k].zip_map(&fw.warped[k], |gm, f| gm * f);
                let (gf, gm) = gate_backward(layer, p, gc, inp.flows[k], &g_gate, grads)?;
                g_flow[k].add_assign(&gf);
                g_mask[k].add_assign(&gm);
                g_mod[k].zip_map(&gc.gate, |gm, gv| gm * gv)
            }
            _ => g_mod[k].clone(),
        };
        let src = if k == 0 { &fw.f_li[0] } else { &fw.f_li[2] };
        let (gx, gf) = warp_tensor_backward(&g_warped, src, inp.flows[k], true)?;
        g_flow[k].add_assign(&gf);
        g_fli[2 * k].add_assign(&gx.expect("grad"));
    }
    for k in 0..3 {
        encode_backward(&net, p, &fw.enc[k], &g_fli[k], grads)?;
    }
    let [flow_prev, flow_next] = g_flow;
    let [mask_prev, mask_next] = g_mask;
    Ok(Stage1Grads {
        h_coarse: g_hc,
        flow_prev,
        flow_next,
        mask_prev,
        mask_next,
    })
}

// ---------------------------------------------------------------------------
// Image-level API

/// Shared encoder on `L` and `I`, fused by a 1×1 convolution.
pub fn encode_frame(l: &ImagePlane, i: &ImagePlane, params: &ParamStore<f32>, cfg: &RefineConfig) -> Result<Tensor4<f32>> {
    if l.dims() != i.dims() || l.channels() != 3 {
        return Err(Error::DimMismatch(format!("encode {:?} with {:?}", l.dims(), i.dims())));
    }
    let net = cfg.net();
    Ok(encode(&net, params, &Tensor4::from_image(l), &Tensor4::from_image(i))?.0)
}

/// Channel-wise backward warp of a feature map.
pub fn warp_features(features: &Tensor4<f32>, flow: &FlowField) -> Result<Tensor4<f32>> {
    warp_tensor(features, &Tensor4::from_flow(flow))
}

/// `σ(conv([‖f̃‖/f̃_max, M, 1]))`.
pub fn motion_gate(flow: &FlowField, mask: &MotionMask, params: &ParamStore<f32>, cfg: &RefineConfig) -> Result<Tensor4<f32>> {
    if (mask.values.height(), mask.values.width()) != flow.dims() {
        return Err(Error::DimMismatch("gate flow vs mask".into()));
    }
    let layer = cfg
        .net()
        .gate
        .ok_or_else(|| Error::InvalidConfig("motion gate is disabled".into()))?;
    let g = gate_forward(&layer, params, &Tensor4::from_flow(flow), &Tensor4::from_image(&mask.values))?;
    Ok(g.gate)
}

/// `G ⊙ F̃`.
pub fn modulate(features: &Tensor4<f32>, gate: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    if features.dims() != gate.dims() {
        return Err(Error::DimMismatch(format!("modulate {:?} by {:?}", features.dims(), gate.dims())));
    }
    Ok(features.zip_map(gate, |f, g| f * g))
}

/// Three dilated branches merged by a 1×1 convolution.
pub fn enhance(features: &Tensor4<f32>, params: &ParamStore<f32>, cfg: &RefineConfig) -> Result<Tensor4<f32>> {
    let net = cfg.net();
    let mut outs = Vec::with_capacity(3);
    for b in &net.branches {
        outs.push(b.infer(params, features)?);
    }
    net.merge.infer(params, &concat_channels(&[&outs[0], &outs[1], &outs[2]])?)
}

/// Decodes enhanced features plus `H_coarse` features into `H_final`.
pub fn fuse_and_decode(
    enhanced: &Tensor4<f32>,
    h_coarse: &ImagePlane,
    params: &ParamStore<f32>,
    cfg: &RefineConfig,
) -> Result<ImagePlane> {
    let net = cfg.net();
    let hc = Tensor4::from_image(h_coarse);
    let fh = net.henc[1].infer(params, &net.henc[0].infer(params, &hc)?)?;
    let mut x = concat_channels(&[enhanced, &fh])?;
    for layer in &net.dec {
        x = layer.infer(params, &x)?;
    }
    hc.zip_map(&x, |h, d| if d == 0.0 { h } else { h + d })
        .map(|v| v.clamp(0.0, 1.0))
        .to_image()
}

/// Refinement stage on top of a coarse-stage result.
pub fn run_stage2(
    window: &[ExposureFrame; 3],
    s1: &Stage1Output,
    params: &ParamStore<f32>,
    cfg: &RefineConfig,
) -> Result<ImagePlane> {
    cfg.validate()?;
    let inp = Stage1Inputs::<f32>::from_window(window, &s1.coarse_prev, &s1.coarse_next)?;
    let h = Tensor4::from_image(&s1.h_coarse);
    let flows = [Tensor4::from_flow(&s1.flow_prev), Tensor4::from_flow(&s1.flow_next)];
    let masks = [Tensor4::from_image(&s1.mask_prev.values), Tensor4::from_image(&s1.mask_next.values)];
    let fw = stage2_forward(
        cfg,
        params,
        Stage2Inputs {
            ldr: &inp.ldr,
            hdr: &inp.hdr,
            h_coarse: &h,
            flows: [&flows[0], &flows[1]],
            masks: [&masks[0], &masks[1]],
        },
    )?;
    fw.h_final.to_image()
}
