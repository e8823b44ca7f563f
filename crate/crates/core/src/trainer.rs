//! Synthetic alternating-exposure data, the μ-law L1 loss, Adam and the
//! training loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coarseflow::{endpoint_error, FlowSource, HornSchunckConfig};
use crate::error::{Error, Result};
use crate::exposure::{TonemapConfig, DEFAULT_MU};
use crate::metrics::{psnr_t, window_warp_psnr};
use crate::nnkit::{Real, Tensor4};
use crate::pipeline::{model_backward, model_forward, Model, ModelConfig, MODEL_CONFIG_FILE};
use crate::stage1::{coarse_flows, Stage1Inputs};
use crate::tensorio::{save_params, ExposureFrame, FlowField, ImagePlane, ParamStore};

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Short and long exposure.
    pub exposures: (f64, f64),
    pub gamma: f64,
    /// Noise standard deviation in LDR units at exposure 1; divided by the
    /// exposure of each frame.
    pub noise: f64,
    /// Approximate fraction of the frame covered by bright highlights.
    pub saturation: f64,
    pub max_translation: f64,
    /// Radians.
    pub max_rotation: f64,
    /// Relative scale change.
    pub max_divergence: f64,
    /// Round LDR values to 8 bits.
    pub quantize: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            exposures: (1.0, 4.0),
            gamma: ExposureFrame::DEFAULT_GAMMA,
            noise: 0.01,
            saturation: 0.1,
            max_translation: 2.0,
            max_rotation: 0.03,
            max_divergence: 0.03,
            quantize: true,
        }
    }
}

impl SceneConfig {
    /// No motion, noise or quantization.
    pub fn still() -> Self {
        SceneConfig {
            noise: 0.0,
            max_translation: 0.0,
            max_rotation: 0.0,
            max_divergence: 0.0,
            quantize: false,
            ..SceneConfig::default()
        }
    }
}

/// Affine motion about the image centre: `T(p) = c + A(p − c) + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
    pub center: [f64; 2],
}

impl Motion {
    pub fn new(translation: (f64, f64), rotation: f64, divergence: f64, center: (f64, f64)) -> Self {
        let s = 1.0 + divergence;
        let (sin, cos) = rotation.sin_cos();
        Motion {
            a: [[s * cos, -s * sin], [s * sin, s * cos]],
            t: [translation.0, translation.1],
            center: [center.0, center.1],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (
            self.center[0] + self.a[0][0] * dx + self.a[0][1] * dy + self.t[0],
            self.center[1] + self.a[1][0] * dx + self.a[1][1] * dy + self.t[1],
        )
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let (dx, dy) = (x - self.center[0] - self.t[0], y - self.center[1] - self.t[1]);
        (
            self.center[0] + (d * dx - b * dy) / det,
            self.center[1] + (-c * dx + a * dy) / det,
        )
    }

    /// Flow from the reference grid to the moved frame, `T(p) − p`.
    pub fn flow(&self, h: usize, w: usize) -> FlowField {
        FlowField::from_fn(h, w, |y, x| {
            let (tx, ty) = self.apply(x as f64, y as f64);
            ((tx - x as f64) as f32, (ty - y as f64) as f32)
        })
    }
}

#[derive(Clone, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    amp: [f64; 3],
}

/// Continuous radiance field in `[0, 1]`.
#[derive(Clone, Debug)]
struct Radiance {
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl Radiance {
    fn random(r: &mut ChaCha8Rng, size: usize, saturation: f64) -> Self {
        let waves = (0..5)
            .map(|_| {
                let freq = r.random_range(0.08..0.5);
                let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
                Wave {
                    fx: freq * angle.cos(),
                    fy: freq * angle.sin(),
                    phase: r.random_range(0.0..std::f64::consts::TAU),
                    amp: [r.random_range(0.2..1.0), r.random_range(0.2..1.0), r.random_range(0.2..1.0)],
                }
            })
            .collect();
        let mean_radius = size as f64 / 10.0;
        let area = (size * size) as f64;
        let count = (saturation * area / (std::f64::consts::PI * mean_radius * mean_radius)).round() as usize;
        let blobs = (0..count)
            .map(|_| Blob {
                x: r.random_range(0.0..size as f64),
                y: r.random_range(0.0..size as f64),
                radius: r.random_range(0.6 * mean_radius..1.4 * mean_radius),
                amp: [r.random_range(0.5..0.8), r.random_range(0.5..0.8), r.random_range(0.5..0.8)],
            })
            .collect();
        Radiance { waves, blobs }
    }

    fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|w| w.amp[c] * (w.fx * x + w.fy * y + w.phase).sin())
            .sum();
        let mut v = 0.12 + 0.1 * (0.8 * s).tanh();
        for b in &self.blobs {
            let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
            v += b.amp[c] * (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
        v.clamp(0.0, 1.0)
    }
}

/// One synthetic window with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthWindow {
    pub frames: [ExposureFrame; 3],
    pub gt_flow_prev: FlowField,
    pub gt_flow_next: FlowField,
    pub gt_hdr: ImagePlane,
}

fn random_motion(r: &mut ChaCha8Rng, cfg: &SceneConfig, size: usize) -> Motion {
    let sym = |r: &mut ChaCha8Rng, m: f64| if m > 0.0 { r.random_range(-m..m) } else { 0.0 };
    let t = (sym(r, cfg.max_translation), sym(r, cfg.max_translation));
    let rot = sym(r, cfg.max_rotation);
    let div = sym(r, cfg.max_divergence);
    let c = (size as f64 - 1.0) / 2.0;
    Motion::new(t, rot, div, (c, c))
}

fn render(
    scene: &Radiance,
    motion: Option<&Motion>,
    size: usize,
    exposure: f64,
    cfg: &SceneConfig,
    r: &mut ChaCha8Rng,
) -> Result<ExposureFrame> {
    let sigma = cfg.noise / exposure;
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = match motion {
                Some(m) => m.invert(x as f64, y as f64),
                None => (x as f64, y as f64),
            };
            for c in 0..3 {
                let h = scene.sample(sx, sy, c);
                let mut l = (h * exposure).powf(1.0 / cfg.gamma);
                if sigma > 0.0 {
                    l += normal.sample(r);
                }
                if cfg.quantize {
                    l = (l.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                data.push(l.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ExposureFrame::new(ImagePlane::new(size, size, 3, data)?, exposure, cfg.gamma)
}

/// Deterministic synthetic window. The neighbours share one exposure and the
/// reference uses the other; which one is short is drawn from `seed`.
pub fn synth_window(seed: u64, size: usize, cfg: &SceneConfig) -> Result<SynthWindow> {
    if size < 32 {
        return Err(Error::InvalidConfig(format!("synthetic windows need size >= 32, got {size}")));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let scene = Radiance::random(&mut r, size, cfg.saturation);
    let prev = random_motion(&mut r, cfg, size);
    let next = random_motion(&mut r, cfg, size);
    let (short, long) = cfg.exposures;
    let (e_ref, e_nb) = if r.random_bool(0.5) { (short, long) } else { (long, short) };
    let frames = [
        render(&scene, Some(&prev), size, e_nb, cfg, &mut r)?,
        render(&scene, None, size, e_ref, cfg, &mut r)?,
        render(&scene, Some(&next), size, e_nb, cfg, &mut r)?,
    ];
    let gt_hdr = ImagePlane::from_fn(size, size, 3, |y, x, c| scene.sample(x as f64, y as f64, c) as f32);
    Ok(SynthWindow {
        frames,
        gt_flow_prev: prev.flow(size, size),
        gt_flow_next: next.flow(size, size),
        gt_hdr,
    })
}

// ---------------------------------------------------------------------------
// Loss

/// Mean `|T(h) − T(gt)|` and its gradient with respect to `h`.
pub fn loss_mu_l1_tensor<T: Real>(h: &Tensor4<T>, gt: &Tensor4<T>, mu: f64) -> Result<(T, Tensor4<T>)> {
    if h.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!("loss {:?} vs {:?}", h.dims(), gt.dims())));
    }
    if let Some(v) = h.data.iter().chain(&gt.data).find(|v| **v < T::zero()) {
        return Err(Error::NegativeInput(v.as_f64()));
    }
    let n = T::from_f64(h.data.len() as f64);
    let mu_t = T::from_f64(mu);
    let norm = T::from_f64(mu.ln_1p());
    let tm = |v: T| (mu_t * v).ln_1p() / norm;
    let mut loss = T::zero();
    let mut grad = h.zeros_like();
    for (i, (&a, &b)) in h.data.iter().zip(&gt.data).enumerate() {
        let d = tm(a) - tm(b);
        loss += d.abs();
        let sign = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad.data[i] = sign * mu_t / ((T::one() + mu_t * a) * norm) / n;
    }
    Ok((loss / n, grad))
}

/// μ-law L1 loss on images; returns the loss and `∂loss/∂h_final`.
pub fn loss_mu_l1(h_final: &ImagePlane, h_gt: &ImagePlane, cfg: TonemapConfig) -> Result<(f64, ImagePlane)> {
    if h_final.dims() != h_gt.dims() {
        return Err(Error::DimMismatch(format!("loss {:?} vs {:?}", h_final.dims(), h_gt.dims())));
    }
    let (l, g) = loss_mu_l1_tensor(
        &Tensor4::<f64>::from_image(h_final),
        &Tensor4::<f64>::from_image(h_gt),
        cfg.mu,
    )?;
    Ok((l, g.cast::<f32>().to_image()?))
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments and step count of Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParamStore<f64>,
    pub v: ParamStore<f64>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>, cfg: AdamConfig) -> Self {
        AdamState {
            m: params.filled_like(0.0),
            v: params.filled_like(0.0),
            step: 0,
            cfg,
        }
    }
}

/// One bias-corrected Adam update of `params` with learning rate `lr`.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &ParamStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::ShapeMismatch("adam: params, grads and moments differ".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let entries = params.entries_mut().iter_mut();
    let moments = state.m.entries_mut().iter_mut().zip(state.v.entries_mut().iter_mut());
    for ((p, g), (m, v)) in entries.zip(grads.entries()).zip(moments) {
        for i in 0..p.values.len() {
            let gi = g.values[i] as f64;
            m.values[i] = beta1 * m.values[i] + (1.0 - beta1) * gi;
            v.values[i] = beta2 * v.values[i] + (1.0 - beta2) * gi * gi;
            let update = lr * (m.values[i] / c1) / ((v.values[i] / c2).sqrt() + eps);
            p.values[i] = (p.values[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub flow: HornSchunckConfig,
    pub adam: AdamConfig,
    pub size: usize,
    pub dataset: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// The learning rate halves every this many epochs; 0 disables.
    pub halve_every_epochs: usize,
    pub seed: u64,
    pub flips: bool,
    /// Checkpoint interval in steps; 0 writes only the first and last.
    pub checkpoint_every: usize,
    pub mu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            flow: HornSchunckConfig::default(),
            adam: AdamConfig::default(),
            size: 64,
            dataset: 500,
            batch: 4,
            steps: 2000,
            lr: 1e-4,
            halve_every_epochs: 10,
            seed: 0,
            flips: true,
            checkpoint_every: 500,
            mu: DEFAULT_MU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        if self.batch == 0 || self.dataset == 0 || !(self.lr > 0.0) || !(self.mu > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "batch {}, dataset {}, lr {}, mu {} must be positive",
                self.batch, self.dataset, self.lr, self.mu
            )));
        }
        Ok(())
    }

    /// Learning rate used at `step` (counted from 0).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.halve_every_epochs == 0 {
            return self.lr;
        }
        let epoch = step * self.batch / self.dataset;
        self.lr * 0.5f64.powi((epoch / self.halve_every_epochs) as i32)
    }
}

/// A synthetic window prepared for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub window: SynthWindow,
    pub coarse_prev: FlowField,
    pub coarse_next: FlowField,
    pub inputs: Stage1Inputs<f32>,
    pub gt: Tensor4<f32>,
}

impl Sample {
    pub fn new(window: SynthWindow, flow: &HornSchunckConfig) -> Result<Self> {
        let src = FlowSource::Classical(*flow);
        let (coarse_prev, coarse_next) = coarse_flows(&window.frames, [&src, &src])?;
        let inputs = Stage1Inputs::from_window(&window.frames, &coarse_prev, &coarse_next)?;
        let gt = Tensor4::from_image(&window.gt_hdr);
        Ok(Sample {
            window,
            coarse_prev,
            coarse_next,
            inputs,
            gt,
        })
    }
}

/// Seeds of `count` windows drawn from `seed`.
pub fn window_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| r.random()).collect()
}

pub fn build_dataset(cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    window_seeds(seed, count)
        .into_iter()
        .map(|s| Sample::new(synth_window(s, cfg.size, &cfg.scene)?, &cfg.flow))
        .collect()
}

fn flip_tensor<T: Real>(t: &Tensor4<T>) -> Tensor4<T> {
    let mut o = t.clone();
    for c in 0..t.c {
        for y in 0..t.h {
            for x in 0..t.w {
                *o.at_mut(0, c, y, x) = t.at(0, c, y, t.w - 1 - x);
            }
        }
    }
    o
}

/// Final parameters and the per-step mean batch loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_step_{step:06}.f2hw")
}

pub const LOSS_LOG: &str = "loss.tsv";

/// Loss and parameter gradients of one sample, accumulated into `grads`.
pub fn sample_gradient(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    inputs: &Stage1Inputs<f32>,
    gt: &Tensor4<f32>,
    mu: f64,
    grads: &mut ParamStore<f32>,
) -> Result<f64> {
    let fw = model_forward(cfg, params, inputs)?;
    let (loss, g) = loss_mu_l1_tensor(&fw.stage2.h_final, gt, mu)?;
    model_backward(cfg, params, inputs, &fw, &g, grads)?;
    Ok(loss as f64)
}

/// Generates the training set from `cfg.seed` and trains on it.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = build_dataset(cfg, cfg.dataset, cfg.seed)?;
    train_on(cfg, &data, out_dir)
}

/// Trains on prepared samples; writes checkpoints and the loss log when
/// `out_dir` is given.
pub fn train_on(cfg: &TrainConfig, data: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            cfg.model.save(dir.join(MODEL_CONFIG_FILE))?;
            save_params(&model.params, dir.join(checkpoint_name(0)))?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join(LOSS_LOG))?))
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grads = model.params.zeros_like();
    for step in 0..cfg.steps {
        grads.fill_zero();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &data[order[cursor]];
            cursor += 1;
            let flip = cfg.flips && rng.random_bool(0.5);
            total += if flip {
                let inputs = s.inputs.flipped();
                sample_gradient(&cfg.model, &model.params, &inputs, &flip_tensor(&s.gt), cfg.mu, &mut grads)?
            } else {
                sample_gradient(&cfg.model, &model.params, &s.inputs, &s.gt, cfg.mu, &mut grads)?
            };
        }
        let inv = 1.0 / cfg.batch as f32;
        for e in grads.entries_mut() {
            e.values.iter_mut().for_each(|v| *v *= inv);
        }
        adam_step(&mut model.params, &grads, &mut adam, cfg.lr_at(step))?;
        let loss = total / cfg.batch as f64;
        losses.push(loss);
        if let (Some(w), Some(dir)) = (log.as_mut(), out_dir) {
            writeln!(w, "{step}\t{loss:.9}")?;
            let done = step + 1;
            if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                save_params(&model.params, dir.join(checkpoint_name(done)))?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(TrainOutcome { model, losses })
}

// ---------------------------------------------------------------------------
// Held-out evaluation

/// Means over held-out windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub windows: usize,
    pub epe_coarse: f64,
    pub epe_refined: f64,
    pub warp_psnr_coarse: f64,
    pub warp_psnr_refined: f64,
    pub psnr_t_coarse: f64,
    pub psnr_t_final: f64,
}

pub fn evaluate_heldout(model: &Model, data: &[Sample], mu: f64) -> Result<HeldOutReport> {
    let mut acc = [0.0f64; 6];
    for s in data {
        let fw = model_forward(&model.config, &model.params, &s.inputs)?;
        let prev = fw.stage1.flow_prev.to_flow()?;
        let next = fw.stage1.flow_next.to_flow()?;
        let w = &s.window;
        let epe = |a: &FlowField, b: &FlowField| -> Result<f64> {
            Ok(0.5 * (endpoint_error(a, &w.gt_flow_prev)? + endpoint_error(b, &w.gt_flow_next)?))
        };
        acc[0] += epe(&s.coarse_prev, &s.coarse_next)?;
        acc[1] += epe(&prev, &next)?;
        acc[2] += window_warp_psnr(&w.frames, &s.coarse_prev, &s.coarse_next)?;
        acc[3] += window_warp_psnr(&w.frames, &prev, &next)?;
        acc[4] += psnr_t(&fw.stage1.h_coarse.to_image()?, &w.gt_hdr, mu)?;
        acc[5] += psnr_t(&fw.stage2.h_final.to_image()?, &w.gt_hdr, mu)?;
    }
    let n = data.len().max(1) as f64;
    Ok(HeldOutReport {
        windows: data.len(),
        epe_coarse: acc[0] / n,
        epe_refined: acc[1] / n,
        warp_psnr_coarse: acc[2] / n,
        warp_psnr_refined: acc[3] / n,
        psnr_t_coarse: acc[4] / n,
        psnr_t_final: acc[5] / n,
    })
}
