//! The full two-stage model: configuration, parameters, joint forward and
//! backward passes, and sliding-window reconstruction of sequences.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coarseflow::{FlowSource, HornSchunckConfig};
use crate::error::{Error, Result};
use crate::nnkit::{init_params, ConvLayer, Real, Tensor4};
use crate::stage1::{
    coarse_flows, run_stage1_with_flows, stage1_backward, stage1_forward, Stage1Config, Stage1Forward, Stage1Inputs,
    Stage1Output,
};
use crate::stage2::{stage2_backward, stage2_forward, RefineConfig, Stage2Forward, Stage2Inputs};
use crate::metrics::{frame_metrics, frame_stem, load_ground_truth, window_warp_psnr, MetricReport};
use crate::motionphys::MaskOptions;
use crate::tensorio::{load_params, ExposureFrame, ImagePlane, ParamStore, SequenceManifest};

/// File holding the model configuration next to checkpoints.
pub const MODEL_CONFIG_FILE: &str = "model.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stage1: Stage1Config,
    pub refine: RefineConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.refine.validate()
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut l = self.stage1.layers();
        l.extend(self.refine.layers());
        l
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Configuration plus a parameter set that matches it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Freshly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.layers(), seed)?;
        Ok(Model { config, params })
    }

    /// Checks that `params` holds every tensor of `config` with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        for layer in config.layers() {
            let spec = &layer.spec;
            params.tensor_shaped(&layer.weight_name(), &spec.weight_shape())?;
            params.tensor_shaped(&layer.bias_name(), &[spec.out_ch])?;
            if layer.prelu {
                params.tensor_shaped(&layer.slope_name(), &[spec.out_ch])?;
            }
        }
        Ok(Model { config, params })
    }

    /// Loads a checkpoint; the configuration comes from `config` or, when
    /// absent, from `model.json` beside the checkpoint, else the default.
    pub fn load(checkpoint: impl AsRef<Path>, config: Option<ModelConfig>) -> Result<Self> {
        let checkpoint = checkpoint.as_ref();
        if !checkpoint.is_file() {
            return Err(Error::MissingCheckpoint(checkpoint.to_path_buf()));
        }
        let config = match config {
            Some(c) => c,
            None => {
                let side = checkpoint
                    .parent()
                    .map(|d| d.join(MODEL_CONFIG_FILE))
                    .filter(|p| p.is_file());
                match side {
                    Some(p) => ModelConfig::load(p)?,
                    None => ModelConfig::default(),
                }
            }
        };
        Model::from_parts(config, load_params(checkpoint)?)
    }
}

/// Forward values of both stages.
#[derive(Clone, Debug)]
pub struct ModelForward<T> {
    pub stage1: Stage1Forward<T>,
    pub stage2: Stage2Forward<T>,
}

fn refine_inputs<'a, T: Real>(inp: &'a Stage1Inputs<T>, s1: &'a Stage1Forward<T>) -> Stage2Inputs<'a, T> {
    Stage2Inputs {
        ldr: &inp.ldr,
        hdr: &inp.hdr,
        h_coarse: &s1.h_coarse,
        flows: [&s1.flow_prev, &s1.flow_next],
        masks: [&s1.mask_prev.mask, &s1.mask_next.mask],
    }
}

pub fn model_forward<T: Real>(cfg: &ModelConfig, p: &ParamStore<T>, inp: &Stage1Inputs<T>) -> Result<ModelForward<T>> {
    model_forward_with(cfg, p, inp, [MaskOptions::default(); 2])
}

/// Forward pass with explicit mask thresholds.
pub fn model_forward_with<T: Real>(
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    inp: &Stage1Inputs<T>,
    mask_opts: [MaskOptions; 2],
) -> Result<ModelForward<T>> {
    let stage1 = stage1_forward(&cfg.stage1, p, inp, mask_opts)?;
    let stage2 = stage2_forward(&cfg.refine, p, refine_inputs(inp, &stage1))?;
    Ok(ModelForward { stage1, stage2 })
}

/// Accumulates gradients of a loss on `H_final` into `grads`.
pub fn model_backward<T: Real>(
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    inp: &Stage1Inputs<T>,
    fw: &ModelForward<T>,
    g_final: &Tensor4<T>,
    grads: &mut ParamStore<T>,
) -> Result<()> {
    let g1 = stage2_backward(&cfg.refine, p, refine_inputs(inp, &fw.stage1), &fw.stage2, g_final, grads)?;
    stage1_backward(&cfg.stage1, p, inp, &fw.stage1, &g1, grads)
}

/// Where the coarse flows of a sequence come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowSourceSpec {
    Classical(HornSchunckConfig),
    /// Directory of `<stem>_prev.flo` / `<stem>_next.flo` files, named after
    /// the centre frame.
    IngestDir(PathBuf),
}

impl Default for FlowSourceSpec {
    fn default() -> Self {
        FlowSourceSpec::Classical(HornSchunckConfig::default())
    }
}

pub fn flow_file_names(stem: &str) -> (String, String) {
    (format!("{stem}_prev.flo"), format!("{stem}_next.flo"))
}

impl FlowSourceSpec {
    pub fn for_window(&self, manifest: &SequenceManifest, center: usize) -> [FlowSource; 2] {
        match self {
            FlowSourceSpec::Classical(cfg) => [FlowSource::Classical(*cfg), FlowSource::Classical(*cfg)],
            FlowSourceSpec::IngestDir(dir) => {
                let (p, n) = flow_file_names(&frame_stem(manifest, center));
                [FlowSource::Ingest(dir.join(p)), FlowSource::Ingest(dir.join(n))]
            }
        }
    }
}

/// Checks that the neighbours share an exposure that differs from the reference.
pub fn check_window(window: &[ExposureFrame; 3]) -> Result<()> {
    let e: Vec<f64> = window.iter().map(|f| f.exposure).collect();
    if e[0] != e[2] || e[0] == e[1] {
        return Err(Error::NonAlternatingExposures(e));
    }
    Ok(())
}

/// Both stages on one window.
#[derive(Clone, Debug)]
pub struct WindowResult {
    pub stage1: Stage1Output,
    pub h_final: ImagePlane,
}

pub fn reconstruct_window(model: &Model, window: &[ExposureFrame; 3], sources: [&FlowSource; 2]) -> Result<WindowResult> {
    check_window(window)?;
    let (prev, next) = coarse_flows(window, sources)?;
    let (stage1, inp, s1) = run_stage1_with_flows(window, prev, next, &model.params, &model.config.stage1)?;
    let s2 = stage2_forward(&model.config.refine, &model.params, refine_inputs(&inp, &s1))?;
    Ok(WindowResult {
        stage1,
        h_final: s2.h_final.to_image()?,
    })
}

/// Loads the window centred on `center`.
pub fn load_window(manifest: &SequenceManifest, center: usize) -> Result<[ExposureFrame; 3]> {
    Ok([
        manifest.load_frame(center - 1)?,
        manifest.load_frame(center)?,
        manifest.load_frame(center + 1)?,
    ])
}

/// Reconstructs the window centred on `center` of a manifest.
pub fn reconstruct_center(
    model: &Model,
    manifest: &SequenceManifest,
    flow_src: &FlowSourceSpec,
    center: usize,
) -> Result<WindowResult> {
    let window = load_window(manifest, center)?;
    let [a, b] = flow_src.for_window(manifest, center);
    reconstruct_window(model, &window, [&a, &b])
}

/// Sliding-window evaluation of every frame with both neighbours against
/// `<gt_dir>/<stem>.pfm`, including the warping PSNR of the refined flows.
pub fn evaluate_sequence(
    manifest: &SequenceManifest,
    model: &Model,
    flow_src: &FlowSourceSpec,
    gt_dir: &Path,
    mu: f64,
) -> Result<MetricReport> {
    let mut frames = Vec::new();
    for center in manifest.window_centers() {
        let gt = load_ground_truth(gt_dir, manifest, center)?;
        let window = load_window(manifest, center)?;
        let [a, b] = flow_src.for_window(manifest, center);
        let res = reconstruct_window(model, &window, [&a, &b])?;
        let mut m = frame_metrics(center, &res.h_final, &gt, mu)?;
        m.warp_psnr = Some(window_warp_psnr(&window, &res.stage1.flow_prev, &res.stage1.flow_next)?);
        frames.push(m);
    }
    Ok(MetricReport::new(frames, mu))
}
