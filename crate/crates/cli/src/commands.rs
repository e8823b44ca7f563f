//! Subcommand implementations.

use std::fs;
use std::path::Path;

use f2hdr::exposure::{tonemap_mu, TonemapConfig};
use f2hdr::metrics::{evaluate_results, frame_stem, hdr_path};
use f2hdr::motionphys::build_mask;
use f2hdr::pipeline::{flow_file_names, load_window, reconstruct_window, Model, ModelConfig};
use f2hdr::stage1::{coarse_flows, run_stage1_with_flows};
use f2hdr::tensorio::{
    read_flow_file, read_manifest, read_pfm, write_flow_file, write_ldr_png, write_pfm, write_png_with_text,
    ImagePlane, PngDepth, SequenceManifest,
};
use f2hdr::trainer::{train as run_training, TrainConfig};
use f2hdr::Error;
use rayon::prelude::*;

use crate::config::Effective;
use crate::error::CliError;
use crate::viz::{flow_to_color, heatmap, max_magnitude};

pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_JSON: &str = "report.json";

/// Which reconstruction `fuse` / `refine` write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Coarse,
    Final,
}

fn load_manifest(eff: &Effective) -> Result<SequenceManifest, CliError> {
    let mut m = read_manifest(eff.require_manifest()?)?;
    if let Some(g) = eff.gamma {
        if !(g > 0.0) {
            return Err(Error::NonPositiveGamma(g).into());
        }
        m.gamma = g;
    }
    Ok(m)
}

fn load_model(eff: &Effective, checkpoint: &Path) -> Result<Model, CliError> {
    let mut model = Model::load(checkpoint, None)?;
    if let Some(l) = eff.lambda {
        model.config.stage1.adapter.lambda = l;
        model.config.validate()?;
    }
    Ok(model)
}

/// Runs `f` on every window centre with at most `eff.jobs` workers; results
/// keep centre order.
fn per_center<R: Send>(
    eff: &Effective,
    centers: &[usize],
    f: impl Fn(usize) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eff.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| centers.par_iter().map(|&c| f(c)).collect())
}

fn preview(image: &ImagePlane, mu: f64, path: &Path) -> Result<(), CliError> {
    let t = tonemap_mu(image, TonemapConfig::new(mu)?)?;
    write_ldr_png(&t, path, PngDepth::Eight)?;
    Ok(())
}

pub fn flow(eff: &Effective) -> Result<(), CliError> {
    let manifest = load_manifest(eff)?;
    let src = eff.flow_source()?;
    let model = match &eff.checkpoint {
        Some(p) => Some(load_model(eff, p)?),
        None => None,
    };
    eff.prepare_out()?;
    let coarse_dir = eff.out.join("coarse");
    let refined_dir = eff.out.join("refined");
    fs::create_dir_all(&coarse_dir).map_err(Error::from)?;
    if model.is_some() {
        fs::create_dir_all(&refined_dir).map_err(Error::from)?;
    }
    per_center(eff, &manifest.window_centers(), |center| {
        let window = load_window(&manifest, center)?;
        let [a, b] = src.for_window(&manifest, center);
        let (prev, next) = coarse_flows(&window, [&a, &b])?;
        let (p_name, n_name) = flow_file_names(&frame_stem(&manifest, center));
        write_flow_file(&prev, coarse_dir.join(&p_name))?;
        write_flow_file(&next, coarse_dir.join(&n_name))?;
        if let Some(m) = &model {
            let (out, _, _) = run_stage1_with_flows(&window, prev, next, &m.params, &m.config.stage1)?;
            write_flow_file(&out.flow_prev, refined_dir.join(&p_name))?;
            write_flow_file(&out.flow_next, refined_dir.join(&n_name))?;
        }
        Ok(())
    })?;
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into())
}

pub fn mask(eff: &Effective, flow_path: &Path) -> Result<(), CliError> {
    let flow = read_flow_file(flow_path)?;
    let model = match &eff.checkpoint {
        Some(p) => load_model(eff, p)?,
        None => Model::init(ModelConfig::default(), eff.seed)?,
    };
    let mask = build_mask(&flow, &model.params)?;
    eff.prepare_out()?;
    let stem = file_stem(flow_path);
    write_pfm(&mask.values, eff.out.join(format!("{stem}_mask.pfm")))?;
    let threshold = format!("{}", mask.threshold);
    write_png_with_text(
        &heatmap(&mask.values),
        eff.out.join(format!("{stem}_mask.png")),
        PngDepth::Eight,
        &[("otsu_threshold", threshold.as_str())],
    )?;
    Ok(())
}

pub fn reconstruct(eff: &Effective, which: Output) -> Result<(), CliError> {
    let manifest = load_manifest(eff)?;
    let src = eff.flow_source()?;
    let model = load_model(eff, eff.require_checkpoint()?)?;
    eff.prepare_out()?;
    per_center(eff, &manifest.window_centers(), |center| {
        let window = load_window(&manifest, center)?;
        let [a, b] = src.for_window(&manifest, center);
        let image = match which {
            Output::Final => reconstruct_window(&model, &window, [&a, &b])?.h_final,
            Output::Coarse => {
                let (prev, next) = coarse_flows(&window, [&a, &b])?;
                run_stage1_with_flows(&window, prev, next, &model.params, &model.config.stage1)?
                    .0
                    .h_coarse
            }
        };
        let path = hdr_path(&eff.out, &manifest, center);
        write_pfm(&image, &path)?;
        preview(&image, eff.mu, &path.with_extension("png"))
    })?;
    Ok(())
}

pub fn train(eff: &Effective) -> Result<(), CliError> {
    let cfg: TrainConfig = eff.train.clone().unwrap_or_default();
    cfg.validate()?;
    eff.prepare_out()?;
    let outcome = run_training(&cfg, Some(&eff.out))?;
    if let Some(last) = outcome.losses.last() {
        println!("trained {} steps, final batch loss {last:.6}", outcome.losses.len());
    } else {
        println!("wrote initial checkpoint");
    }
    Ok(())
}

pub fn metrics(eff: &Effective) -> Result<(), CliError> {
    let manifest = load_manifest(eff)?;
    let results = eff
        .results
        .as_deref()
        .ok_or_else(|| CliError::Config("a results directory is required (--results)".into()))?;
    let gt = eff
        .gt
        .as_deref()
        .ok_or_else(|| CliError::Config("a ground-truth directory is required (--gt)".into()))?;
    let report = evaluate_results(&manifest, results, gt, eff.mu)?;
    eff.prepare_out()?;
    fs::write(eff.out.join(REPORT_TSV), report.to_tsv()).map_err(Error::from)?;
    fs::write(eff.out.join(REPORT_JSON), report.to_json()).map_err(Error::from)?;
    Ok(())
}

pub fn viz(eff: &Effective, input: &Path) -> Result<(), CliError> {
    let stem = file_stem(input);
    let ext = input
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("flo") => {
            let flow = read_flow_file(input)?;
            let max = max_magnitude(&flow);
            eff.prepare_out()?;
            let note = format!("per-file max magnitude {max} px maps to full saturation");
            write_png_with_text(
                &flow_to_color(&flow, max),
                eff.out.join(format!("{stem}_flow.png")),
                PngDepth::Eight,
                &[("flow_normalization", note.as_str())],
            )?;
        }
        Some("pfm") => {
            let values = read_pfm(input)?;
            eff.prepare_out()?;
            write_ldr_png(&heatmap(&values), eff.out.join(format!("{stem}_heatmap.png")), PngDepth::Eight)?;
        }
        _ => {
            return Err(CliError::Config(format!(
                "viz expects a .flo or .pfm file, got {}",
                input.display()
            )))
        }
    }
    Ok(())
}
