use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use f2hdr::motionphys::build_mask;
use f2hdr::pipeline::Model;
use f2hdr::tensorio::{
    load_params, read_flow_file, read_pfm, write_flow_file, write_ldr_png, write_pfm, FlowField, ImagePlane,
    PngDepth,
};
use f2hdr::exposure::hdr_to_ldr;

const TINY_TRAIN: &str = r#"
[train]
steps = 2
dataset = 4
batch = 2
size = 32
checkpoint_every = 0

[train.model.stage1.adapter]
channels = 4
dilations = [1]

[train.model.stage1.fusion]
channels = [4, 4, 4]
res_blocks = 1

[train.model.refine]
channels = 4
decoder = [4, 4]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_f2hdr"));
    c.env_remove("F2HDR_NO_PARALLEL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn radiance(t: usize, shift: f32) -> ImagePlane {
    ImagePlane::from_fn(32, 32, 3, |y, x, c| {
        let xs = x as f32 - shift * t as f32;
        let v = 0.12 + 0.1 * (xs * 0.4).sin() * (y as f32 * 0.3 + c as f32).cos();
        v.clamp(0.0, 1.0)
    })
}

/// `n` PNG frames alternating exposure 1 / 4, PFM ground truth in `gt/`,
/// and a manifest `seq.txt`.
fn write_sequence(dir: &Path, n: usize, shift: f32) -> PathBuf {
    fs::create_dir_all(dir.join("gt")).unwrap();
    let mut manifest = String::from("@gamma\t2.2\n");
    for t in 0..n {
        let e = if t % 2 == 0 { 1.0 } else { 4.0 };
        let h = radiance(t, shift);
        let name = format!("f{t:02}.png");
        write_ldr_png(&hdr_to_ldr(&h, e, 2.2).unwrap(), dir.join(&name), PngDepth::Sixteen).unwrap();
        write_pfm(&h, dir.join("gt").join(format!("f{t:02}.pfm"))).unwrap();
        manifest.push_str(&format!("{name}\t{e}\n"));
    }
    let path = dir.join("seq.txt");
    fs::write(&path, manifest).unwrap();
    path
}

/// Writes a zero-step training run and returns its initial checkpoint.
fn init_checkpoint(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY_TRAIN.replace("steps = 2", "steps = 0")).unwrap();
    let out = dir.join("init");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    out.join("ckpt_step_000000.f2hw")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn assert_single_diagnostic(out: &Output, kind: &str) {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with(&format!("f2hdr: error[{kind}]")), "stderr: {err}");
}

#[test]
fn static_flow_is_near_zero_and_zero_init_refinement_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 3, 0.0);
    let ckpt = init_checkpoint(dir.path());
    let out = dir.path().join("flow");
    ok(&["flow", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    for name in ["f01_prev.flo", "f01_next.flo"] {
        let coarse = read_flow_file(out.join("coarse").join(name)).unwrap();
        let refined = read_flow_file(out.join("refined").join(name)).unwrap();
        let worst = coarse.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(worst < 0.05, "{name}: {worst}");
        assert!(coarse.bit_eq(&refined), "{name}");
    }
    assert!(out.join("effective_config.toml").is_file());
}

#[test]
fn missing_checkpoint_is_a_typed_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 3, 0.0);
    let missing = dir.path().join("nope.f2hw");
    let out = run(&["flow", "--manifest", s(&m), "--checkpoint", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(exit_code(&out), 6);
    assert_single_diagnostic(&out, "MissingCheckpoint");
}

#[test]
fn ingested_flows_are_used_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 3, 1.0);
    let first = dir.path().join("first");
    ok(&["flow", "--manifest", s(&m), "--out", s(&first)]);
    let ingest = format!("ingest:{}", s(&first.join("coarse")));
    let second = dir.path().join("second");
    ok(&["flow", "--manifest", s(&m), "--flow-src", &ingest, "--out", s(&second)]);
    assert_eq!(read_dir_bytes(&first.join("coarse")), read_dir_bytes(&second.join("coarse")));
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "flow",
        "--manifest",
        s(&m),
        "--flow-src",
        &format!("ingest:{}", s(&empty)),
        "--out",
        s(&dir.path().join("third")),
    ]);
    assert_eq!(exit_code(&out), 6);
    assert_single_diagnostic(&out, "IngestFileMissing");
}

#[test]
fn zero_flow_mask_is_uniform_half() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("zero.flo");
    write_flow_file(&FlowField::zeros(24, 24), &flo).unwrap();
    let out = dir.path().join("m");
    ok(&["mask", s(&flo), "--out", s(&out)]);
    let mask = read_pfm(out.join("zero_mask.pfm")).unwrap();
    assert_eq!(mask.channels(), 1);
    assert!(mask.data().iter().all(|&v| v == 0.5));
    assert!(out.join("zero_mask.png").is_file());
}

#[test]
fn rotation_mask_matches_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path());
    let n = 40;
    let c = (n as f32 - 1.0) / 2.0;
    let flow = FlowField::from_fn(n, n, |y, x| {
        let (dx, dy) = (x as f32 - c, y as f32 - c);
        let r = (dx * dx + dy * dy).sqrt();
        let w = if r < 12.0 { 0.15 } else { 0.0 };
        (-w * dy, w * dx)
    });
    let flo = dir.path().join("rot.flo");
    write_flow_file(&flow, &flo).unwrap();
    let out = dir.path().join("m");
    ok(&["mask", s(&flo), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let from_cli = read_pfm(out.join("rot_mask.pfm")).unwrap();
    let model = Model::load(&ckpt, None).unwrap();
    let direct = build_mask(&read_flow_file(&flo).unwrap(), &model.params).unwrap();
    assert!(from_cli.bit_eq(&direct.values));
    // The rotating disc stands out from the static surround.
    let centre = from_cli.get(n / 2, n / 2, 0);
    let corner = from_cli.get(1, 1, 0);
    assert!(centre > corner, "centre {centre} corner {corner}");
}

#[test]
fn zero_init_refine_equals_clamped_fuse_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 3, 1.0);
    let ckpt = init_checkpoint(dir.path());
    let fuse = dir.path().join("fuse");
    let refine = dir.path().join("refine");
    let again = dir.path().join("again");
    ok(&["fuse", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&fuse)]);
    ok(&["refine", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&refine)]);
    ok(&["refine", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&again)]);
    let pfms: Vec<_> = read_dir_bytes(&refine)
        .into_iter()
        .filter(|(n, _)| n.ends_with(".pfm"))
        .collect();
    assert_eq!(pfms.len(), 1);
    let coarse = read_pfm(fuse.join("f01.pfm")).unwrap();
    let fine = read_pfm(refine.join("f01.pfm")).unwrap();
    assert!(coarse.map(|v| v.clamp(0.0, 1.0)).bit_eq(&fine));
    assert!(refine.join("f01.png").is_file());
    let strip = |d: &Path| {
        read_dir_bytes(d)
            .into_iter()
            .filter(|(n, _)| n != "effective_config.toml")
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&refine), strip(&again));
}

#[test]
fn parallel_and_serial_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 6, 1.0);
    let ckpt = init_checkpoint(dir.path());
    let par = dir.path().join("par");
    let ser = dir.path().join("ser");
    ok(&["refine", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--jobs", "3", "--out", s(&par)]);
    let out = bin()
        .args(["refine", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--jobs", "3", "--out", s(&ser)])
        .env("F2HDR_NO_PARALLEL", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let effective = fs::read_to_string(ser.join("effective_config.toml")).unwrap();
    assert!(effective.contains("jobs = 1"), "{effective}");
    let pfm = |d: &Path| {
        read_dir_bytes(d)
            .into_iter()
            .filter(|(n, _)| n.ends_with(".pfm"))
            .collect::<Vec<_>>()
    };
    assert_eq!(pfm(&par).len(), 4);
    assert_eq!(pfm(&par), pfm(&ser));
}

#[test]
fn training_is_reproducible_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&b)]);
    let strip = |d: &Path| {
        read_dir_bytes(d)
            .into_iter()
            .filter(|(n, _)| n != "effective_config.toml")
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    let log = fs::read_to_string(a.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let init = load_params(a.join("ckpt_step_000000.f2hw")).unwrap();
    let cfg_json = a.join("model.json");
    let fresh = Model::init(f2hdr::pipeline::ModelConfig::load(&cfg_json).unwrap(), 5).unwrap();
    assert!(init.bit_eq(&fresh.params));
    assert!(a.join("ckpt_step_000002.f2hw").is_file());
    let effective = fs::read_to_string(a.join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 5"), "{effective}");
}

#[test]
fn metrics_of_ground_truth_hit_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 5, 0.0);
    let gt = dir.path().join("gt");
    let out = dir.path().join("report");
    ok(&["metrics", "--manifest", s(&m), "--results", s(&gt), "--gt", s(&gt), "--out", s(&out)]);
    let tsv = fs::read_to_string(out.join("report.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f[1], "99.000000");
        assert_eq!(f[2], "1.000000");
        assert_eq!(f[3], "99.000000");
        assert_eq!(f[4], "1.000000");
    }
    assert!(tsv.starts_with("# psnr_cap_db=99"));
    assert!(out.join("report.json").is_file());

    fs::remove_file(gt.join("f02.pfm")).unwrap();
    let res = dir.path().join("res");
    fs::create_dir_all(&res).unwrap();
    for t in 1..4 {
        write_pfm(&radiance(t, 0.0), res.join(format!("f{t:02}.pfm"))).unwrap();
    }
    let o = run(&["metrics", "--manifest", s(&m), "--results", s(&res), "--gt", s(&gt), "--out", s(&out)]);
    assert_eq!(exit_code(&o), 6);
    assert_single_diagnostic(&o, "MissingGroundTruth");
}

#[test]
fn viz_renders_flow_with_normalization_note() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("z.flo");
    write_flow_file(&FlowField::zeros(8, 8), &flo).unwrap();
    let out = dir.path().join("v");
    ok(&["viz", s(&flo), "--out", s(&out)]);
    let png = out.join("z_flow.png");
    let img = f2hdr::tensorio::read_ldr_png(&png).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
    let bytes = fs::read(&png).unwrap();
    let needle = b"flow_normalization";
    assert!(bytes.windows(needle.len()).any(|w| w == needle));

    let mask = dir.path().join("mask.pfm");
    write_pfm(&ImagePlane::filled(4, 4, 1, 0.25), &mask).unwrap();
    ok(&["viz", s(&mask), "--out", s(&out)]);
    let heat = f2hdr::tensorio::read_ldr_png(out.join("mask_heatmap.png")).unwrap();
    assert_eq!(heat.channels(), 1);
    assert!(heat.data().iter().all(|&v| (v - 64.0 / 255.0).abs() < 1e-6));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");

    let bad_manifest = dir.path().join("bad.txt");
    fs::write(&bad_manifest, "a.png\t1\nb.png\t4\nc.png\t1\n").unwrap();
    let out = run(&["fuse", "--manifest", s(&bad_manifest), "--checkpoint", "x", "--out", s(&o)]);
    assert_eq!(exit_code(&out), 6, "missing frame files");
    assert_single_diagnostic(&out, "MissingFrameFile");

    let m = write_sequence(dir.path(), 3, 0.0);
    let same = dir.path().join("same.txt");
    fs::write(&same, "f00.png\t1\nf01.png\t1\nf02.png\t1\n").unwrap();
    let out = run(&["fuse", "--manifest", s(&same), "--checkpoint", "x", "--out", s(&o)]);
    assert_eq!(exit_code(&out), 5);
    assert_single_diagnostic(&out, "NonAlternatingExposures");

    let out = run(&["flow", "--manifest", s(&m), "--flow-src", "raft", "--out", s(&o)]);
    assert_eq!(exit_code(&out), 8);
    assert_single_diagnostic(&out, "InvalidConfig");

    let junk = dir.path().join("junk.flo");
    fs::write(&junk, b"not a flow file").unwrap();
    let out = run(&["viz", s(&junk), "--out", s(&o)]);
    assert_eq!(exit_code(&out), 4);
    assert_single_diagnostic(&out, "BadMagic");

    let out = run(&["fuse", "--bogus"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_sequence(dir.path(), 3, 1.0);
    let ckpt = init_checkpoint(dir.path());
    let before = read_dir_bytes(dir.path());
    ok(&["refine", "--manifest", s(&m), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("r"))]);
    assert_eq!(before, read_dir_bytes(dir.path()));
}
