//! Pixel, flow and parameter containers plus their on-disk formats.
//!
//! Formats handled here:
//!
//! * Middlebury `.flo` optical flow (magic `202021.25`, little-endian).
//! * PFM float images (`PF` colour / `Pf` grey, scale sign selects endianness,
//!   rows stored bottom-to-top).
//! * 8/16-bit PNG for LDR frames and previews.
//! * `F2HW` parameter containers.
//! * Line-oriented sequence manifests (`path<TAB>exposure`).

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nnkit::Real;

/// H×W×C field of finite values, channel-interleaved and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub const MAX_CHANNELS: usize = 5;

    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} plane needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValues("image plane".into()));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        check_dims(height, width, channels).expect("invalid image dims");
        ImagePlane {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a plane from a per-pixel function returning `channels` values.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extracts one channel as a single-channel plane.
    pub fn channel(&self, c: usize) -> ImagePlane {
        ImagePlane::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
    }

    pub fn bit_eq(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!("empty plane {height}x{width}")));
    }
    if channels == 0 || channels > ImagePlane::MAX_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "unsupported channel count {channels}"
        )));
    }
    Ok(())
}

/// Per-pixel displacement field. `u` points right, `v` points down, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    uv: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, uv: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("empty flow {height}x{width}")));
        }
        if uv.len() != height * width * 2 {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} flow needs {} values, got {}",
                height * width * 2,
                uv.len()
            )));
        }
        if uv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValues("flow field".into()));
        }
        Ok(FlowField { height, width, uv })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty flow");
        FlowField {
            height,
            width,
            uv: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut flow = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                flow.set(y, x, u, v);
            }
        }
        flow
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Interleaved `(u, v)` pairs.
    pub fn data(&self) -> &[f32] {
        &self.uv
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.uv[(y * self.width + x) * 2]
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.uv[(y * self.width + x) * 2 + 1]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = (y * self.width + x) * 2;
        self.uv[i] = u;
        self.uv[i + 1] = v;
    }

    /// Per-pixel Euclidean magnitude.
    pub fn magnitude(&self) -> ImagePlane {
        ImagePlane::from_fn(self.height, self.width, 1, |y, x, _| {
            let (u, v) = (self.u(y, x) as f64, self.v(y, x) as f64);
            (u * u + v * v).sqrt() as f32
        })
    }

    pub fn bit_eq(&self, other: &FlowField) -> bool {
        self.dims() == other.dims()
            && self
                .uv
                .iter()
                .zip(&other.uv)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// LDR frame with its exposure and gamma.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureFrame {
    pub image: ImagePlane,
    pub exposure: f64,
    pub gamma: f64,
}

impl ExposureFrame {
    pub const DEFAULT_GAMMA: f64 = 2.2;

    /// Validates exposure and gamma and clamps pixel values to `[0, 1]`.
    pub fn new(image: ImagePlane, exposure: f64, gamma: f64) -> Result<Self> {
        if !(exposure > 0.0) || !exposure.is_finite() {
            return Err(Error::NonPositiveExposure(exposure));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::NonPositiveGamma(gamma));
        }
        let image = image.map(|v| v.clamp(0.0, 1.0));
        Ok(ExposureFrame {
            image,
            exposure,
            gamma,
        })
    }

    pub fn with_default_gamma(image: ImagePlane, exposure: f64) -> Result<Self> {
        Self::new(image, exposure, Self::DEFAULT_GAMMA)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestFrame {
    pub path: PathBuf,
    pub exposure: f64,
}

/// Validated alternating-exposure frame list.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub frames: Vec<ManifestFrame>,
    pub gamma: f64,
    /// Distance between consecutive evaluated reference frames.
    pub stride: usize,
}

impl SequenceManifest {
    /// Checks the frame count and the two-value alternation of exposures.
    pub fn from_frames(frames: Vec<ManifestFrame>, gamma: f64, stride: usize) -> Result<Self> {
        if frames.len() < 3 {
            return Err(Error::FewerThanThreeFrames(frames.len()));
        }
        let exposures: Vec<f64> = frames.iter().map(|f| f.exposure).collect();
        if let Some(&e) = exposures.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::NonPositiveExposure(e));
        }
        let mut distinct: Vec<f64> = Vec::new();
        for &e in &exposures {
            if !distinct.contains(&e) {
                distinct.push(e);
            }
        }
        let alternates = exposures.windows(2).all(|w| w[0] != w[1]);
        if distinct.len() != 2 || !alternates {
            return Err(Error::NonAlternatingExposures(exposures));
        }
        if !(gamma > 0.0) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("manifest stride must be >= 1".into()));
        }
        Ok(SequenceManifest {
            frames,
            gamma,
            stride,
        })
    }

    /// Reference indices that have both neighbours.
    pub fn window_centers(&self) -> Vec<usize> {
        (1..self.frames.len() - 1).step_by(self.stride).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads frame `index` as an exposure frame (PNG or PFM by extension).
    pub fn load_frame(&self, index: usize) -> Result<ExposureFrame> {
        let f = &self.frames[index];
        let image = read_image_any(&f.path)?;
        ExposureFrame::new(image, f.exposure, self.gamma)
    }
}

// ---------------------------------------------------------------------------
// Middlebury .flo

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.uv.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.uv {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8], what: &str) -> Result<FlowField> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile(what.into()));
    }
    if bytes[..4] != FLO_MAGIC.to_le_bytes() {
        return Err(Error::BadMagic(what.into()));
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile(what.into()));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::BadHeader(format!("{what}: flow dims {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(8))
        .ok_or_else(|| Error::ShapeOverflow(what.into()))?;
    let payload = &bytes[12..];
    if payload.len() < n {
        return Err(Error::TruncatedFile(what.into()));
    }
    let uv: Vec<f32> = payload[..n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if uv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValues(what.into()));
    }
    Ok(FlowField { height, width, uv })
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_flow(&bytes, &path.display().to_string())
}

pub fn write_flow_file(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_flow(flow))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PFM

/// Byte order used when encoding a PFM payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfmByteOrder {
    Little,
    Big,
}

pub fn encode_pfm(image: &ImagePlane, order: PfmByteOrder) -> Result<Vec<u8>> {
    let tag = match image.channels {
        3 => "PF",
        1 => "Pf",
        c => {
            return Err(Error::BadHeader(format!(
                "PFM stores 1 or 3 channels, got {c}"
            )))
        }
    };
    let scale = match order {
        PfmByteOrder::Little => "-1.0",
        PfmByteOrder::Big => "1.0",
    };
    let header = format!("{tag}\n{} {}\n{scale}\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row = image.width * image.channels;
    for y in (0..image.height).rev() {
        for v in &image.data[y * row..(y + 1) * row] {
            match order {
                PfmByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
                PfmByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], what: &str) -> Result<ImagePlane> {
    // Four whitespace-separated header tokens, then a single whitespace byte.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(if tokens.is_empty() {
                Error::BadHeader(format!("{what}: empty file"))
            } else {
                Error::TruncatedFile(what.into())
            });
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::BadHeader(format!("{what}: non-ascii header")))?;
        tokens.push(tok.to_string());
        if tokens.len() == 1 && tokens[0] != "PF" && tokens[0] != "Pf" {
            return Err(Error::BadHeader(format!("{what}: magic {:?}", tokens[0])));
        }
    }
    if pos >= bytes.len() {
        return Err(Error::TruncatedFile(what.into()));
    }
    pos += 1;
    let channels = if tokens[0] == "PF" { 3 } else { 1 };
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::BadHeader(format!("{what}: bad dimension {s:?}")))
    };
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let scale: f32 = tokens[3]
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::BadHeader(format!("{what}: bad scale {:?}", tokens[3])))?;
    let little = scale < 0.0;
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::ShapeOverflow(what.into()))?;
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(Error::TruncatedFile(what.into()));
    }
    let row = width * channels;
    let mut data = vec![0f32; count];
    for (i, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / row;
        let y = height - 1 - file_row;
        data[y * row + i % row] = v;
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValues(what.into()));
    }
    Ok(ImagePlane {
        height,
        width,
        channels,
        data,
    })
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pfm(&bytes, &path.display().to_string())
}

/// Writes a little-endian PFM.
pub fn write_pfm(image: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pfm(image, PfmByteOrder::Little)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PNG

/// Integer depth used when writing PNG files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

pub fn read_ldr_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let channels = info.color_type.samples();
    let (height, width) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0) as f32)
            .collect(),
        png::BitDepth::Eight => bytes.iter().map(|&b| (b as f64 / 255.0) as f32).collect(),
        d => return Err(Error::Png(format!("unsupported bit depth {d:?}"))),
    };
    ImagePlane::new(height, width, channels, data)
}

pub fn write_ldr_png(image: &ImagePlane, path: impl AsRef<Path>, depth: PngDepth) -> Result<()> {
    write_png_with_text(image, path, depth, &[])
}

/// Writes a PNG, clamping to `[0, 1]` and rounding to nearest, with optional
/// `tEXt` metadata chunks.
pub fn write_png_with_text(
    image: &ImagePlane,
    path: impl AsRef<Path>,
    depth: PngDepth,
    text: &[(&str, &str)],
) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Png(format!("cannot store {c} channels in PNG"))),
    };
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(color);
    let png_err = |e: png::EncodingError| Error::Png(e.to_string());
    for (k, v) in text {
        encoder
            .add_text_chunk(k.to_string(), v.to_string())
            .map_err(png_err)?;
    }
    let bytes: Vec<u8> = match depth {
        PngDepth::Eight => {
            encoder.set_depth(png::BitDepth::Eight);
            image.data.iter().map(|&v| quantize(v, 255.0) as u8).collect()
        }
        PngDepth::Sixteen => {
            encoder.set_depth(png::BitDepth::Sixteen);
            image
                .data
                .iter()
                .flat_map(|&v| (quantize(v, 65535.0) as u16).to_be_bytes())
                .collect()
        }
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn quantize(v: f32, max: f64) -> u32 {
    ((v as f64).clamp(0.0, 1.0) * max).round() as u32
}

/// Reads `.pfm` or `.png` based on the file extension.
pub fn read_image_any(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        _ => read_ldr_png(path),
    }
}

// ---------------------------------------------------------------------------
// Manifest

/// Parses manifest text. Relative frame paths resolve against `base`.
///
/// Lines are `path<TAB>exposure`; `#` starts a comment line and the
/// directives `@gamma<TAB>value` and `@stride<TAB>value` override defaults.
pub fn parse_manifest(text: &str, base: &Path) -> Result<SequenceManifest> {
    let mut frames = Vec::new();
    let mut gamma = ExposureFrame::DEFAULT_GAMMA;
    let mut stride = 1usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| Error::BadManifest {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut fields = line.split('\t');
        let key = fields.next().unwrap_or_default();
        let value = fields.next().ok_or_else(|| bad("expected path<TAB>exposure"))?;
        if fields.next().is_some() {
            return Err(bad("too many fields"));
        }
        match key {
            "@gamma" => {
                gamma = value.trim().parse().map_err(|_| bad("bad gamma"))?;
            }
            "@stride" => {
                stride = value.trim().parse().map_err(|_| bad("bad stride"))?;
            }
            k if k.starts_with('@') => return Err(bad("unknown directive")),
            path => {
                let exposure: f64 = value.trim().parse().map_err(|_| bad("bad exposure"))?;
                let p = PathBuf::from(path);
                let path = if p.is_absolute() { p } else { base.join(p) };
                frames.push(ManifestFrame { path, exposure });
            }
        }
    }
    SequenceManifest::from_frames(frames, gamma, stride)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SequenceManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    if let Some(f) = manifest.frames.iter().find(|f| !f.path.is_file()) {
        return Err(Error::MissingFrameFile(f.path.clone()));
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &SequenceManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# path\texposure")?;
    writeln!(out, "@gamma\t{}", manifest.gamma)?;
    writeln!(out, "@stride\t{}", manifest.stride)?;
    for f in &manifest.frames {
        writeln!(out, "{}\t{}", f.path.display(), f.exposure)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameter store

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Ordered, named collection of tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Copy> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeOverflow(name.clone()))?;
        if count != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: shape {shape:?} holds {count} values, got {}",
                values.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape,
            values,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingParams(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&[T]> {
        self.get(name).map(|e| e.values.as_slice())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [T]> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].values),
            None => Err(Error::MissingParams(name.to_string())),
        }
    }

    /// Tensor lookup that also checks the stored shape.
    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<&[T]> {
        let e = self.get(name)?;
        if e.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {shape:?}, stored {:?}",
                e.shape
            )));
        }
        Ok(&e.values)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Same names and shapes, every value replaced by `fill`.
    pub fn filled_like<U: Copy>(&self, fill: U) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: vec![fill; e.values.len()],
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

impl<T: Real> ParamStore<T> {
    pub fn zeros_like(&self) -> ParamStore<T> {
        self.filled_like(T::zero())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.values.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl ParamStore<f32> {
    pub fn bit_eq(&self, other: &ParamStore<f32>) -> bool {
        self.same_layout(other)
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

pub const PARAM_MAGIC: &[u8; 4] = b"F2HW";
pub const PARAM_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode_params(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.num_values() * 4);
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(store.len(), "entry count")?.to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&u32_len(e.name.len(), &e.name)?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&u32_len(e.shape.len(), &e.name)?.to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&u32_len(d, &e.name)?.to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::ShapeOverflow(what.to_string()))
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedFile(self.what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], what: &str) -> Result<ParamStore<f32>> {
    let mut cur = ByteCursor { bytes, pos: 0, what };
    if cur.take(4).map_err(|_| Error::BadMagic(what.into()))? != PARAM_MAGIC {
        return Err(Error::BadMagic(what.into()));
    }
    let version = cur.u32()?;
    if version != PARAM_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: PARAM_VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::BadHeader(format!("{what}: non-utf8 tensor name")))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::ShapeOverflow(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::ShapeOverflow(name.clone()))?;
        let raw = cur.take(numel * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValues(format!("{what}: {name}")));
        }
        store.insert(name, shape, values)?;
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(store)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_params(&bytes, &path.display().to_string())
}
