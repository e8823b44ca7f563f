//! Flow color wheel and mask heatmaps.

use f2hdr::tensorio::{FlowField, ImagePlane};

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55-entry Middlebury color wheel, RGB in `[0, 1]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor() / 255.0;
    for i in 0..RY {
        wheel.push([1.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([1.0 - ramp(i, YG), 1.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 1.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 1.0 - ramp(i, CB), 1.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 1.0]);
    }
    for i in 0..MR {
        wheel.push([1.0, 0.0, 1.0 - ramp(i, MR)]);
    }
    wheel
}

/// Largest flow vector length in the field.
pub fn max_magnitude(flow: &FlowField) -> f64 {
    flow.data()
        .chunks_exact(2)
        .map(|uv| (uv[0] as f64).hypot(uv[1] as f64))
        .fold(0.0, f64::max)
}

/// Hue encodes direction and saturation the magnitude divided by `max_mag`.
/// Zero vectors render white.
pub fn flow_to_color(flow: &FlowField, max_mag: f64) -> ImagePlane {
    let wheel = color_wheel();
    let n = wheel.len();
    ImagePlane::from_fn(flow.height(), flow.width(), 3, |y, x, c| {
        let (u, v) = (flow.u(y, x) as f64, flow.v(y, x) as f64);
        let rad = if max_mag > 0.0 { u.hypot(v) / max_mag } else { 0.0 };
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = (fk.floor() as usize).min(n - 1);
        let k1 = (k0 + 1) % n;
        let f = fk - k0 as f64;
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let out = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        out as f32
    })
}

/// Monochrome heatmap of the first channel, clamped to `[0, 1]`.
pub fn heatmap(values: &ImagePlane) -> ImagePlane {
    ImagePlane::from_fn(values.height(), values.width(), 1, |y, x, _| values.get(y, x, 0).clamp(0.0, 1.0))
}
