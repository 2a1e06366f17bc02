//! Color-wheel rendering of flow fields.

use evsplat_core::contrast::FlowField;
use evsplat_core::raster::ColorImage;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue encodes direction, saturation encodes magnitude relative to `max_magnitude`
/// (the field's largest finite magnitude when `None`). Non-finite vectors render black.
pub fn flow_color_wheel(flow: &FlowField, max_magnitude: Option<f64>) -> ColorImage {
    let norm = |v: &[f64; 2]| v[0].hypot(v[1]);
    let max = max_magnitude.unwrap_or_else(|| flow.data.iter().map(norm).filter(|m| m.is_finite()).fold(0.0, f64::max));
    let mut out = ColorImage::zeros(flow.width, flow.height);
    for (o, v) in out.data.iter_mut().zip(&flow.data) {
        let m = norm(v);
        if !m.is_finite() {
            continue;
        }
        let hue = v[1].atan2(v[0]) / std::f64::consts::TAU;
        let sat = if max > 0.0 { (m / max).min(1.0) } else { 0.0 };
        *o = hsv_to_rgb(hue, sat, 1.0);
    }
    out
}
