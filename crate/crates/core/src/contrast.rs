//! Event warping, the image of warped events (IWE) and the contrast objectives.
//!
//! Time inside a window is normalized to `[0, 1]`, so a flow vector is the pixel
//! displacement over the whole window. Warping transports an event at pixel `x`
//! and normalized time `τ` to `x - (τ - τ_ref) v(x)`.
//!
//! Every objective here has a matching `*_backward` returning the derivative with
//! respect to the IWE, used by the flow trainer.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::raster::Plane;

/// Per-pixel displacement over a window, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, flow: [f64; 2]) -> Self {
        Self { width, height, data: vec![flow; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|f| f[0].is_finite() && f[1].is_finite())
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.data.len().max(1) as f64;
        let s = self.data.iter().fold([0.0, 0.0], |acc, f| [acc[0] + f[0], acc[1] + f[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Population variance of the flow vectors around their mean.
    pub fn spatial_variance(&self) -> f64 {
        let m = self.mean();
        let n = self.data.len().max(1) as f64;
        self.data.iter().map(|f| (f[0] - m[0]).powi(2) + (f[1] - m[1]).powi(2)).sum::<f64>() / n
    }
}

/// Events of one window together with the window bounds used for time normalization.
#[derive(Debug, Clone, Copy)]
pub struct EventWindow<'a> {
    pub events: &'a [Event],
    pub t_start: u64,
    pub t_end: u64,
    pub width: usize,
    pub height: usize,
}

impl<'a> EventWindow<'a> {
    /// Events of `stream` with `t_start <= t <= t_end`.
    pub fn from_stream(stream: &'a EventStream, t_start: u64, t_end: u64) -> Self {
        let r = stream.range_closed(t_start, t_end);
        Self { events: &stream.events()[r], t_start, t_end, width: stream.width(), height: stream.height() }
    }

    /// Whole stream as one window.
    pub fn whole(stream: &'a EventStream) -> Self {
        Self::from_stream(stream, stream.t_start(), stream.t_end())
    }

    #[inline]
    pub fn normalized_time(&self, t: u64) -> f64 {
        let span = self.t_end.saturating_sub(self.t_start);
        if span == 0 {
            0.0
        } else {
            (t.saturating_sub(self.t_start)) as f64 / span as f64
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Warped event positions; out-of-bounds positions are kept.
pub fn warp_events(window: &EventWindow, flow: &FlowField, t_ref: f64) -> Vec<Vector2<f64>> {
    window
        .events
        .iter()
        .map(|e| {
            let dt = window.normalized_time(e.t) - t_ref;
            let v = flow.get(e.x as usize, e.y as usize);
            Vector2::new(e.x as f64 - dt * v[0], e.y as f64 - dt * v[1])
        })
        .collect()
}

/// How each warped event votes into the IWE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IweWeighting {
    /// Every event votes `1`.
    #[default]
    Unit,
    /// Events vote their polarity sign.
    Polarity,
}

impl IweWeighting {
    pub fn weights(self, events: &[Event]) -> Vec<f64> {
        match self {
            IweWeighting::Unit => vec![1.0; events.len()],
            IweWeighting::Polarity => events.iter().map(|e| e.p.sign()).collect(),
        }
    }
}

/// Image of warped events at reference time `t_ref` (normalized window time).
#[derive(Debug, Clone, PartialEq)]
pub struct Iwe {
    pub image: Plane,
    pub t_ref: f64,
}

#[inline]
fn bilinear_corners(p: Vector2<f64>) -> (i64, i64, f64, f64) {
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    (x0 as i64, y0 as i64, p.x - x0, p.y - y0)
}

/// Bilinear voting of weighted positions; contributions outside the image are dropped.
pub fn build_iwe(positions: &[Vector2<f64>], weights: &[f64], width: usize, height: usize) -> Plane {
    let mut img = Plane::zeros(width, height);
    let (w, h) = (width as i64, height as i64);
    for (p, &wt) in positions.iter().zip(weights) {
        if !(p.x.is_finite() && p.y.is_finite()) {
            continue;
        }
        let (x0, y0, fx, fy) = bilinear_corners(*p);
        let corners = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for (cx, cy, k) in corners {
            if cx >= 0 && cy >= 0 && cx < w && cy < h && k != 0.0 {
                img.data[(cy * w + cx) as usize] += wt * k;
            }
        }
    }
    img
}

/// Derivative of `L(build_iwe(positions))` with respect to each position, given `dL/dIWE`.
pub fn build_iwe_backward(positions: &[Vector2<f64>], weights: &[f64], grad_image: &Plane) -> Vec<Vector2<f64>> {
    let (w, h) = (grad_image.width as i64, grad_image.height as i64);
    let g = |x: i64, y: i64| -> f64 {
        if x >= 0 && y >= 0 && x < w && y < h {
            grad_image.data[(y * w + x) as usize]
        } else {
            0.0
        }
    };
    positions
        .iter()
        .zip(weights)
        .map(|(p, &wt)| {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Vector2::zeros();
            }
            let (x0, y0, fx, fy) = bilinear_corners(*p);
            let (g00, g10, g01, g11) = (g(x0, y0), g(x0 + 1, y0), g(x0, y0 + 1), g(x0 + 1, y0 + 1));
            let dx = (1.0 - fy) * (g10 - g00) + fy * (g11 - g01);
            let dy = (1.0 - fx) * (g01 - g00) + fx * (g11 - g10);
            Vector2::new(wt * dx, wt * dy)
        })
        .collect()
}

pub fn iwe_from_flow(window: &EventWindow, flow: &FlowField, t_ref: f64, weighting: IweWeighting) -> Iwe {
    let positions = warp_events(window, flow, t_ref);
    let weights = weighting.weights(window.events);
    Iwe { image: build_iwe(&positions, &weights, window.width, window.height), t_ref }
}

/// `(1/|Ω|) Σ (I - μ)²` over the whole image.
pub fn variance_objective(img: &Plane) -> f64 {
    if img.is_empty() {
        return 0.0;
    }
    let mu = img.mean();
    img.data.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / img.len() as f64
}

pub fn variance_backward(img: &Plane, upstream: f64) -> Plane {
    let mu = img.mean();
    let n = img.len() as f64;
    img.map(|v| upstream * 2.0 * (v - mu) / n)
}

fn check_min_size(width: usize, height: usize) -> Result<()> {
    if width < 3 || height < 3 {
        return Err(Error::ImageTooSmall { width, height, min: 3 });
    }
    Ok(())
}

/// Derivative stencil along one axis: central inside, one-sided at the borders.
/// Returns `(plus_index, minus_index, coefficient)` so that `d = c (I[plus] - I[minus])`.
#[inline]
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (1, 0, 1.0)
    } else if i == n - 1 {
        (n - 1, n - 2, 1.0)
    } else {
        (i + 1, i - 1, 0.5)
    }
}

/// `(1/|Ω|) Σ ‖∇I‖²` with central differences inside and one-sided differences at borders.
pub fn gradient_magnitude_objective(img: &Plane) -> Result<f64> {
    let (w, h) = (img.width, img.height);
    check_min_size(w, h)?;
    let mut total = 0.0;
    for y in 0..h {
        let (yp, ym, cy) = stencil(y, h);
        for x in 0..w {
            let (xp, xm, cx) = stencil(x, w);
            let gx = cx * (img.get(xp, y) - img.get(xm, y));
            let gy = cy * (img.get(x, yp) - img.get(x, ym));
            total += gx * gx + gy * gy;
        }
    }
    Ok(total / (w * h) as f64)
}

/// `upstream · ∂G/∂I` for the gradient-magnitude objective `G`.
pub fn gradient_magnitude_backward(img: &Plane, upstream: f64) -> Result<Plane> {
    let (w, h) = (img.width, img.height);
    check_min_size(w, h)?;
    let mut grad = Plane::zeros(w, h);
    let scale = upstream * 2.0 / (w * h) as f64;
    for y in 0..h {
        let (yp, ym, cy) = stencil(y, h);
        for x in 0..w {
            let (xp, xm, cx) = stencil(x, w);
            let gx = cx * (img.get(xp, y) - img.get(xm, y));
            let gy = cy * (img.get(x, yp) - img.get(x, ym));
            grad.add(xp, y, scale * gx * cx);
            grad.add(xm, y, -scale * gx * cx);
            grad.add(x, yp, scale * gy * cy);
            grad.add(x, ym, -scale * gy * cy);
        }
    }
    Ok(grad)
}

/// Multi-scale tiling of the contrast objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileConfig {
    /// Downsampling factors; each scale mean-pools the IWE over `s × s` blocks.
    pub scales: Vec<usize>,
    /// Side of the square non-overlapping tiles, clamped to the pooled image size.
    pub tile_size: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { scales: vec![1, 2, 4], tile_size: 16 }
    }
}

impl TileConfig {
    pub fn single_tile(width: usize, height: usize) -> Self {
        Self { scales: vec![1], tile_size: width.max(height) }
    }

    fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("tile objective needs at least one scale".into()));
        }
        if self.scales.contains(&0) || self.tile_size == 0 {
            return Err(Error::Config("scales and tile size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean-pools `img` over `s × s` blocks, zero-padding the trailing edge.
fn pool(img: &Plane, s: usize) -> Plane {
    if s == 1 {
        return img.clone();
    }
    let (pw, ph) = (img.width.div_ceil(s), img.height.div_ceil(s));
    let mut out = Plane::zeros(pw, ph);
    let inv = 1.0 / (s * s) as f64;
    for y in 0..img.height {
        for x in 0..img.width {
            out.add(x / s, y / s, img.get(x, y) * inv);
        }
    }
    out
}

fn unpool(grad_pooled: &Plane, s: usize, width: usize, height: usize) -> Plane {
    if s == 1 {
        return grad_pooled.clone();
    }
    let inv = 1.0 / (s * s) as f64;
    Plane::from_fn(width, height, |x, y| grad_pooled.get(x / s, y / s) * inv)
}

struct TileLayout {
    tile_w: usize,
    tile_h: usize,
    nx: usize,
    ny: usize,
}

fn tile_layout(w: usize, h: usize, tile: usize) -> Result<TileLayout> {
    let tile_w = tile.min(w);
    let tile_h = tile.min(h);
    check_min_size(tile_w, tile_h)?;
    Ok(TileLayout { tile_w, tile_h, nx: w.div_ceil(tile_w), ny: h.div_ceil(tile_h) })
}

fn extract_tile(img: &Plane, layout: &TileLayout, tx: usize, ty: usize) -> Plane {
    Plane::from_fn(layout.tile_w, layout.tile_h, |x, y| {
        let (gx, gy) = (tx * layout.tile_w + x, ty * layout.tile_h + y);
        if gx < img.width && gy < img.height {
            img.get(gx, gy)
        } else {
            0.0
        }
    })
}

/// Gradient-magnitude objective averaged over tiles, then over scales.
pub fn tile_multiscale_value(img: &Plane, config: &TileConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for &s in &config.scales {
        let pooled = pool(img, s);
        let layout = tile_layout(pooled.width, pooled.height, config.tile_size)?;
        let mut acc = 0.0;
        for ty in 0..layout.ny {
            for tx in 0..layout.nx {
                acc += gradient_magnitude_objective(&extract_tile(&pooled, &layout, tx, ty))?;
            }
        }
        total += acc / (layout.nx * layout.ny) as f64;
    }
    Ok(total / config.scales.len() as f64)
}

/// `upstream · ∂V/∂I` for [`tile_multiscale_value`].
pub fn tile_multiscale_backward(img: &Plane, config: &TileConfig, upstream: f64) -> Result<Plane> {
    config.validate()?;
    let mut grad = Plane::zeros(img.width, img.height);
    let per_scale = upstream / config.scales.len() as f64;
    for &s in &config.scales {
        let pooled = pool(img, s);
        let layout = tile_layout(pooled.width, pooled.height, config.tile_size)?;
        let per_tile = per_scale / (layout.nx * layout.ny) as f64;
        let mut grad_pooled = Plane::zeros(pooled.width, pooled.height);
        for ty in 0..layout.ny {
            for tx in 0..layout.nx {
                let tile = extract_tile(&pooled, &layout, tx, ty);
                let g = gradient_magnitude_backward(&tile, per_tile)?;
                for y in 0..layout.tile_h {
                    for x in 0..layout.tile_w {
                        let (gx, gy) = (tx * layout.tile_w + x, ty * layout.tile_h + y);
                        if gx < pooled.width && gy < pooled.height {
                            grad_pooled.add(gx, gy, g.get(x, y));
                        }
                    }
                }
            }
        }
        let g = unpool(&grad_pooled, s, img.width, img.height);
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }
    Ok(grad)
}

/// Multi-scale tiled contrast of the unit-weight IWE warped by `flow`.
pub fn tile_multiscale_objective(window: &EventWindow, flow: &FlowField, t_ref: f64, config: &TileConfig) -> Result<f64> {
    let iwe = iwe_from_flow(window, flow, t_ref, IweWeighting::Unit);
    tile_multiscale_value(&iwe.image, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearchResult {
    pub flow: [f64; 2],
    pub objective: f64,
}

/// Exhaustive search over constant flows in `[-range, range]²` with spacing `step`,
/// maximizing the full-image gradient-magnitude objective of the unit-weight IWE.
///
/// Ties keep the first candidate in row-major order of `(v, u)`.
pub fn cm_grid_search(window: &EventWindow, t_ref: f64, range: f64, step: f64) -> Result<GridSearchResult> {
    if !(step > 0.0) || !(range >= 0.0) {
        return Err(Error::Config(format!("invalid search grid: range {range}, step {step}")));
    }
    let n = (range / step).round() as i64;
    let weights = IweWeighting::Unit.weights(window.events);
    let times: Vec<f64> = window.events.iter().map(|e| window.normalized_time(e.t) - t_ref).collect();
    let mut best = GridSearchResult { flow: [0.0, 0.0], objective: f64::NEG_INFINITY };
    let mut positions = Vec::with_capacity(window.len());
    for iv in -n..=n {
        for iu in -n..=n {
            let flow = [iu as f64 * step, iv as f64 * step];
            positions.clear();
            positions.extend(
                window
                    .events
                    .iter()
                    .zip(&times)
                    .map(|(e, &dt)| Vector2::new(e.x as f64 - dt * flow[0], e.y as f64 - dt * flow[1])),
            );
            let img = build_iwe(&positions, &weights, window.width, window.height);
            let obj = gradient_magnitude_objective(&img)?;
            if obj > best.objective {
                best = GridSearchResult { flow, objective: obj };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;

    #[test]
    fn zero_flow_and_reference_time_leave_events_in_place() {
        let ev = vec![Event::new(0, 1, 2, Polarity::Positive), Event::new(100, 3, 0, Polarity::Negative)];
        let w = EventWindow { events: &ev, t_start: 0, t_end: 100, width: 4, height: 4 };
        let p = warp_events(&w, &FlowField::zeros(4, 4), 0.0);
        assert_eq!(p[0], Vector2::new(1.0, 2.0));
        assert_eq!(p[1], Vector2::new(3.0, 0.0));
        // t_k = t_ref leaves event 1 in place under any flow
        let p = warp_events(&w, &FlowField::constant(4, 4, [7.0, -3.0]), 1.0);
        assert_eq!(p[1], Vector2::new(3.0, 0.0));
    }

    #[test]
    fn warp_substitution() {
        let ev = vec![Event::new(100, 10, 0, Polarity::Positive)];
        let w = EventWindow { events: &ev, t_start: 0, t_end: 100, width: 16, height: 1 };
        let p = warp_events(&w, &FlowField::constant(16, 1, [5.0, 0.0]), 0.0);
        assert_eq!(p[0], Vector2::new(5.0, 0.0));
    }

    #[test]
    fn iwe_votes() {
        let img = build_iwe(&[Vector2::new(3.0, 3.0)], &[1.0], 8, 8);
        assert_eq!(img.get(3, 3), 1.0);
        assert_eq!(img.sum(), 1.0);
        let img = build_iwe(&[Vector2::new(3.5, 3.0)], &[1.0], 8, 8);
        assert_eq!(img.get(3, 3), 0.5);
        assert_eq!(img.get(4, 3), 0.5);
        let img = build_iwe(&[Vector2::new(-0.5, 0.0)], &[1.0], 8, 8);
        assert_eq!(img.sum(), 0.5);
    }

    #[test]
    fn variance_values() {
        assert_eq!(variance_objective(&Plane::filled(3, 3, 2.0)), 0.0);
        let img = Plane::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(variance_objective(&img), 1.0);
        let mut sharp = Plane::zeros(8, 8);
        sharp.set(4, 4, 4.0);
        let mut spread = Plane::zeros(8, 8);
        for (x, y) in [(4, 4), (5, 4), (4, 5), (5, 5)] {
            spread.set(x, y, 1.0);
        }
        assert!(variance_objective(&sharp) > variance_objective(&spread));
    }

    #[test]
    fn gradient_magnitude_spike() {
        let mut img = Plane::zeros(5, 5);
        img.set(2, 2, 1.0);
        let g = gradient_magnitude_objective(&img).unwrap();
        assert!((g - 0.04).abs() < 1e-15);
        assert_eq!(gradient_magnitude_objective(&Plane::filled(5, 5, 3.0)).unwrap(), 0.0);
        assert!(matches!(
            gradient_magnitude_objective(&Plane::zeros(2, 5)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    fn numeric_grad(img: &Plane, f: impl Fn(&Plane) -> f64) -> Plane {
        let h = 1e-6;
        let mut g = Plane::zeros(img.width, img.height);
        for i in 0..img.len() {
            let mut a = img.clone();
            a.data[i] += h;
            let mut b = img.clone();
            b.data[i] -= h;
            g.data[i] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn pseudo_random_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut s = seed;
        Plane::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        })
    }

    #[test]
    fn objective_backward_matches_finite_differences() {
        let img = pseudo_random_plane(12, 10, 1);
        let analytic = gradient_magnitude_backward(&img, 1.0).unwrap();
        let numeric = numeric_grad(&img, |p| gradient_magnitude_objective(p).unwrap());
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
        let analytic = variance_backward(&img, 1.0);
        let numeric = numeric_grad(&img, variance_objective);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() < 1e-7);
        }
    }

    #[test]
    fn tiled_backward_matches_finite_differences() {
        let img = pseudo_random_plane(18, 14, 9);
        let cfg = TileConfig { scales: vec![1, 2, 3], tile_size: 5 };
        let analytic = tile_multiscale_backward(&img, &cfg, 1.0).unwrap();
        let numeric = numeric_grad(&img, |p| tile_multiscale_value(p, &cfg).unwrap());
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn iwe_backward_matches_finite_differences() {
        let pos = vec![Vector2::new(2.3, 1.7), Vector2::new(0.2, 3.9), Vector2::new(-0.4, 2.2)];
        let wts = vec![1.0, -1.0, 2.0];
        let grad_img = pseudo_random_plane(6, 6, 4);
        let loss = |p: &[Vector2<f64>]| {
            let img = build_iwe(p, &wts, 6, 6);
            img.data.iter().zip(&grad_img.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic = build_iwe_backward(&pos, &wts, &grad_img);
        for k in 0..pos.len() {
            for axis in 0..2 {
                let h = 1e-6;
                let mut a = pos.clone();
                a[k][axis] += h;
                let mut b = pos.clone();
                b[k][axis] -= h;
                let n = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((analytic[k][axis] - n).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn single_tile_equals_plain_objective() {
        let img = pseudo_random_plane(16, 16, 2);
        let cfg = TileConfig::single_tile(16, 16);
        let a = tile_multiscale_value(&img, &cfg).unwrap();
        let b = gradient_magnitude_objective(&img).unwrap();
        assert_eq!(a, b);
        let zero = tile_multiscale_value(&Plane::filled(32, 32, 1.5), &TileConfig::default()).unwrap();
        assert_eq!(zero, 0.0);
        assert!(tile_multiscale_value(&img, &TileConfig { scales: vec![], tile_size: 4 }).is_err());
    }

    #[test]
    fn shuffling_keeps_variance_but_not_gradient_energy() {
        let mut img = Plane::zeros(6, 6);
        for x in 0..3 {
            for y in 0..6 {
                img.set(x, y, 1.0);
            }
        }
        let mut shuffled = img.clone();
        // checkerboard rearrangement of the same multiset of values
        for y in 0..6 {
            for x in 0..6 {
                shuffled.set(x, y, if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(variance_objective(&img), variance_objective(&shuffled));
        assert_ne!(
            gradient_magnitude_objective(&img).unwrap(),
            gradient_magnitude_objective(&shuffled).unwrap()
        );
    }
}
