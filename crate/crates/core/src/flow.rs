//! Tiled flow predictor, low-rank adapters and unsupervised contrast training.
//!
//! The predictor maps each `P × P` patch of a voxel grid through a shared
//! three-layer network (`B·P² → hidden → hidden → 2`, tanh hidden activations) to
//! one flow vector, and bilinearly upsamples the tile flows to every pixel.
//! Adapters add `B (A x)` to each layer's pre-activation. Training minimizes
//! `1 / V + λ TV`, where `V` is the multi-scale tiled contrast of the IWE warped by
//! the predicted flow, with gradients accumulated by hand through every stage.

use log::warn;
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::{
    build_iwe, build_iwe_backward, tile_multiscale_backward, tile_multiscale_value, EventWindow, FlowField,
    IweWeighting, TileConfig,
};
use crate::error::{Error, Result};
use crate::events::{voxelize, EventStream, VoxelGrid, DEFAULT_BINS};
use crate::nn::{exponential_lr, Activation, Adam, LinearShape};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_TV_WEIGHT: f64 = 0.01;
/// Samples whose contrast falls below this are skipped instead of producing huge `1/V` gradients.
pub const MIN_CONTRAST: f64 = 1e-8;
const ADAPTER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub width: usize,
    pub height: usize,
    /// Side of the square voxel-grid patch mapped to one flow vector.
    pub patch: usize,
    pub bins: usize,
    pub hidden: usize,
    /// Multiplier on the last layer's output, in pixels per window.
    pub output_scale: f64,
}

impl PredictorConfig {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, patch: 8, bins: DEFAULT_BINS, hidden: 64, output_scale: 4.0 }
    }

    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.patch)
    }

    pub fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.patch)
    }

    pub fn input_dim(&self) -> usize {
        self.bins * self.patch * self.patch
    }

    pub fn shapes(&self) -> [LinearShape; 3] {
        [
            LinearShape::new(self.input_dim(), self.hidden),
            LinearShape::new(self.hidden, self.hidden),
            LinearShape::new(self.hidden, 2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(LinearShape::param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.patch == 0 || self.hidden == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidBins(self.bins));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config(format!("output scale {} must be positive", self.output_scale)));
        }
        Ok(())
    }
}

const ACTIVATIONS: [Activation; 3] = [Activation::Tanh, Activation::Tanh, Activation::Identity];

fn layer_offsets(shapes: &[LinearShape; 3]) -> [usize; 4] {
    let mut o = [0; 4];
    for (l, s) in shapes.iter().enumerate() {
        o[l + 1] = o[l] + s.param_count();
    }
    o
}

/// Rounds every value through `f32` so that a 32-bit checkpoint reproduces it exactly.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Hex SHA-256 of the little-endian bytes of `values`.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Flow predictor with base weights `W_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledFlowPredictor {
    config: PredictorConfig,
    base: Vec<f64>,
}

/// Per-layer low-rank bypass: `A` (`rank × in`, Gaussian) then `B` (`out × rank`, zero) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    shapes: [LinearShape; 3],
    params: Vec<f64>,
}

impl LoraAdapter {
    pub fn new(config: &PredictorConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let shapes = config.shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
        let mut params = Vec::new();
        for s in &shapes {
            params.extend((0..rank * s.inputs).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, s.outputs * rank));
        }
        Ok(Self { rank, shapes, params })
    }

    pub fn from_params(config: &PredictorConfig, rank: usize, params: Vec<f64>) -> Result<Self> {
        let shapes = config.shapes();
        let expected: usize = shapes.iter().map(|s| rank * (s.inputs + s.outputs)).sum();
        if params.len() != expected {
            return Err(Error::Shape(format!("adapter needs {expected} values, got {}", params.len())));
        }
        Ok(Self { rank, shapes, params })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 4] {
        let mut o = [0; 4];
        for (l, s) in self.shapes.iter().enumerate() {
            o[l + 1] = o[l] + self.rank * (s.inputs + s.outputs);
        }
        o
    }

    /// `(A, B)` of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let o = self.offsets();
        self.params[o[l]..o[l + 1]].split_at(self.rank * self.shapes[l].inputs)
    }

    /// Sets every `B` to zero, so that `ΔW = B A` vanishes.
    pub fn zero_delta(&mut self) {
        let o = self.offsets();
        for l in 0..3 {
            let a_len = self.rank * self.shapes[l].inputs;
            self.params[o[l] + a_len..o[l + 1]].fill(0.0);
        }
    }

    pub fn delta_is_zero(&self) -> bool {
        (0..3).all(|l| self.layer(l).1.iter().all(|&b| b == 0.0))
    }

    /// Dense `ΔW = B A` of layer `l`, row-major `out × in`.
    pub fn delta_weight(&self, l: usize) -> Vec<f64> {
        let (a, b) = self.layer(l);
        let s = self.shapes[l];
        let mut d = vec![0.0; s.outputs * s.inputs];
        for o in 0..s.outputs {
            for k in 0..self.rank {
                let bk = b[o * self.rank + k];
                if bk == 0.0 {
                    continue;
                }
                for i in 0..s.inputs {
                    d[o * s.inputs + i] += bk * a[k * s.inputs + i];
                }
            }
        }
        d
    }
}

/// Activations kept from one tile's forward pass.
#[derive(Debug, Clone)]
struct TileTrace {
    /// Inputs to layers 0, 1, 2.
    inputs: [Vec<f64>; 3],
    /// Outputs of the activations of layers 0 and 1.
    acts: [Vec<f64>; 2],
    /// `A x` per layer (empty without adapters).
    ax: [Vec<f64>; 3],
}

/// Tile-level flows plus the traces needed for the backward pass.
#[derive(Debug, Clone)]
pub struct TileFlows {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub flows: Vec<[f64; 2]>,
    traces: Vec<TileTrace>,
}

impl TiledFlowPredictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = config.shapes().iter().flat_map(|s| s.init(&mut rng)).collect();
        Ok(Self { config, base })
    }

    pub fn from_params(config: PredictorConfig, base: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if base.len() != config.param_count() {
            return Err(Error::Shape(format!("predictor needs {} values, got {}", config.param_count(), base.len())));
        }
        Ok(Self { config, base })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn base_params(&self) -> &[f64] {
        &self.base
    }

    /// Mutable base weights; only pretraining should write these.
    pub fn base_params_mut(&mut self) -> &mut [f64] {
        &mut self.base
    }

    pub fn base_checksum(&self) -> String {
        checksum(&self.base)
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<()> {
        let c = &self.config;
        if grid.width != c.width || grid.height != c.height || grid.bins != c.bins {
            return Err(Error::Config(format!(
                "voxel grid {}x{}x{} does not match predictor {}x{}x{}",
                grid.bins, grid.width, grid.height, c.bins, c.width, c.height
            )));
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: Option<&LoraAdapter>) -> Result<()> {
        if let Some(a) = adapter {
            if a.shapes != self.config.shapes() {
                return Err(Error::Config("adapter layer shapes do not match the predictor".into()));
            }
        }
        Ok(())
    }

    fn patch_input(&self, grid: &VoxelGrid, tx: usize, ty: usize) -> Vec<f64> {
        let p = self.config.patch;
        let mut v = Vec::with_capacity(self.config.input_dim());
        for b in 0..grid.bins {
            for py in 0..p {
                for px in 0..p {
                    let (x, y) = (tx * p + px, ty * p + py);
                    v.push(if x < grid.width && y < grid.height { grid.get(b, x, y) } else { 0.0 });
                }
            }
        }
        v
    }

    pub fn predict_tiles(&self, grid: &VoxelGrid, adapter: Option<&LoraAdapter>) -> Result<TileFlows> {
        self.check_grid(grid)?;
        self.check_adapter(adapter)?;
        let shapes = self.config.shapes();
        let offs = layer_offsets(&shapes);
        let (tx_n, ty_n) = (self.config.tiles_x(), self.config.tiles_y());
        let mut flows = Vec::with_capacity(tx_n * ty_n);
        let mut traces = Vec::with_capacity(tx_n * ty_n);
        for ty in 0..ty_n {
            for tx in 0..tx_n {
                let mut x = self.patch_input(grid, tx, ty);
                let mut inputs: [Vec<f64>; 3] = Default::default();
                let mut acts: [Vec<f64>; 2] = Default::default();
                let mut ax: [Vec<f64>; 3] = Default::default();
                for l in 0..3 {
                    let s = shapes[l];
                    let mut z = vec![0.0; s.outputs];
                    s.forward(&self.base[offs[l]..offs[l + 1]], &x, &mut z);
                    if let Some(ad) = adapter {
                        let (a, b) = ad.layer(l);
                        let u: Vec<f64> = a.chunks_exact(s.inputs).map(|row| crate::nn::dot(row, &x)).collect();
                        for (o, zo) in z.iter_mut().enumerate() {
                            *zo += crate::nn::dot(&b[o * ad.rank..(o + 1) * ad.rank], &u);
                        }
                        ax[l] = u;
                    }
                    let act = ACTIVATIONS[l];
                    z.iter_mut().for_each(|v| *v = act.apply(*v));
                    inputs[l] = std::mem::replace(&mut x, z);
                    if l < 2 {
                        acts[l] = x.clone();
                    }
                }
                let s = self.config.output_scale;
                flows.push([s * x[0], s * x[1]]);
                traces.push(TileTrace { inputs, acts, ax });
            }
        }
        Ok(TileFlows { tiles_x: tx_n, tiles_y: ty_n, flows, traces })
    }

    pub fn predict(&self, grid: &VoxelGrid, adapter: Option<&LoraAdapter>) -> Result<FlowField> {
        let tiles = self.predict_tiles(grid, adapter)?;
        Ok(upsample(&tiles, self.config.patch, self.config.width, self.config.height))
    }

    /// Accumulates gradients of a loss with respect to base and adapter parameters,
    /// given its derivative with respect to every tile flow.
    fn backward(
        &self,
        tiles: &TileFlows,
        adapter: Option<&LoraAdapter>,
        grad_tiles: &[[f64; 2]],
        mut grad_base: Option<&mut [f64]>,
        mut grad_adapter: Option<&mut [f64]>,
    ) {
        let shapes = self.config.shapes();
        let offs = layer_offsets(&shapes);
        let aoffs = adapter.map(|a| a.offsets());
        for (trace, g) in tiles.traces.iter().zip(grad_tiles) {
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let mut dz = vec![g[0] * self.config.output_scale, g[1] * self.config.output_scale];
            for l in (0..3).rev() {
                let s = shapes[l];
                let x = &trace.inputs[l];
                let wb = &self.base[offs[l]..offs[l + 1]];
                let mut dx = vec![0.0; s.inputs];
                match grad_base.as_deref_mut() {
                    Some(gb) => s.backward(wb, x, &dz, &mut gb[offs[l]..offs[l + 1]], Some(&mut dx)),
                    None => {
                        let w = &wb[..s.weight_count()];
                        for (o, &d) in dz.iter().enumerate() {
                            if d != 0.0 {
                                for (dxi, wi) in dx.iter_mut().zip(&w[o * s.inputs..(o + 1) * s.inputs]) {
                                    *dxi += d * wi;
                                }
                            }
                        }
                    }
                }
                if let Some(ad) = adapter {
                    let r = ad.rank;
                    let (a, b) = ad.layer(l);
                    // u = Bᵀ dz
                    let mut u = vec![0.0; r];
                    for (o, &d) in dz.iter().enumerate() {
                        for k in 0..r {
                            u[k] += b[o * r + k] * d;
                        }
                    }
                    if let Some(ga) = grad_adapter.as_deref_mut() {
                        let ao = aoffs.expect("adapter present")[l];
                        let a_len = r * s.inputs;
                        let (grad_a, grad_b) = ga[ao..ao + a_len + s.outputs * r].split_at_mut(a_len);
                        for k in 0..r {
                            if u[k] != 0.0 {
                                for (gai, xi) in grad_a[k * s.inputs..(k + 1) * s.inputs].iter_mut().zip(x) {
                                    *gai += u[k] * xi;
                                }
                            }
                        }
                        for (o, &d) in dz.iter().enumerate() {
                            for k in 0..r {
                                grad_b[o * r + k] += d * trace.ax[l][k];
                            }
                        }
                    }
                    if l > 0 {
                        for k in 0..r {
                            if u[k] != 0.0 {
                                for (dxi, ai) in dx.iter_mut().zip(&a[k * s.inputs..(k + 1) * s.inputs]) {
                                    *dxi += u[k] * ai;
                                }
                            }
                        }
                    }
                }
                if l > 0 {
                    let act = ACTIVATIONS[l - 1];
                    dz = dx
                        .iter()
                        .zip(&trace.acts[l - 1])
                        .map(|(d, y)| d * act.derivative_from_output(*y))
                        .collect();
                }
            }
        }
    }
}

#[inline]
fn upsample_coord(p: usize, patch: usize, n: usize) -> (usize, usize, f64) {
    let g = ((p as f64 + 0.5) / patch as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = g.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, g - i0 as f64)
}

/// Bilinear interpolation of tile-center flows to every pixel.
pub fn upsample(tiles: &TileFlows, patch: usize, width: usize, height: usize) -> FlowField {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = upsample_coord(y, patch, tiles.tiles_y);
        for x in 0..width {
            let (x0, x1, fx) = upsample_coord(x, patch, tiles.tiles_x);
            let t = |tx: usize, ty: usize| tiles.flows[ty * tiles.tiles_x + tx];
            let mut f = [0.0; 2];
            for c in 0..2 {
                f[c] = (1.0 - fy) * ((1.0 - fx) * t(x0, y0)[c] + fx * t(x1, y0)[c])
                    + fy * ((1.0 - fx) * t(x0, y1)[c] + fx * t(x1, y1)[c]);
            }
            data.push(f);
        }
    }
    FlowField { width, height, data }
}

fn upsample_backward(grad_pixels: &[[f64; 2]], tiles_x: usize, tiles_y: usize, patch: usize, width: usize, height: usize) -> Vec<[f64; 2]> {
    let mut g = vec![[0.0; 2]; tiles_x * tiles_y];
    for y in 0..height {
        let (y0, y1, fy) = upsample_coord(y, patch, tiles_y);
        for x in 0..width {
            let (x0, x1, fx) = upsample_coord(x, patch, tiles_x);
            let gp = grad_pixels[y * width + x];
            if gp[0] == 0.0 && gp[1] == 0.0 {
                continue;
            }
            for (tx, ty, w) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                let t = &mut g[ty * tiles_x + tx];
                t[0] += w * gp[0];
                t[1] += w * gp[1];
            }
        }
    }
    g
}

/// Sum over both flow components of the mean absolute forward difference along x and along y.
pub fn tv_regularizer(flow: &FlowField) -> f64 {
    tv_with_grad(flow, None)
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tv_with_grad(flow: &FlowField, mut grad: Option<(&mut [[f64; 2]], f64)>) -> f64 {
    let (w, h) = (flow.width, flow.height);
    let mut total = 0.0;
    let nx = (w.saturating_sub(1) * h) as f64;
    let ny = (w * h.saturating_sub(1)) as f64;
    for c in 0..2 {
        if nx > 0.0 {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w - 1 {
                    let d = flow.get(x + 1, y)[c] - flow.get(x, y)[c];
                    s += d.abs();
                    if let Some((g, scale)) = grad.as_mut() {
                        let k = *scale * sgn(d) / nx;
                        g[y * w + x + 1][c] += k;
                        g[y * w + x][c] -= k;
                    }
                }
            }
            total += s / nx;
        }
        if ny > 0.0 {
            let mut s = 0.0;
            for y in 0..h - 1 {
                for x in 0..w {
                    let d = flow.get(x, y + 1)[c] - flow.get(x, y)[c];
                    s += d.abs();
                    if let Some((g, scale)) = grad.as_mut() {
                        let k = *scale * sgn(d) / ny;
                        g[(y + 1) * w + x][c] += k;
                        g[y * w + x][c] -= k;
                    }
                }
            }
            total += s / ny;
        }
    }
    total
}

/// One training window: its events and voxel grid. The IWE reference time is the window start.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub events: EventStream,
    pub grid: VoxelGrid,
}

impl FlowSample {
    pub fn new(stream: &EventStream, t_start: u64, t_end: u64, bins: usize) -> Result<Self> {
        let grid = voxelize(stream, t_start, t_end, bins)?;
        let mut events = stream.slice_closed(t_start, t_end);
        events = EventStream::new(events.into_events(), stream.width(), stream.height(), t_start, t_end)?;
        Ok(Self { events, grid })
    }

    /// Consecutive windows of length `window_us` covering the stream, stepping by `stride_us`.
    pub fn sliding(stream: &EventStream, window_us: u64, stride_us: u64, bins: usize) -> Result<Vec<Self>> {
        if window_us == 0 || stride_us == 0 {
            return Err(Error::InvalidInterval(0.0));
        }
        let mut out = Vec::new();
        let mut t = stream.t_start();
        while t + window_us <= stream.t_end() {
            out.push(Self::new(stream, t, t + window_us, bins)?);
            t += stride_us;
        }
        Ok(out)
    }

    pub fn window(&self) -> EventWindow<'_> {
        EventWindow::whole(&self.events)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub tv_weight: f64,
    pub tiles: TileConfig,
    /// Normalized reference times whose contrasts are averaged into `V`.
    pub reference_times: Vec<f64>,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr_start: 5e-4,
            lr_end: 1e-4,
            tv_weight: DEFAULT_TV_WEIGHT,
            tiles: TileConfig::default(),
            reference_times: vec![0.0],
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::Config(format!("TV weight {} must be non-negative", self.tv_weight)));
        }
        if self.reference_times.is_empty() || self.reference_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("reference times must be a non-empty subset of [0, 1]".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowLoss {
    pub total: f64,
    pub contrast: f64,
    pub tv: f64,
}

/// Loss and gradients of one sample; `None` when the contrast is too small.
pub struct FlowGradients {
    pub loss: FlowLoss,
    pub base: Option<Vec<f64>>,
    pub adapter: Option<Vec<f64>>,
}

/// `1/V + λ TV` for one sample, or `None` when `V < MIN_CONTRAST`.
pub fn flow_loss(
    predictor: &TiledFlowPredictor,
    adapter: Option<&LoraAdapter>,
    sample: &FlowSample,
    config: &FlowTrainConfig,
) -> Result<Option<FlowLoss>> {
    let flow = predictor.predict(&sample.grid, adapter)?;
    loss_of_flow(&flow, sample, config)
}

fn loss_of_flow(flow: &FlowField, sample: &FlowSample, config: &FlowTrainConfig) -> Result<Option<FlowLoss>> {
    let (v, _) = contrast_of_flow(flow, sample, config, false)?;
    if v < MIN_CONTRAST {
        return Ok(None);
    }
    let tv = tv_regularizer(flow);
    Ok(Some(FlowLoss { total: 1.0 / v + config.tv_weight * tv, contrast: v, tv }))
}

/// Contrast `V` averaged over the configured reference times and, on request,
/// `∂(1/V)/∂flow` per pixel.
fn contrast_of_flow(
    flow: &FlowField,
    sample: &FlowSample,
    config: &FlowTrainConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<[f64; 2]>>)> {
    let window = sample.window();
    let (w, h) = (flow.width, flow.height);
    let weights = IweWeighting::Unit.weights(window.events);
    let times: Vec<f64> = window.events.iter().map(|e| window.normalized_time(e.t)).collect();
    let refs = &config.reference_times;
    let mut v = 0.0;
    let mut per_ref = Vec::with_capacity(refs.len());
    for &t_ref in refs {
        let positions: Vec<Vector2<f64>> = window
            .events
            .iter()
            .zip(&times)
            .map(|(e, &t)| {
                let f = flow.get(e.x as usize, e.y as usize);
                Vector2::new(e.x as f64 - (t - t_ref) * f[0], e.y as f64 - (t - t_ref) * f[1])
            })
            .collect();
        let iwe = build_iwe(&positions, &weights, w, h);
        v += tile_multiscale_value(&iwe, &config.tiles)? / refs.len() as f64;
        per_ref.push((t_ref, positions, iwe));
    }
    if !want_grad || v < MIN_CONTRAST {
        return Ok((v, None));
    }
    let upstream = -1.0 / (v * v * refs.len() as f64);
    let mut grad_flow = vec![[0.0; 2]; w * h];
    for (t_ref, positions, iwe) in per_ref {
        let grad_iwe = tile_multiscale_backward(&iwe, &config.tiles, upstream)?;
        let grad_pos = build_iwe_backward(&positions, &weights, &grad_iwe);
        for ((e, &t), gp) in window.events.iter().zip(&times).zip(&grad_pos) {
            let g = &mut grad_flow[e.y as usize * w + e.x as usize];
            g[0] -= (t - t_ref) * gp.x;
            g[1] -= (t - t_ref) * gp.y;
        }
    }
    Ok((v, Some(grad_flow)))
}

/// Loss and analytic gradients with respect to the requested parameter groups.
pub fn flow_gradients(
    predictor: &TiledFlowPredictor,
    adapter: Option<&LoraAdapter>,
    sample: &FlowSample,
    config: &FlowTrainConfig,
    want_base: bool,
    want_adapter: bool,
) -> Result<Option<FlowGradients>> {
    let cfg = predictor.config();
    let tiles = predictor.predict_tiles(&sample.grid, adapter)?;
    let flow = upsample(&tiles, cfg.patch, cfg.width, cfg.height);
    let (v, grad) = contrast_of_flow(&flow, sample, config, true)?;
    let Some(mut grad_flow) = grad else {
        return Ok(None);
    };
    let tv = tv_regularizer(&flow);
    let loss = FlowLoss { total: 1.0 / v + config.tv_weight * tv, contrast: v, tv };

    if config.tv_weight > 0.0 {
        tv_with_grad(&flow, Some((&mut grad_flow, config.tv_weight)));
    }
    let grad_tiles = upsample_backward(&grad_flow, tiles.tiles_x, tiles.tiles_y, cfg.patch, cfg.width, cfg.height);
    let mut gb = want_base.then(|| vec![0.0; predictor.base.len()]);
    let mut ga = match (want_adapter, adapter) {
        (true, Some(a)) => Some(vec![0.0; a.params.len()]),
        _ => None,
    };
    predictor.backward(&tiles, adapter, &grad_tiles, gb.as_deref_mut(), ga.as_deref_mut());
    Ok(Some(FlowGradients { loss, base: gb, adapter: ga }))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped: usize,
}

fn run_epochs(
    samples: &[FlowSample],
    config: &FlowTrainConfig,
    mut step: impl FnMut(&FlowSample, f64, usize) -> Result<Option<f64>>,
) -> Result<TrainReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.epochs * samples.len();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut k = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for &i in &order {
            let lr = exponential_lr(config.lr_start, config.lr_end, k, total);
            match step(&samples[i], lr, k)? {
                Some(l) => {
                    report.step_losses.push(l);
                    sum += l;
                    n += 1;
                }
                None => {
                    warn!("skipping flow sample {i}: contrast below {MIN_CONTRAST}");
                    report.skipped += 1;
                }
            }
            k += 1;
        }
        report.epoch_losses.push(if n > 0 { sum / n as f64 } else { f64::NAN });
    }
    Ok(report)
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, detail: format!("flow loss became {loss}") });
    }
    Ok(())
}

/// Trains the base weights on `samples`; the weights are rounded to `f32` at the end.
pub fn pretrain(predictor: &mut TiledFlowPredictor, samples: &[FlowSample], config: &FlowTrainConfig) -> Result<TrainReport> {
    let mut opt = Adam::new(predictor.base.len());
    let report = run_epochs(samples, config, |sample, lr, k| {
        let Some(g) = flow_gradients(predictor, None, sample, config, true, false)? else {
            return Ok(None);
        };
        check_finite(g.loss.total, k)?;
        let grads = g.base.expect("base gradients requested");
        opt.step(&mut predictor.base, &grads, lr);
        Ok(Some(g.loss.total))
    })?;
    quantize_f32(&mut predictor.base);
    Ok(report)
}

/// Fine-tunes only the adapter; the predictor is borrowed immutably so `W_0` cannot change.
/// The adapter is rounded to `f32` at the end.
pub fn locm_finetune(
    predictor: &TiledFlowPredictor,
    adapter: &mut LoraAdapter,
    samples: &[FlowSample],
    config: &FlowTrainConfig,
) -> Result<TrainReport> {
    predictor.check_adapter(Some(adapter))?;
    let before = predictor.base_checksum();
    let mut opt = Adam::new(adapter.params.len());
    let report = run_epochs(samples, config, |sample, lr, k| {
        let Some(g) = flow_gradients(predictor, Some(adapter), sample, config, false, true)? else {
            return Ok(None);
        };
        check_finite(g.loss.total, k)?;
        let grads = g.adapter.expect("adapter gradients requested");
        opt.step(&mut adapter.params, &grads, lr);
        Ok(Some(g.loss.total))
    })?;
    quantize_f32(&mut adapter.params);
    debug_assert_eq!(before, predictor.base_checksum());
    Ok(report)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error over the smoothly checked parameters.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose `±h` probe straddles a kink of the piecewise-smooth loss
    /// (an event crossing a pixel boundary during bilinear voting).
    pub nonsmooth: usize,
}

/// Compares analytic gradients of the flow loss over all base and adapter parameters
/// against central differences with step `1e-4`.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-2 · max|n| + 1e-12`. An entry whose forward and backward one-sided
/// differences disagree by more than 0.2% of the larger is straddling a kink and is
/// counted in `nonsmooth` instead.
pub fn gradient_check(
    predictor: &TiledFlowPredictor,
    adapter: &LoraAdapter,
    sample: &FlowSample,
    config: &FlowTrainConfig,
) -> Result<GradientCheck> {
    let Some(g) = flow_gradients(predictor, Some(adapter), sample, config, true, true)? else {
        return Ok(GradientCheck { max_relative_error: 0.0, checked: 0, nonsmooth: 0 });
    };
    let loss_at = |p: &TiledFlowPredictor, a: &LoraAdapter| -> Result<f64> {
        Ok(flow_loss(p, Some(a), sample, config)?.map_or(0.0, |l| l.total))
    };
    let h = 1e-4;
    let center = loss_at(predictor, adapter)?;
    // (forward, backward) one-sided differences per parameter
    let mut probes = Vec::with_capacity(predictor.base.len() + adapter.params.len());
    let mut p = predictor.clone();
    for i in 0..p.base.len() {
        let orig = p.base[i];
        p.base[i] = orig + h;
        let up = loss_at(&p, adapter)?;
        p.base[i] = orig - h;
        let down = loss_at(&p, adapter)?;
        p.base[i] = orig;
        probes.push(((up - center) / h, (center - down) / h));
    }
    let mut a = adapter.clone();
    for i in 0..a.params.len() {
        let orig = a.params[i];
        a.params[i] = orig + h;
        let up = loss_at(predictor, &a)?;
        a.params[i] = orig - h;
        let down = loss_at(predictor, &a)?;
        a.params[i] = orig;
        probes.push(((up - center) / h, (center - down) / h));
    }
    let analytic: Vec<f64> = g.base.unwrap().into_iter().chain(g.adapter.unwrap()).collect();
    let numeric: Vec<f64> = probes.iter().map(|(f, b)| 0.5 * (f + b)).collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-2 * scale + 1e-12;
    let mut out = GradientCheck { max_relative_error: 0.0, checked: 0, nonsmooth: 0 };
    for ((an, nu), (f, b)) in analytic.iter().zip(&numeric).zip(&probes) {
        if (f - b).abs() > 2e-3 * f.abs().max(b.abs()).max(floor) {
            out.nonsmooth += 1;
            continue;
        }
        out.checked += 1;
        out.max_relative_error = out.max_relative_error.max((an - nu).abs() / an.abs().max(nu.abs()).max(floor));
    }
    Ok(out)
}

/// Mean endpoint error between a flow field and a constant reference flow.
pub fn mean_endpoint_error(flow: &FlowField, reference: [f64; 2]) -> f64 {
    let n = flow.data.len().max(1) as f64;
    flow.data.iter().map(|f| ((f[0] - reference[0]).powi(2) + (f[1] - reference[1]).powi(2)).sqrt()).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointHeader {
    Predictor { config: PredictorConfig, layers: Vec<[usize; 2]>, values: usize },
    Adapter { config: PredictorConfig, layers: Vec<[usize; 2]>, rank: usize, values: usize },
}

fn encode(header: &CheckpointHeader, values: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * values.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload = &bytes[8 + len..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok((header, values))
}

fn layer_dims(config: &PredictorConfig) -> Vec<[usize; 2]> {
    config.shapes().iter().map(|s| [s.inputs, s.outputs]).collect()
}

impl TiledFlowPredictor {
    /// Length-prefixed JSON header followed by little-endian `f32` weights.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = CheckpointHeader::Predictor {
            config: self.config.clone(),
            layers: layer_dims(&self.config),
            values: self.base.len(),
        };
        encode(&header, &self.base)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        match decode(bytes)? {
            (CheckpointHeader::Predictor { config, values, .. }, v) if v.len() == values => Self::from_params(config, v),
            (CheckpointHeader::Predictor { .. }, _) => Err(Error::Checkpoint("payload length mismatch".into())),
            _ => Err(Error::Checkpoint("file holds an adapter, not a predictor".into())),
        }
    }
}

impl LoraAdapter {
    pub fn to_checkpoint(&self, config: &PredictorConfig) -> Vec<u8> {
        let header = CheckpointHeader::Adapter {
            config: config.clone(),
            layers: layer_dims(config),
            rank: self.rank,
            values: self.params.len(),
        };
        encode(&header, &self.params)
    }

    pub fn from_checkpoint(bytes: &[u8], predictor: &PredictorConfig) -> Result<Self> {
        match decode(bytes)? {
            (CheckpointHeader::Adapter { config, rank, .. }, v) => {
                if &config != predictor {
                    return Err(Error::Checkpoint("adapter was trained for a different predictor".into()));
                }
                Self::from_params(&config, rank, v)
            }
            _ => Err(Error::Checkpoint("file holds a predictor, not an adapter".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity, SimulatorConfig};
    use crate::synth::Translation;

    fn small_config() -> PredictorConfig {
        PredictorConfig { width: 12, height: 12, patch: 4, bins: 2, hidden: 6, output_scale: 2.0 }
    }

    fn small_sample(seed: u64) -> FlowSample {
        let t = Translation { frames_per_window: 6, ..Translation::new(12, 12, [2.5, -1.5]) };
        let s = t.events(seed, &SimulatorConfig::default()).unwrap();
        FlowSample::new(&s, 0, t.window_us, 2).unwrap()
    }

    fn small_tiles() -> FlowTrainConfig {
        FlowTrainConfig { tiles: TileConfig { scales: vec![1, 2], tile_size: 6 }, tv_weight: 0.05, ..Default::default() }
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let cfg = PredictorConfig::new(16, 16);
        let p = TiledFlowPredictor::new(cfg.clone(), 1).unwrap();
        let a = LoraAdapter::new(&cfg, DEFAULT_RANK, 2).unwrap();
        assert!(a.delta_is_zero());
        let sample = {
            let t = Translation::new(16, 16, [3.0, 0.0]);
            let s = t.events(5, &SimulatorConfig::default()).unwrap();
            FlowSample::new(&s, 0, t.window_us, 5).unwrap()
        };
        assert_eq!(p.predict(&sample.grid, None).unwrap(), p.predict(&sample.grid, Some(&a)).unwrap());
    }

    #[test]
    fn zero_grid_with_zero_biases_gives_zero_flow() {
        let cfg = PredictorConfig::new(16, 16);
        let p = TiledFlowPredictor::new(cfg, 1).unwrap();
        let grid = VoxelGrid::zeros(5, 16, 16, 0, 10);
        assert!(p.predict(&grid, None).unwrap().data.iter().all(|f| *f == [0.0, 0.0]));
    }

    #[test]
    fn grid_shape_mismatch_is_config_error() {
        let p = TiledFlowPredictor::new(PredictorConfig::new(16, 16), 1).unwrap();
        let grid = VoxelGrid::zeros(5, 8, 16, 0, 10);
        assert!(matches!(p.predict(&grid, None), Err(Error::Config(_))));
    }

    #[test]
    fn tv_values() {
        assert_eq!(tv_regularizer(&FlowField::constant(5, 5, [1.0, -2.0])), 0.0);
        let f = FlowField { width: 4, height: 4, data: (0..16).map(|i| [(i % 4) as f64, 0.0]).collect() };
        assert_eq!(tv_regularizer(&f), 1.0);
        let g = FlowField { width: 4, height: 4, data: f.data.iter().map(|v| [v[0] + 3.0, v[1] - 1.0]).collect() };
        assert_eq!(tv_regularizer(&g), 1.0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = small_config();
        let p = TiledFlowPredictor::new(cfg.clone(), 7).unwrap();
        assert!(cfg.param_count() <= 2000);
        let mut a = LoraAdapter::new(&cfg, 2, 8).unwrap();
        // give B nonzero values so every adapter path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 0.1).unwrap();
        a.params.iter_mut().for_each(|v| *v += n.sample(&mut rng));
        for seed in 0..8 {
            let check = gradient_check(&p, &a, &small_sample(seed), &small_tiles()).unwrap();
            assert!(check.max_relative_error <= 1e-3, "seed {seed}: {check:?}");
            assert!(check.checked >= 2 * check.nonsmooth, "seed {seed}: {check:?}");
        }
    }

    #[test]
    fn constant_iwe_has_no_gradient() {
        let cfg = small_config();
        let p = TiledFlowPredictor::new(cfg.clone(), 7).unwrap();
        let a = LoraAdapter::new(&cfg, 2, 8).unwrap();
        let empty = EventStream::empty(12, 12, 0, 100);
        let sample = FlowSample::new(&empty, 0, 100, 2).unwrap();
        assert_eq!(gradient_check(&p, &a, &sample, &small_tiles()).unwrap().max_relative_error, 0.0);
    }

    #[test]
    fn delta_weight_is_linear_in_b() {
        let cfg = small_config();
        let mut a = LoraAdapter::new(&cfg, 3, 1).unwrap();
        a.params.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
        let d1 = a.delta_weight(1);
        let o = a.offsets();
        let a_len = 3 * cfg.hidden;
        for v in &mut a.params[o[1] + a_len..o[2]] {
            *v *= 2.0;
        }
        let d2 = a.delta_weight(1);
        for (x, y) in d1.iter().zip(&d2) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_identically() {
        let cfg = small_config();
        let mut p = TiledFlowPredictor::new(cfg.clone(), 3).unwrap();
        quantize_f32(&mut p.base);
        let q = TiledFlowPredictor::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, q);
        let mut a = LoraAdapter::new(&cfg, 2, 3).unwrap();
        quantize_f32(&mut a.params);
        let b = LoraAdapter::from_checkpoint(&a.to_checkpoint(&cfg), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(LoraAdapter::from_checkpoint(&p.to_checkpoint(), &cfg).is_err());
        assert!(TiledFlowPredictor::from_checkpoint(&[1, 2, 3]).is_err());
    }

    #[test]
    fn finetune_leaves_base_untouched_and_zeroing_reverts() {
        let cfg = small_config();
        let p = TiledFlowPredictor::new(cfg.clone(), 3).unwrap();
        let mut a = LoraAdapter::new(&cfg, 2, 4).unwrap();
        let before = p.base_checksum();
        let samples: Vec<_> = (0..3).map(small_sample).collect();
        let base_pred = p.predict(&samples[0].grid, None).unwrap();
        locm_finetune(&p, &mut a, &samples, &small_tiles()).unwrap();
        assert_eq!(before, p.base_checksum());
        assert!(!a.delta_is_zero());
        a.zero_delta();
        assert_eq!(p.predict(&samples[0].grid, Some(&a)).unwrap(), base_pred);
    }

    #[test]
    fn empty_corpus_stays_finite() {
        let cfg = small_config();
        let mut p = TiledFlowPredictor::new(cfg, 3).unwrap();
        let empty = EventStream::empty(12, 12, 0, 100);
        let samples = vec![FlowSample::new(&empty, 0, 100, 2).unwrap()];
        let report = pretrain(&mut p, &samples, &small_tiles()).unwrap();
        assert_eq!(report.skipped, 3);
        assert!(p.predict(&samples[0].grid, None).unwrap().is_finite());
    }

    #[test]
    fn sliding_windows_cover_the_stream() {
        let ev = vec![Event::new(5, 0, 0, Polarity::Positive), Event::new(25, 1, 1, Polarity::Negative)];
        let s = EventStream::new(ev, 4, 4, 0, 40).unwrap();
        let w = FlowSample::sliding(&s, 20, 10, 2).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].events.len(), 1);
        assert_eq!(w[1].events.len(), 1);
        assert_eq!(w[2].events.t_start(), 20);
    }
}
