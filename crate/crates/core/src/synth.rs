//! Analytic textures and translating sequences for flow experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::events::{simulate_events, EventStream, SimulatorConfig};
use crate::raster::Plane;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma2: f64,
    reach2: f64,
    amplitude: f64,
}

/// Log-intensity texture made of isotropic Gaussian blobs, defined on the whole plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTexture {
    blobs: Vec<Blob>,
    base_log: f64,
    /// Uniform bucket grid over the extent: blob indices whose reach touches each cell.
    origin: [f64; 2],
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

const CELL: f64 = 8.0;

impl BlobTexture {
    /// `density` blobs per square pixel over `[x0, x1] × [y0, y1]`, sigmas in `sigma`,
    /// amplitudes (in log intensity) uniform in `±amplitude`.
    pub fn random(seed: u64, extent: [f64; 4], density: f64, sigma: (f64, f64), amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [x0, x1, y0, y1] = extent;
        let count = ((x1 - x0) * (y1 - y0) * density).round().max(1.0) as usize;
        let blobs = (0..count)
            .map(|_| {
                let s = rng.random_range(sigma.0..=sigma.1);
                Blob {
                    cx: rng.random_range(x0..x1),
                    cy: rng.random_range(y0..y1),
                    inv_two_sigma2: 1.0 / (2.0 * s * s),
                    reach2: (4.0 * s).powi(2),
                    amplitude: rng.random_range(-amplitude..=amplitude),
                }
            })
            .collect::<Vec<Blob>>();
        let cols = ((x1 - x0) / CELL).ceil().max(1.0) as usize;
        let rows = ((y1 - y0) / CELL).ceil().max(1.0) as usize;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, b) in blobs.iter().enumerate() {
            let r = b.reach2.sqrt();
            let cx0 = (((b.cx - r - x0) / CELL).floor().max(0.0) as usize).min(cols - 1);
            let cx1 = (((b.cx + r - x0) / CELL).floor().max(0.0) as usize).min(cols - 1);
            let cy0 = (((b.cy - r - y0) / CELL).floor().max(0.0) as usize).min(rows - 1);
            let cy1 = (((b.cy + r - y0) / CELL).floor().max(0.0) as usize).min(rows - 1);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * cols + cx].push(i as u32);
                }
            }
        }
        Self { blobs, base_log: (0.4f64).ln(), origin: [x0, y0], cols, rows, cells }
    }

    /// Log intensity at `(x, y)`; outside the extent only the base level remains.
    pub fn log_intensity(&self, x: f64, y: f64) -> f64 {
        let cx = ((x - self.origin[0]) / CELL).floor();
        let cy = ((y - self.origin[1]) / CELL).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.cols as f64 || cy >= self.rows as f64 {
            return self.base_log;
        }
        self.base_log
            + self.cells[cy as usize * self.cols + cx as usize]
                .iter()
                .map(|&i| &self.blobs[i as usize])
                .filter_map(|b| {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    (d2 < b.reach2).then(|| b.amplitude * (-d2 * b.inv_two_sigma2).exp())
                })
                .sum::<f64>()
    }

    /// Linear intensity image of the texture shifted by `offset` pixels.
    pub fn render(&self, width: usize, height: usize, offset: [f64; 2]) -> Plane {
        Plane::from_fn(width, height, |x, y| self.log_intensity(x as f64 - offset[0], y as f64 - offset[1]).exp())
    }
}

/// Sequence parameters for a texture translating at constant speed.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub width: usize,
    pub height: usize,
    /// Displacement in pixels per window.
    pub displacement: [f64; 2],
    pub windows: usize,
    pub frames_per_window: usize,
    pub window_us: u64,
}

impl Translation {
    pub fn new(width: usize, height: usize, displacement: [f64; 2]) -> Self {
        Self { width, height, displacement, windows: 1, frames_per_window: 10, window_us: 10_000 }
    }

    pub fn with_windows(mut self, windows: usize) -> Self {
        self.windows = windows;
        self
    }

    /// Texture large enough to cover the image over the whole motion.
    pub fn texture(&self, seed: u64) -> BlobTexture {
        let span = self.windows as f64;
        let (dx, dy) = (self.displacement[0] * span, self.displacement[1] * span);
        let margin = 8.0;
        let extent = [
            -dx.max(0.0) - margin,
            self.width as f64 - dx.min(0.0) + margin,
            -dy.max(0.0) - margin,
            self.height as f64 - dy.min(0.0) + margin,
        ];
        BlobTexture::random(seed, extent, 0.06, (1.2, 2.5), 1.2)
    }

    pub fn frames(&self, texture: &BlobTexture) -> (Vec<Plane>, Vec<u64>) {
        let n = self.windows * self.frames_per_window;
        let frames = (0..=n)
            .map(|i| {
                let s = i as f64 / self.frames_per_window as f64;
                texture.render(self.width, self.height, [self.displacement[0] * s, self.displacement[1] * s])
            })
            .collect();
        let times = (0..=n as u64).map(|i| i * self.window_us / self.frames_per_window as u64).collect();
        (frames, times)
    }

    pub fn events(&self, seed: u64, config: &SimulatorConfig) -> Result<EventStream> {
        let (frames, times) = self.frames(&self.texture(seed));
        simulate_events(&frames, &times, config)
    }
}
