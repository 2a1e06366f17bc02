//! Event-to-Gaussian association through the rendered depth map.
//!
//! Events close to a reference time are lifted to 3D with the rendered depth at
//! their pixel, then every Gaussian keeps its `k` nearest lifted events with
//! normalized inverse-distance weights.

use nalgebra::{Vector2, Vector3};

use crate::events::{Event, EventStream};
use crate::geometry::{unproject, CameraIntrinsics, Pose};
use crate::raster::Plane;

pub const DEFAULT_K: usize = 3;
pub const REBIND_PERIOD: usize = 500;
/// Added to distances before inversion.
pub const WEIGHT_EPS: f64 = 1e-6;
/// Pixels whose accumulated alpha is below this count as background.
pub const ALPHA_THRESHOLD: f64 = 0.5;
/// Cutoff radius as a fraction of the bounding-box diagonal of the Gaussians.
pub const CUTOFF_FRACTION: f64 = 0.05;

/// Events with `|t - t0| <= delta_t`, in their original order.
pub fn filter_events_near(stream: &EventStream, t0: u64, delta_t: u64) -> EventStream {
    stream.slice_closed(t0.saturating_sub(delta_t), t0.saturating_add(delta_t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnprojectedEvent {
    /// Index into the event slice that was lifted.
    pub id: usize,
    pub point: Vector3<f64>,
    pub pixel: [u16; 2],
    pub t: u64,
}

/// Lifts every event whose pixel rendered with alpha at least `alpha_threshold` and a valid depth.
pub fn unproject_events(
    events: &[Event],
    depth: &Plane,
    alpha: &Plane,
    pose: &Pose,
    intr: &CameraIntrinsics,
    alpha_threshold: f64,
) -> Vec<UnprojectedEvent> {
    events
        .iter()
        .enumerate()
        .filter_map(|(id, e)| {
            let (x, y) = (e.x as usize, e.y as usize);
            if x >= depth.width || y >= depth.height || alpha.get(x, y) < alpha_threshold {
                return None;
            }
            let z = depth.get(x, y);
            let point = unproject(Vector2::new(x as f64, y as f64), z, pose, intr).ok()?;
            Some(UnprojectedEvent { id, point, pixel: [e.x, e.y], t: e.t })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binding {
    pub event: usize,
    pub pixel: [u16; 2],
    pub weight: f64,
}

/// Per-Gaussian lists of at most `k` weighted event bindings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BindingTable {
    lists: Vec<Vec<Binding>>,
}

impl BindingTable {
    pub fn empty(gaussians: usize) -> Self {
        Self { lists: vec![Vec::new(); gaussians] }
    }

    pub fn get(&self, gaussian: usize) -> &[Binding] {
        &self.lists[gaussian]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn bound_count(&self) -> usize {
        self.lists.iter().filter(|l| !l.is_empty()).count()
    }

    /// `(gaussian, binding)` pairs in Gaussian order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &Binding)> {
        self.lists.iter().enumerate().flat_map(|(g, l)| l.iter().map(move |b| (g, b)))
    }
}

/// Default cutoff: a fixed fraction of the diagonal of the Gaussians' bounding box.
pub fn default_cutoff(positions: &[Vector3<f64>]) -> f64 {
    let Some(first) = positions.first() else { return 0.0 };
    let (lo, hi) = positions.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    CUTOFF_FRACTION * (hi - lo).norm()
}

fn weights_for(neighbors: &[(f64, usize)], events: &[UnprojectedEvent]) -> Vec<Binding> {
    let total: f64 = neighbors.iter().map(|(d, _)| 1.0 / (d + WEIGHT_EPS)).sum();
    neighbors
        .iter()
        .map(|&(d, i)| Binding { event: events[i].id, pixel: events[i].pixel, weight: (1.0 / (d + WEIGHT_EPS)) / total })
        .collect()
}

fn select(mut candidates: Vec<(f64, usize)>, events: &[UnprojectedEvent], k: usize) -> Vec<Binding> {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(events[a.1].id.cmp(&events[b.1].id)));
    candidates.truncate(k);
    weights_for(&candidates, events)
}

/// Exhaustive `O(N·M)` binding; the reference for [`bind`].
pub fn bind_exhaustive(positions: &[Vector3<f64>], events: &[UnprojectedEvent], k: usize, cutoff: f64) -> BindingTable {
    let lists = positions
        .iter()
        .map(|q| {
            let candidates = events
                .iter()
                .enumerate()
                .map(|(i, e)| ((q - e.point).norm(), i))
                .filter(|(d, _)| *d <= cutoff)
                .collect();
            select(candidates, events, k)
        })
        .collect();
    BindingTable { lists }
}

struct Grid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<usize>>,
}

impl Grid {
    const MAX_DIM: usize = 64;

    fn new(events: &[UnprojectedEvent]) -> Self {
        let first = events[0].point;
        let (lo, hi) = events.iter().fold((first, first), |(lo, hi), e| (lo.inf(&e.point), hi.sup(&e.point)));
        let extent = hi - lo;
        let target = (events.len() as f64 / 2.0).cbrt().max(1.0);
        let cell = (extent.max() / target).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).min(Self::MAX_DIM));
        let cell = [0, 1, 2].iter().map(|&a| extent[a] / dims[a] as f64).fold(cell, f64::max);
        let mut grid = Self { origin: lo, cell, dims, cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]] };
        for (i, e) in events.iter().enumerate() {
            let c = grid.coord(&e.point);
            let idx = grid.index(c);
            grid.cells[idx].push(i);
        }
        grid
    }

    fn coord(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let v = ((p[a] - self.origin[a]) / self.cell).floor();
            (v.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Calls `visit` on every cell at Chebyshev distance exactly `r` from `c`.
    fn ring(&self, c: [usize; 3], r: usize, mut visit: impl FnMut(usize)) {
        let r = r as isize;
        let lo = |a: usize| (c[a] as isize - r).max(0);
        let hi = |a: usize| (c[a] as isize + r).min(self.dims[a] as isize - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let on_shell = (x - c[0] as isize).abs() == r
                        || (y - c[1] as isize).abs() == r
                        || (z - c[2] as isize).abs() == r;
                    if on_shell {
                        visit(self.index([x as usize, y as usize, z as usize]));
                    }
                }
            }
        }
    }
}

/// Exact `k`-nearest binding within `cutoff` using a uniform grid over the lifted events.
///
/// Ties in distance go to the smaller event id, so the result equals [`bind_exhaustive`].
pub fn bind(positions: &[Vector3<f64>], events: &[UnprojectedEvent], k: usize, cutoff: f64) -> BindingTable {
    if events.is_empty() || k == 0 {
        return BindingTable::empty(positions.len());
    }
    let grid = Grid::new(events);
    let max_ring = grid.dims.iter().copied().max().unwrap_or(1);
    let lists = positions
        .iter()
        .map(|q| {
            let c = grid.coord(q);
            let mut candidates: Vec<(f64, usize)> = Vec::new();
            for r in 0..=max_ring {
                // every point in later rings is at least this far away
                let bound = r as f64 * grid.cell;
                grid.ring(c, r, |cell| {
                    for &i in &grid.cells[cell] {
                        let d = (q - events[i].point).norm();
                        if d <= cutoff {
                            candidates.push((d, i));
                        }
                    }
                });
                if bound > cutoff {
                    break;
                }
                if candidates.len() >= k {
                    let mut ds: Vec<f64> = candidates.iter().map(|c| c.0).collect();
                    ds.select_nth_unstable_by(k - 1, f64::total_cmp);
                    if ds[k - 1] < bound {
                        break;
                    }
                }
            }
            select(candidates, events, k)
        })
        .collect();
    BindingTable { lists }
}

pub fn should_rebind(iteration: usize, period: usize) -> bool {
    period > 0 && iteration % period == 0
}
