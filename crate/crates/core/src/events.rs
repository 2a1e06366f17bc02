//! Event data, the log-intensity threshold simulator, polarity integration and
//! the bilinear temporal voxel grid.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::Plane;

/// Contrast threshold used throughout unless configured otherwise.
pub const DEFAULT_CONTRAST_THRESHOLD: f64 = 0.1;
/// Intensity floor applied before taking logarithms.
pub const INTENSITY_FLOOR: f64 = 1e-3;
/// Temporal bins of the voxel grid.
pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(p: i8) -> Result<Self> {
        match p {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::InvalidEvent(format!("polarity must be 1 or -1, got {other}"))),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from one sensor over a declared time range `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
    t_start: u64,
    t_end: u64,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: usize, height: usize, t_start: u64, t_end: u64) -> Result<Self> {
        if t_end < t_start {
            return Err(Error::InvalidEvent(format!("time range [{t_start}, {t_end}] is reversed")));
        }
        for (i, e) in events.iter().enumerate() {
            if (e.x as usize) >= width || (e.y as usize) >= height {
                return Err(Error::InvalidEvent(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.t < t_start || e.t > t_end {
                return Err(Error::InvalidEvent(format!(
                    "event {i} at t={} outside [{t_start}, {t_end}]",
                    e.t
                )));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::InvalidEvent(format!("timestamps decrease at event {i}")));
            }
        }
        Ok(Self { events, width, height, t_start, t_end })
    }

    /// Stream spanning exactly the timestamps of `events` (or `[0, 0]` when empty).
    pub fn from_events(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        let t_start = events.first().map_or(0, |e| e.t);
        let t_end = events.last().map_or(0, |e| e.t);
        Self::new(events, width, height, t_start, t_end)
    }

    pub fn empty(width: usize, height: usize, t_start: u64, t_end: u64) -> Self {
        Self { events: Vec::new(), width, height, t_start, t_end }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    /// Index range of events with `t_a <= t < t_b`.
    pub fn range_half_open(&self, t_a: u64, t_b: u64) -> Range<usize> {
        let lo = self.events.partition_point(|e| e.t < t_a);
        let hi = self.events.partition_point(|e| e.t < t_b).max(lo);
        lo..hi
    }

    /// Index range of events with `t_a <= t <= t_b`.
    pub fn range_closed(&self, t_a: u64, t_b: u64) -> Range<usize> {
        let lo = self.events.partition_point(|e| e.t < t_a);
        let hi = self.events.partition_point(|e| e.t <= t_b).max(lo);
        lo..hi
    }

    /// Sub-stream of events in `[t_a, t_b]` with that declared range.
    pub fn slice_closed(&self, t_a: u64, t_b: u64) -> EventStream {
        let r = self.range_closed(t_a, t_b);
        EventStream {
            events: self.events[r].to_vec(),
            width: self.width,
            height: self.height,
            t_start: t_a,
            t_end: t_b.max(t_a),
        }
    }

    /// Mirrors the stream in time about the center of its range and flips polarities,
    /// which is what the sensor would report for the same scene played backwards.
    pub fn time_reversed(&self) -> EventStream {
        let events = self
            .events
            .iter()
            .rev()
            .map(|e| Event { t: self.t_start + self.t_end - e.t, x: e.x, y: e.y, p: e.p.reversed() })
            .collect();
        EventStream { events, width: self.width, height: self.height, t_start: self.t_start, t_end: self.t_end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatorConfig {
    /// Log-intensity step that triggers one event.
    pub threshold: f64,
    /// Floor applied to intensities before the logarithm.
    pub intensity_floor: f64,
    /// Optional additive Gaussian jitter on each threshold crossing: `(sigma, seed)`.
    pub threshold_jitter: Option<(f64, u64)>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_CONTRAST_THRESHOLD, intensity_floor: INTENSITY_FLOOR, threshold_jitter: None }
    }
}

/// Emits events from linear-intensity frames.
///
/// Each pixel keeps a reference log level that persists across frames. Log intensity
/// is interpolated linearly between frames and an event is emitted at every crossing
/// of `reference ± C`, timestamped at the interpolated crossing time.
pub fn simulate_events(frames: &[Plane], timestamps: &[u64], config: &SimulatorConfig) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames(frames.len()));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::Shape(format!("{} frames but {} timestamps", frames.len(), timestamps.len())));
    }
    for i in 1..timestamps.len() {
        if timestamps[i] <= timestamps[i - 1] {
            return Err(Error::Ordering(i));
        }
    }
    if !(config.threshold > 0.0) {
        return Err(Error::Config(format!("contrast threshold must be positive, got {}", config.threshold)));
    }
    let (width, height) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != width || f.height != height) {
        return Err(Error::Shape("all frames must share one size".into()));
    }
    let floor = config.intensity_floor;
    let log_of = |v: f64| v.max(floor).ln();

    let mut jitter = config
        .threshold_jitter
        .map(|(sigma, seed)| (Normal::new(0.0, sigma.max(0.0)).expect("finite sigma"), ChaCha8Rng::seed_from_u64(seed)));
    let mut next_threshold = || -> f64 {
        match jitter.as_mut() {
            Some((dist, rng)) => (config.threshold + dist.sample(rng)).max(0.01 * config.threshold),
            None => config.threshold,
        }
    };

    let mut reference: Vec<f64> = frames[0].data.iter().map(|&v| log_of(v)).collect();
    let mut events = Vec::new();
    // tolerance so that a change of exactly k thresholds emits k events
    const LEVEL_TOL: f64 = 1e-9;

    for k in 1..frames.len() {
        let (t_a, t_b) = (timestamps[k - 1] as f64, timestamps[k] as f64);
        let span = t_b - t_a;
        for (idx, reference) in reference.iter_mut().enumerate() {
            let l_a = log_of(frames[k - 1].data[idx]);
            let l_b = log_of(frames[k].data[idx]);
            let delta = l_b - l_a;
            if delta == 0.0 {
                continue;
            }
            let (x, y) = ((idx % width) as u16, (idx / width) as u16);
            loop {
                let step = next_threshold();
                let (level, polarity) = if l_b > *reference {
                    (*reference + step, Polarity::Positive)
                } else {
                    (*reference - step, Polarity::Negative)
                };
                let crossed = match polarity {
                    Polarity::Positive => level <= l_b + LEVEL_TOL,
                    Polarity::Negative => level >= l_b - LEVEL_TOL,
                };
                if !crossed {
                    break;
                }
                // the level may lie outside [l_a, l_b] when the reference trails the signal
                let frac = ((level - l_a) / delta).clamp(0.0, 1.0);
                let t = (t_a + frac * span).round() as u64;
                events.push(Event { t, x, y, p: polarity });
                *reference = level;
            }
        }
    }
    // stable sort keeps pixel order for simultaneous events
    events.sort_by_key(|e| e.t);
    EventStream::new(events, width, height, timestamps[0], *timestamps.last().unwrap())
}

/// Image of `Σ p_i C` over events with `t_a <= t < t_b`.
pub fn accumulate_polarity(stream: &EventStream, t_a: u64, t_b: u64, threshold: f64) -> Plane {
    let mut img = Plane::zeros(stream.width(), stream.height());
    if t_b <= t_a {
        return img;
    }
    for e in &stream.events()[stream.range_half_open(t_a, t_b)] {
        img.add(e.x as usize, e.y as usize, e.p.sign() * threshold);
    }
    img
}

/// `bins × height × width` tensor of polarities spread over temporal bins.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub width: usize,
    pub height: usize,
    pub t_start: u64,
    pub t_end: u64,
    /// Layout `[bin][y][x]`.
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize, t_start: u64, t_end: u64) -> Self {
        Self { bins, width, height, t_start, t_end, values: vec![0.0; bins * width * height] }
    }

    #[inline]
    pub fn get(&self, bin: usize, x: usize, y: usize) -> f64 {
        self.values[(bin * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Bilinear temporal voxelization of events with `t_start <= t <= t_end`.
///
/// An event's normalized time `t* = (t - t_start)(B - 1) / (t_end - t_start)` votes
/// `p · max(0, 1 - |n - t*|)` into bin `n`.
pub fn voxelize(stream: &EventStream, t_start: u64, t_end: u64, bins: usize) -> Result<VoxelGrid> {
    if bins < 2 {
        return Err(Error::InvalidBins(bins));
    }
    if t_end <= t_start {
        return Err(Error::InvalidInterval(t_end as f64 - t_start as f64));
    }
    let (w, h) = (stream.width(), stream.height());
    let mut grid = VoxelGrid::zeros(bins, w, h, t_start, t_end);
    let scale = (bins - 1) as f64 / (t_end - t_start) as f64;
    for e in &stream.events()[stream.range_closed(t_start, t_end)] {
        let ts = (e.t - t_start) as f64 * scale;
        let lo = (ts.floor() as usize).min(bins - 1);
        let frac = ts - lo as f64;
        let pix = e.y as usize * w + e.x as usize;
        let p = e.p.sign();
        grid.values[lo * w * h + pix] += p * (1.0 - frac);
        if frac > 0.0 && lo + 1 < bins {
            grid.values[(lo + 1) * w * h + pix] += p * frac;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel_frames(values: &[f64]) -> Vec<Plane> {
        values.iter().map(|&v| Plane::filled(1, 1, v)).collect()
    }

    #[test]
    fn constant_frames_emit_nothing() {
        let frames = vec![Plane::filled(4, 3, 0.5); 3];
        let s = simulate_events(&frames, &[0, 1000, 2000], &SimulatorConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn three_threshold_rise_emits_three_equally_spaced_events() {
        let c = 0.1;
        let frames = single_pixel_frames(&[0.2, 0.2 * (3.0 * c as f64).exp()]);
        let s = simulate_events(&frames, &[0, 3000], &SimulatorConfig::default()).unwrap();
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1000, 2000, 3000]);
        assert!(s.events().iter().all(|e| e.p == Polarity::Positive));
    }

    #[test]
    fn simulator_rejects_bad_input() {
        let one = single_pixel_frames(&[0.5]);
        assert!(matches!(
            simulate_events(&one, &[0], &SimulatorConfig::default()),
            Err(Error::InsufficientFrames(1))
        ));
        let two = single_pixel_frames(&[0.5, 0.6]);
        assert!(matches!(simulate_events(&two, &[5, 5], &SimulatorConfig::default()), Err(Error::Ordering(1))));
    }

    #[test]
    fn reference_level_persists_across_frames() {
        // +0.15 then +0.1: first interval crosses once, second once more (total 0.25 -> 2 events)
        let frames = single_pixel_frames(&[1.0, 0.15f64.exp(), 0.25f64.exp()]);
        let s = simulate_events(&frames, &[0, 100, 200], &SimulatorConfig::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[0].t, 67);
        assert_eq!(s.events()[1].t, 150);
    }

    #[test]
    fn dark_pixels_hit_the_floor() {
        let frames = single_pixel_frames(&[0.0, 0.0]);
        let s = simulate_events(&frames, &[0, 10], &SimulatorConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn polarity_accumulation() {
        let ev = vec![
            Event::new(1, 2, 1, Polarity::Positive),
            Event::new(2, 2, 1, Polarity::Positive),
            Event::new(3, 2, 1, Polarity::Negative),
            Event::new(9, 0, 0, Polarity::Positive),
        ];
        let s = EventStream::new(ev, 4, 2, 0, 10).unwrap();
        let img = accumulate_polarity(&s, 0, 9, 0.1);
        assert!((img.get(2, 1) - 0.1).abs() < 1e-12);
        assert_eq!(img.get(0, 0), 0.0);
        assert!(accumulate_polarity(&s, 5, 5, 0.1).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxel_kernel_peak_and_midpoint() {
        let s = EventStream::new(vec![Event::new(250, 1, 0, Polarity::Positive)], 2, 1, 0, 1000).unwrap();
        let g = voxelize(&s, 0, 1000, 5).unwrap();
        assert_eq!(g.get(1, 1, 0), 1.0);
        assert_eq!(g.sum(), 1.0);

        let s = EventStream::new(vec![Event::new(375, 0, 0, Polarity::Positive)], 2, 1, 0, 1000).unwrap();
        let g = voxelize(&s, 0, 1000, 5).unwrap();
        assert_eq!(g.get(1, 0, 0), 0.5);
        assert_eq!(g.get(2, 0, 0), 0.5);
    }

    #[test]
    fn voxel_rejects_single_bin_and_excludes_outside_events() {
        let s = EventStream::new(
            vec![Event::new(5, 0, 0, Polarity::Positive), Event::new(50, 0, 0, Polarity::Negative)],
            1,
            1,
            0,
            100,
        )
        .unwrap();
        assert!(matches!(voxelize(&s, 0, 10, 1), Err(Error::InvalidBins(1))));
        let g = voxelize(&s, 0, 10, 5).unwrap();
        assert_eq!(g.sum(), 1.0);
        let empty = EventStream::empty(3, 3, 0, 10);
        assert!(voxelize(&empty, 0, 10, 5).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stream_validation() {
        assert!(EventStream::new(vec![Event::new(5, 3, 0, Polarity::Positive)], 3, 1, 0, 10).is_err());
        assert!(EventStream::new(
            vec![Event::new(5, 0, 0, Polarity::Positive), Event::new(4, 0, 0, Polarity::Positive)],
            3,
            1,
            0,
            10
        )
        .is_err());
        assert!(Polarity::from_i8(0).is_err());
    }
}
