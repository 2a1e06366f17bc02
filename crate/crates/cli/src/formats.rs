//! On-disk formats: event files, images, float planes, binding tables and metrics CSVs.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use evsplat_core::association::BindingTable;
use evsplat_core::events::{Event, EventStream, Polarity};
use evsplat_core::raster::{ColorImage, Plane};
use evsplat_core::supervision::LogRow;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const PLANE_MAGIC: &[u8; 4] = b"PLN1";
/// Packed record size: `u64 t`, `u16 x`, `u16 y`, `i8 p`.
pub const EVENT_RECORD_BYTES: usize = 13;

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(BufWriter::new(std::fs::File::create(path).map_err(CliError::io(path))?))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

/// CSV with a `# width=W height=H t_start=A t_end=B` header line, then `t_us,x,y,p` rows.
pub fn events_to_csv(stream: &EventStream) -> String {
    let mut s = format!(
        "# width={} height={} t_start={} t_end={}\nt_us,x,y,p\n",
        stream.width(),
        stream.height(),
        stream.t_start(),
        stream.t_end()
    );
    for e in stream.events() {
        writeln!(s, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8()).expect("writing to a String");
    }
    s
}

/// Parses [`events_to_csv`] output. Without the header line the sensor size and time range
/// are taken from the events themselves.
pub fn events_from_csv(reader: impl BufRead, path: &Path) -> Result<EventStream> {
    let mut geometry: Option<[u64; 4]> = None;
    let mut events = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        let line = line.trim();
        let bad = |m: String| CliError::format(path, format!("line {}: {m}", n + 1));
        if let Some(header) = line.strip_prefix('#') {
            let mut g = [0u64; 4];
            for (slot, key) in g.iter_mut().zip(["width", "height", "t_start", "t_end"]) {
                let value = header
                    .split_whitespace()
                    .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                    .ok_or_else(|| bad(format!("header lacks {key}")))?;
                *slot = value.parse().map_err(|_| bad(format!("bad {key} value {value:?}")))?;
            }
            geometry = Some(g);
            continue;
        }
        if line.is_empty() || line.starts_with("t_us") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, x, y, p] = fields[..] else {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        };
        let parse_err = |what: &str| bad(format!("bad {what}"));
        let p: i8 = p.parse().map_err(|_| parse_err("polarity"))?;
        events.push(Event::new(
            t.parse().map_err(|_| parse_err("timestamp"))?,
            x.parse().map_err(|_| parse_err("x"))?,
            y.parse().map_err(|_| parse_err("y"))?,
            Polarity::from_i8(p).map_err(|e| bad(e.to_string()))?,
        ));
    }
    let stream = match geometry {
        Some([w, h, a, b]) => EventStream::new(events, w as usize, h as usize, a, b),
        None => {
            let w = events.iter().map(|e| e.x as usize + 1).max().unwrap_or(1);
            let h = events.iter().map(|e| e.y as usize + 1).max().unwrap_or(1);
            EventStream::from_events(events, w, h)
        }
    };
    stream.map_err(|e| CliError::format(path, e))
}

/// `EVT1` magic, `u32` width and height, `u64` start, end and count, then packed records.
pub fn events_to_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + stream.len() * EVENT_RECORD_BYTES);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&(stream.width() as u32).to_le_bytes());
    out.extend_from_slice(&(stream.height() as u32).to_le_bytes());
    out.extend_from_slice(&stream.t_start().to_le_bytes());
    out.extend_from_slice(&stream.t_end().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.p.as_i8().to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < N {
            return Err(CliError::format(self.path, "truncated file"));
        }
        let (head, rest) = self.bytes.split_at(N);
        self.bytes = rest;
        Ok(head.try_into().expect("split at N"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }
}

pub fn events_from_binary(bytes: &[u8], path: &Path) -> Result<EventStream> {
    let mut c = Cursor { bytes, path };
    if &c.take::<4>()? != EVENT_MAGIC {
        return Err(CliError::format(path, "not an event file"));
    }
    let (w, h) = (c.u32()? as usize, c.u32()? as usize);
    let (t_start, t_end, count) = (c.u64()?, c.u64()?, c.u64()? as usize);
    if c.bytes.len() != count * EVENT_RECORD_BYTES {
        return Err(CliError::format(path, format!("expected {count} records, found {} bytes", c.bytes.len())));
    }
    let events = c
        .bytes
        .chunks_exact(EVENT_RECORD_BYTES)
        .map(|r| {
            let p = Polarity::from_i8(r[12] as i8).map_err(|e| CliError::format(path, e))?;
            Ok(Event::new(
                u64::from_le_bytes(r[0..8].try_into().expect("8 bytes")),
                u16::from_le_bytes([r[8], r[9]]),
                u16::from_le_bytes([r[10], r[11]]),
                p,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    EventStream::new(events, w, h, t_start, t_end).map_err(|e| CliError::format(path, e))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes CSV for a `.csv` path and the packed binary otherwise.
pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    if is_csv(path) {
        write_text(path, &events_to_csv(stream))
    } else {
        write_bytes(path, &events_to_binary(stream))
    }
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    if is_csv(path) {
        let file = std::fs::File::open(path).map_err(CliError::io(path))?;
        events_from_csv(BufReader::new(file), path)
    } else {
        events_from_binary(&read_bytes(path)?, path)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &ColorImage) -> image::RgbImage {
    image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        image::Rgb(img.get(x as usize, y as usize).map(to_u8))
    })
}

/// Writes an 8-bit PNG, or binary P6 PPM for a `.ppm` path.
pub fn write_image(path: &Path, img: &ColorImage) -> Result<()> {
    let rgb = to_rgb8(img);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        let mut bytes = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
        bytes.extend_from_slice(rgb.as_raw());
        return write_bytes(path, &bytes);
    }
    let mut bytes = Vec::new();
    rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CliError::format(path, e))?;
    write_bytes(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<ColorImage> {
    let rgb = image::open(path).map_err(|e| CliError::format(path, e))?.to_rgb8();
    let mut out = ColorImage::zeros(rgb.width() as usize, rgb.height() as usize);
    for (x, y, p) in rgb.enumerate_pixels() {
        out.set(x as usize, y as usize, p.0.map(|c| c as f64 / 255.0));
    }
    Ok(out)
}

/// `PLN1` magic, `u32` width, height and channel count, then interleaved little-endian `f32`.
pub fn planes_to_bytes(width: usize, height: usize, channels: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height * channels, "plane data length");
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(PLANE_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes()));
    out
}

/// Returns `(width, height, channels, values)`.
pub fn planes_from_bytes(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut c = Cursor { bytes, path };
    if &c.take::<4>()? != PLANE_MAGIC {
        return Err(CliError::format(path, "not a plane file"));
    }
    let (w, h, ch) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if c.bytes.len() != w * h * ch * 4 {
        return Err(CliError::format(path, "plane payload length mismatch"));
    }
    let values = c.bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    Ok((w, h, ch, values))
}

pub fn write_plane(path: &Path, plane: &Plane) -> Result<()> {
    write_bytes(path, &planes_to_bytes(plane.width, plane.height, 1, &plane.data))
}

/// Grayscale preview scaled so the finite range spans black to white; NaN maps to black.
pub fn plane_preview(plane: &Plane) -> ColorImage {
    let finite = plane.data.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = ColorImage::zeros(plane.width, plane.height);
    for (o, v) in out.data.iter_mut().zip(&plane.data) {
        let g = if v.is_finite() { (v - lo) / span } else { 0.0 };
        *o = [g; 3];
    }
    out
}

/// `gaussian_id,event_id,weight` rows.
pub fn bindings_to_csv(table: &BindingTable) -> String {
    let mut s = String::from("gaussian_id,event_id,weight\n");
    for (g, b) in table.rows() {
        writeln!(s, "{g},{},{}", b.event, b.weight).expect("writing to a String");
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-iteration training log; absent terms are empty cells.
pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,l_rgb,l_event,l_motion,gamma2,psnr\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.iteration, r.l_rgb, opt(r.l_event), opt(r.l_motion), r.gamma2, opt(r.psnr))
            .expect("writing to a String");
    }
    s
}

/// `epoch,loss` rows.
pub fn loss_curve_csv(epoch_losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in epoch_losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("writing to a String");
    }
    s
}

/// One recorded frame on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    /// Normalized time.
    pub t: f64,
    pub keyframe: bool,
    /// Image path relative to the index file.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameIndex {
    pub frames: Vec<FrameEntry>,
}
