//! Event streams, time windows, time reversal and voxel grids.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.sign())
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Time-ordered events from a `width` x `height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, checking ordering and sensor bounds.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("sensor dimensions must be positive"));
        }
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::invalid(format!(
                "event ({}, {}) outside {}x{} sensor",
                e.x, e.y, width, height
            )));
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::invalid("events are not sorted by timestamp"));
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    /// Like [`EventStream::new`] but sorts by timestamp first (stable).
    pub fn from_unsorted(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(width, height, events)
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Inclusive `(t_min, t_max)`, or `None` when empty.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| i64::from(e.p.sign())).sum()
    }

    fn with_events(&self, events: Vec<Event>) -> Self {
        Self {
            width: self.width,
            height: self.height,
            events,
        }
    }
}

/// Events with `t0 <= t < t1`, order preserved.
pub fn slice_window(stream: &EventStream, t0: u64, t1: u64) -> Result<EventStream> {
    if t0 >= t1 {
        return Err(Error::invalid(format!("empty window [{t0}, {t1})")));
    }
    let events = stream.events();
    let lo = events.partition_point(|e| e.t < t0);
    let hi = events.partition_point(|e| e.t < t1);
    Ok(stream.with_events(events[lo..hi].to_vec()))
}

/// The first `ratio * n_forward` events at or after `target` (fewer if the
/// stream runs out).
pub fn select_backward(
    stream: &EventStream,
    target: u64,
    n_forward: usize,
    ratio: usize,
) -> EventStream {
    let events = stream.events();
    let start = events.partition_point(|e| e.t < target);
    let want = n_forward.saturating_mul(ratio);
    let end = start.saturating_add(want).min(events.len());
    stream.with_events(events[start..end].to_vec())
}

/// Time reversal within the stream's own span: `t -> t_min + t_max - t` with
/// polarity flipped. Applying it twice returns the original stream.
pub fn reverse(stream: &EventStream) -> EventStream {
    let Some((t_min, t_max)) = stream.time_span() else {
        return stream.clone();
    };
    let events = stream
        .events()
        .iter()
        .rev()
        .map(|e| Event {
            x: e.x,
            y: e.y,
            t: t_min + t_max - e.t,
            p: e.p.flipped(),
        })
        .collect();
    stream.with_events(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelizationConfig {
    pub num_bins: usize,
    pub width: u16,
    pub height: u16,
    /// Inclusive window start (us).
    pub t_start: u64,
    /// Exclusive window end (us).
    pub t_end: u64,
}

impl VoxelizationConfig {
    pub const DEFAULT_BINS: usize = 5;

    pub fn new(width: u16, height: u16, t_start: u64, t_end: u64) -> Self {
        Self {
            num_bins: Self::DEFAULT_BINS,
            width,
            height,
            t_start,
            t_end,
        }
    }

    pub fn with_bins(mut self, num_bins: usize) -> Self {
        self.num_bins = num_bins;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::invalid("voxel grid needs at least one bin"));
        }
        if self.t_end <= self.t_start {
            return Err(Error::invalid(format!(
                "voxel window [{}, {}) is empty",
                self.t_start, self.t_end
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("voxel grid dimensions must be positive"));
        }
        Ok(())
    }
}

/// `num_bins x height x width` signed event mass, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub num_bins: usize,
    pub height: usize,
    pub width: usize,
    pub t_start: u64,
    pub t_end: u64,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(config: &VoxelizationConfig) -> Self {
        let (h, w) = (usize::from(config.height), usize::from(config.width));
        Self {
            num_bins: config.num_bins,
            height: h,
            width: w,
            t_start: config.t_start,
            t_end: config.t_end,
            data: vec![0.0; config.num_bins * h * w],
        }
    }

    #[inline]
    pub fn at(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.num_bins, self.height, self.width]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise sum of two grids with identical shape.
    pub fn try_add(&self, other: &VoxelGrid) -> Result<VoxelGrid> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context: "VoxelGrid::try_add",
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }
}

/// Bilinear temporal binning: an event at normalized time
/// `t* = (B-1)(t - t_start)/(t_end - t_start)` adds `p * max(0, 1 - |b - t*|)`
/// to every bin `b` at its pixel.
pub fn voxelize(stream: &EventStream, config: &VoxelizationConfig) -> Result<VoxelGrid> {
    config.validate()?;
    if stream.width() != config.width || stream.height() != config.height {
        return Err(Error::ShapeMismatch {
            context: "voxelize",
            expected: vec![usize::from(config.height), usize::from(config.width)],
            actual: vec![usize::from(stream.height()), usize::from(stream.width())],
        });
    }
    let mut grid = VoxelGrid::zeros(config);
    let (h, w) = (grid.height, grid.width);
    let span = (config.t_end - config.t_start) as f64;
    let last_bin = (config.num_bins - 1) as f64;
    for e in stream.events() {
        if e.t < config.t_start || e.t >= config.t_end {
            return Err(Error::EventOutsideWindow {
                t: e.t,
                start: config.t_start,
                end: config.t_end,
            });
        }
        let t_norm = last_bin * (e.t - config.t_start) as f64 / span;
        let lower = t_norm.floor();
        let pixel = usize::from(e.y) * w + usize::from(e.x);
        let p = e.p.as_f64();
        for bin in [lower, lower + 1.0] {
            if bin > last_bin {
                continue;
            }
            let weight = (1.0 - (bin - t_norm).abs()).max(0.0);
            if weight > 0.0 {
                grid.data[bin as usize * h * w + pixel] += p * weight;
            }
        }
    }
    Ok(grid)
}

/// Splits `[t_start, t_end)` into `steps` consecutive sub-windows and
/// voxelizes each one independently. Events outside the window are dropped.
pub fn voxel_sequence(
    stream: &EventStream,
    t_start: u64,
    t_end: u64,
    steps: usize,
    num_bins: usize,
) -> Result<Vec<VoxelGrid>> {
    if steps == 0 {
        return Err(Error::invalid("recurrent sequence needs at least one step"));
    }
    if t_end <= t_start {
        return Err(Error::invalid(format!("empty window [{t_start}, {t_end})")));
    }
    let span = t_end - t_start;
    if span < steps as u64 {
        return Err(Error::invalid("window shorter than the number of steps"));
    }
    (0..steps)
        .map(|i| {
            let a = t_start + span * i as u64 / steps as u64;
            let b = t_start + span * (i as u64 + 1) / steps as u64;
            let part = slice_window(stream, a, b)?;
            let cfg = VoxelizationConfig::new(stream.width(), stream.height(), a, b)
                .with_bins(num_bins);
            voxelize(&part, &cfg)
        })
        .collect()
}

/// Packed 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }
}

pub const FRAME_BACKGROUND: [u8; 3] = [255, 255, 255];
pub const FRAME_POSITIVE: [u8; 3] = [0, 64, 255];
pub const FRAME_NEGATIVE: [u8; 3] = [255, 32, 32];

/// Visualizes a stream as a frame: net-positive pixels blue, net-negative
/// red, everything else white.
pub fn render_frame(stream: &EventStream) -> RgbImage {
    let (w, h) = (usize::from(stream.width()), usize::from(stream.height()));
    let mut mass = vec![0i64; w * h];
    for e in stream.events() {
        mass[usize::from(e.y) * w + usize::from(e.x)] += i64::from(e.p.sign());
    }
    let pixels = mass
        .iter()
        .map(|&m| match m.signum() {
            1 => FRAME_POSITIVE,
            -1 => FRAME_NEGATIVE,
            _ => FRAME_BACKGROUND,
        })
        .collect();
    RgbImage {
        width: w,
        height: h,
        pixels,
    }
}
