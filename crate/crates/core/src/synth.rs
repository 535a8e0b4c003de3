//! Synthetic event scenes: moving shapes rendered to log intensity, a
//! threshold-crossing event generator, dense ground truth, sampled point
//! labels and label corruption.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::labels::{LabelMode, PointLabel, PointLabelSet};
use crate::math;

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disk { radius: f64 },
    Rectangle { width: f64, height: f64 },
    /// Thin rotated rectangle; `angle` in radians from the x axis.
    Bar { length: f64, thickness: f64, angle: f64 },
}

/// Sinusoidal stripes that move with the object, so its interior fires
/// events while it moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Relative modulation depth in `[0, 1)`.
    pub amplitude: f64,
    /// Stripe period in pixels.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u8,
    pub shape: Shape,
    pub intensity: f64,
    /// Center at t = 0, in pixels.
    pub start: [f64; 2],
    /// Pixels per second.
    pub velocity: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<Texture>,
}

impl SceneObject {
    pub fn center_at(&self, t_us: u64) -> [f64; 2] {
        let s = t_us as f64 * 1e-6;
        [
            self.start[0] + self.velocity[0] * s,
            self.start[1] + self.velocity[1] * s,
        ]
    }

    /// Whether the point `(px, py)` lies inside the object centered at `c`.
    /// Also returns the coordinate along the object's stripe axis.
    fn local(&self, c: [f64; 2], px: f64, py: f64) -> Option<f64> {
        let (dx, dy) = (px - c[0], py - c[1]);
        match self.shape {
            Shape::Disk { radius } => (dx * dx + dy * dy <= radius * radius).then_some(dx),
            Shape::Rectangle { width, height } => {
                (dx.abs() <= 0.5 * width && dy.abs() <= 0.5 * height).then_some(dx)
            }
            Shape::Bar {
                length,
                thickness,
                angle,
            } => {
                let (s, co) = (libm::sin(angle), libm::cos(angle));
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                (u.abs() <= 0.5 * length && v.abs() <= 0.5 * thickness).then_some(u)
            }
        }
    }

    fn shade(&self, along: f64) -> f64 {
        match self.texture {
            Some(tex) => self.intensity * (1.0 + tex.amplitude * libm::sin(2.0 * PI * along / tex.period)),
            None => self.intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub background: f64,
    pub objects: Vec<SceneObject>,
    pub duration_us: u64,
    /// Total number of classes including background class 0.
    pub class_count: u8,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene canvas must be non-empty"));
        }
        if !(self.background > 0.0 && self.background.is_finite()) {
            return Err(Error::invalid("background intensity must be positive"));
        }
        if self.duration_us == 0 {
            return Err(Error::invalid("scene duration must be positive"));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class_id == 0 || obj.class_id >= self.class_count {
                return Err(Error::invalid(format!(
                    "object {i} has class {} outside 1..{}",
                    obj.class_id,
                    self.class_count - 1
                )));
            }
            let darkest = match obj.texture {
                Some(t) => obj.intensity * (1.0 - t.amplitude.abs()),
                None => obj.intensity,
            };
            if !(darkest > 0.0 && obj.intensity.is_finite()) {
                return Err(Error::invalid(format!(
                    "object {i} has non-positive intensity"
                )));
            }
        }
        Ok(())
    }

    /// Log intensity of every pixel at time `t_us`, sampled at pixel centers.
    /// Later objects occlude earlier ones.
    pub fn log_intensity(&self, t_us: u64) -> Vec<f64> {
        let (w, h) = (usize::from(self.width), usize::from(self.height));
        let mut out = vec![math::ln(self.background); w * h];
        for obj in &self.objects {
            let c = obj.center_at(t_us);
            for_each_covered(obj, c, w, h, |idx, along| out[idx] = math::ln(obj.shade(along)));
        }
        out
    }
}

/// Visits pixels whose centers fall inside `obj`, restricted to its bounding box.
fn for_each_covered(obj: &SceneObject, c: [f64; 2], w: usize, h: usize, mut f: impl FnMut(usize, f64)) {
    let reach = match obj.shape {
        Shape::Disk { radius } => radius,
        Shape::Rectangle { width, height } => 0.5 * libm::hypot(width, height),
        Shape::Bar {
            length, thickness, ..
        } => 0.5 * libm::hypot(length, thickness),
    };
    let x0 = libm::floor(c[0] - reach - 1.0).max(0.0) as usize;
    let y0 = libm::floor(c[1] - reach - 1.0).max(0.0) as usize;
    let x1 = (libm::ceil(c[0] + reach + 1.0).max(0.0) as usize).min(w);
    let y1 = (libm::ceil(c[1] + reach + 1.0).max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some(along) = obj.local(c, x as f64 + 0.5, y as f64 + 0.5) {
                f(y * w + x, along);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Log-intensity change that triggers one event.
    pub contrast_threshold: f64,
    pub frame_rate: f64,
    /// Seeds the per-pixel reference jitter; irrelevant when the jitter is 0.
    pub seed: u64,
    /// Initial reference levels are offset by a uniform draw in
    /// `[-jitter, jitter] * threshold`. Zero gives the noise-free model.
    #[serde(default)]
    pub reference_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.2,
            frame_rate: 500.0,
            seed: 0,
            reference_jitter: 0.0,
        }
    }
}

impl SimConfig {
    fn frame_times(&self, duration_us: u64) -> Result<Vec<u64>> {
        if !(self.contrast_threshold > 0.0) {
            return Err(Error::invalid("contrast threshold must be positive"));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        let frames = libm::floor(duration_us as f64 * 1e-6 * self.frame_rate) as u64 + 1;
        if frames < 2 {
            return Err(Error::invalid("frame rate yields fewer than two frames"));
        }
        Ok((0..frames)
            .map(|i| (libm::round(i as f64 * 1e6 / self.frame_rate) as u64).min(duration_us))
            .collect())
    }
}

/// Threshold-crossing event generation. Each pixel keeps a reference log
/// level; whenever the rendered level moves `n >= 1` thresholds away from it,
/// `n` events are emitted with timestamps interpolated along the linear path
/// between the two frames, and the reference moves by `n` thresholds.
pub fn simulate_events(scene: &SceneSpec, config: &SimConfig) -> Result<EventStream> {
    scene.validate()?;
    let times = config.frame_times(scene.duration_us)?;
    let theta = config.contrast_threshold;
    let (w, h) = (usize::from(scene.width), usize::from(scene.height));

    let mut prev = scene.log_intensity(times[0]);
    let mut reference = prev.clone();
    if config.reference_jitter != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for r in &mut reference {
            *r += config.reference_jitter * theta * rng.random_range(-1.0..=1.0);
        }
    }

    let mut events = Vec::new();
    for pair in times.windows(2) {
        let (t0, t1) = (pair[0], pair[1]);
        let next = scene.log_intensity(t1);
        for idx in 0..w * h {
            let delta = next[idx] - reference[idx];
            let n = libm::floor(delta.abs() / theta);
            if n < 1.0 {
                continue;
            }
            let sign = delta.signum();
            let p = if sign > 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let path = next[idx] - prev[idx];
            for j in 1..=n as u64 {
                let level = reference[idx] + sign * j as f64 * theta;
                let frac = if path.abs() > 0.0 {
                    ((level - prev[idx]) / path).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let t = t0 + libm::round(frac * (t1 - t0) as f64) as u64;
                events.push(Event::new((idx % w) as u16, (idx / w) as u16, t.clamp(t0, t1), p));
            }
            reference[idx] += sign * n * theta;
        }
        prev = next;
    }
    EventStream::from_unsorted(scene.width, scene.height, events)
}

/// Dense per-pixel class map; 255 marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl DenseLabelMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks that only classes `0..num_classes` or 255 appear.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.data.len() != self.width * self.height {
            return Err(Error::ShapeMismatch {
                context: "DenseLabelMap",
                expected: vec![self.height, self.width],
                actual: vec![self.data.len()],
            });
        }
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && usize::from(v) >= num_classes)
        {
            Some(v) => Err(Error::invalid(format!("illegal label value {v}"))),
            None => Ok(()),
        }
    }

    /// Pixel counts per class, ignoring 255.
    pub fn class_areas(&self) -> BTreeMap<u8, usize> {
        let mut areas = BTreeMap::new();
        for &v in self.data.iter().filter(|&&v| v != IGNORE_LABEL) {
            *areas.entry(v).or_default() += 1;
        }
        areas
    }
}

/// Rasterizes every object at `t_us` in painter's order; uncovered pixels are
/// background class 0.
pub fn dense_gt(scene: &SceneSpec, t_us: u64) -> Result<DenseLabelMap> {
    if t_us > scene.duration_us {
        return Err(Error::invalid(format!(
            "time {t_us} outside scene duration {}",
            scene.duration_us
        )));
    }
    let (w, h) = (usize::from(scene.width), usize::from(scene.height));
    let mut map = DenseLabelMap::filled(w, h, 0);
    for obj in &scene.objects {
        for_each_covered(obj, obj.center_at(t_us), w, h, |idx, _| map.data[idx] = obj.class_id);
    }
    Ok(map)
}

/// Samples up to `k` distinct pixels of every class present in `gt`.
pub fn sample_point_labels<R: Rng + ?Sized>(
    gt: &DenseLabelMap,
    k: usize,
    rng: &mut R,
) -> Result<PointLabelSet> {
    let mode = LabelMode::for_points_per_class(k)
        .ok_or_else(|| Error::invalid(format!("points per class must be in 1..=10, got {k}")))?;
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (idx, &v) in gt.data.iter().enumerate() {
        if v != IGNORE_LABEL {
            by_class.entry(v).or_default().push(idx);
        }
    }
    let mut points = Vec::new();
    for (class, pixels) in by_class {
        let take = k.min(pixels.len());
        for i in index::sample(rng, pixels.len(), take) {
            let idx = pixels[i];
            points.push(PointLabel {
                x: (idx % gt.width) as u16,
                y: (idx / gt.width) as u16,
                class,
            });
        }
    }
    Ok(PointLabelSet::new(mode, points))
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be in [0, 1], got {p}")))
    }
}

/// Drops each point of a confusing class independently with probability `rate`.
pub fn corrupt_drop<R: Rng + ?Sized>(
    labels: &PointLabelSet,
    confusing: &BTreeSet<u8>,
    rate: f64,
    rng: &mut R,
) -> Result<PointLabelSet> {
    check_probability(rate, "drop rate")?;
    let points = labels
        .points
        .iter()
        .copied()
        .filter(|p| !(confusing.contains(&p.class) && rng.random::<f64>() < rate))
        .collect();
    Ok(PointLabelSet::new(labels.mode, points))
}

/// With probability `p`, exchanges the classes of two distinct uniformly
/// chosen points.
pub fn corrupt_swap<R: Rng + ?Sized>(labels: &PointLabelSet, p: f64, rng: &mut R) -> Result<PointLabelSet> {
    check_probability(p, "swap probability")?;
    let mut out = labels.clone();
    let n = out.points.len();
    if n < 2 || rng.random::<f64>() >= p {
        return Ok(out);
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (ci, cj) = (out.points[i].class, out.points[j].class);
    out.points[i].class = cj;
    out.points[j].class = ci;
    Ok(out)
}

/// The `count` object classes with the smallest total ground-truth area
/// across `maps` (background excluded). Ties go to the lower class id.
pub fn smallest_area_classes<'a>(maps: impl IntoIterator<Item = &'a DenseLabelMap>, count: usize) -> BTreeSet<u8> {
    let mut totals: BTreeMap<u8, usize> = BTreeMap::new();
    for map in maps {
        for (class, area) in map.class_areas() {
            if class != 0 {
                *totals.entry(class).or_default() += area;
            }
        }
    }
    let mut ranked: Vec<(usize, u8)> = totals.into_iter().map(|(c, a)| (a, c)).collect();
    ranked.sort_unstable();
    ranked.into_iter().take(count).map(|(_, c)| c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub scene: SceneSpec,
    pub seed: u64,
    pub events: EventStream,
    pub target_time: u64,
    pub gt: DenseLabelMap,
    pub labels: PointLabelSet,
}

/// Simulates one sample and draws its point labels.
pub fn generate_sample(
    id: String,
    scene: SceneSpec,
    sim: &SimConfig,
    target_time: u64,
    points_per_class: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    let events = simulate_events(&scene, sim)?;
    let gt = dense_gt(&scene, target_time)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe_15);
    let labels = sample_point_labels(&gt, points_per_class, &mut rng)?;
    Ok(SyntheticSample {
        id,
        scene,
        seed,
        events,
        target_time,
        gt,
        labels,
    })
}

/// Geometry of the default desk-scale benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenes: usize,
    pub width: u16,
    pub height: u16,
    pub class_count: u8,
    pub duration_us: u64,
    pub frame_rate: f64,
    pub contrast_threshold: f64,
    pub target_time_us: u64,
    pub points_per_class: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Every `eval_stride`-th scene goes to the held-out split.
    pub eval_stride: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenes: 250,
            width: 64,
            height: 64,
            class_count: 6,
            duration_us: 200_000,
            frame_rate: 500.0,
            contrast_threshold: 0.2,
            target_time_us: 100_000,
            points_per_class: 1,
            min_objects: 2,
            max_objects: 4,
            eval_stride: 5,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }

    /// Every `eval_stride`-th scene is held out.
    pub fn is_eval_index(&self, index: usize) -> bool {
        index % self.eval_stride == self.eval_stride - 1
    }
}

/// Random scene with class-specific shape, contrast and texture. Every
/// object is guaranteed to cover at least one pixel at `cfg.target_time_us`.
pub fn random_scene<R: Rng + ?Sized>(cfg: &BenchmarkConfig, rng: &mut R) -> SceneSpec {
    let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let object_classes = cfg.class_count.saturating_sub(1).max(1);
    let mut objects = Vec::with_capacity(n);
    let t_target = cfg.target_time_us as f64 * 1e-6;
    for _ in 0..n {
        let class_id = rng.random_range(1..=object_classes);
        let (shape, intensity, texture) = archetype(class_id, rng);
        let speed = rng.random_range(80.0..200.0);
        let heading = rng.random_range(0.0..2.0 * PI);
        let velocity = [speed * libm::cos(heading), speed * libm::sin(heading)];
        // place the center at the target time inside the canvas, then back out the start
        let at_target = [rng.random_range(0.1 * w..0.9 * w), rng.random_range(0.1 * h..0.9 * h)];
        let start = [
            at_target[0] - velocity[0] * t_target,
            at_target[1] - velocity[1] * t_target,
        ];
        objects.push(SceneObject {
            class_id,
            shape,
            intensity,
            start,
            velocity,
            texture,
        });
    }
    SceneSpec {
        width: cfg.width,
        height: cfg.height,
        background: 1.0,
        objects,
        duration_us: cfg.duration_us,
        class_count: cfg.class_count,
    }
}

fn archetype<R: Rng + ?Sized>(class_id: u8, rng: &mut R) -> (Shape, f64, Option<Texture>) {
    match class_id {
        1 => (
            Shape::Disk {
                radius: rng.random_range(8.0..12.0),
            },
            3.0,
            Some(Texture {
                amplitude: 0.4,
                period: 6.0,
            }),
        ),
        2 => (
            Shape::Disk {
                radius: rng.random_range(3.0..5.0),
            },
            0.25,
            None,
        ),
        3 => (
            Shape::Rectangle {
                width: rng.random_range(10.0..18.0),
                height: rng.random_range(10.0..18.0),
            },
            0.4,
            Some(Texture {
                amplitude: 0.5,
                period: 4.0,
            }),
        ),
        4 => (
            Shape::Bar {
                length: rng.random_range(18.0..28.0),
                thickness: rng.random_range(3.0..5.0),
                angle: rng.random_range(0.0..PI),
            },
            2.0,
            None,
        ),
        _ => (
            Shape::Rectangle {
                width: rng.random_range(5.0..8.0),
                height: rng.random_range(5.0..8.0),
            },
            6.0,
            Some(Texture {
                amplitude: 0.3,
                period: 3.0,
            }),
        ),
    }
}

/// Train/held-out split of the synthetic benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    /// Fingerprint of the held-out scene seeds.
    pub split_hash: u64,
}

/// Generates scene `index` of the benchmark, independent of the others.
pub fn benchmark_sample(cfg: &BenchmarkConfig, index: usize) -> Result<SyntheticSample> {
    let sim = SimConfig {
        contrast_threshold: cfg.contrast_threshold,
        frame_rate: cfg.frame_rate,
        ..SimConfig::default()
    };
    let seed = cfg.scene_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(cfg, &mut rng);
    generate_sample(
        format!("scene_{index:04}"),
        scene,
        &sim,
        cfg.target_time_us,
        cfg.points_per_class,
        seed,
    )
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.eval_stride < 2 {
        return Err(Error::invalid("eval stride must be at least 2"));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut eval_seeds = Vec::new();
    for i in 0..cfg.scenes {
        let sample = benchmark_sample(cfg, i)?;
        if cfg.is_eval_index(i) {
            eval_seeds.push(cfg.scene_seed(i));
            eval.push(sample);
        } else {
            train.push(sample);
        }
    }
    let split_hash = math::fnv1a(eval_seeds.iter().flat_map(|s| s.to_le_bytes()), math::FNV_OFFSET);
    Ok(Benchmark {
        train,
        eval,
        split_hash,
    })
}
