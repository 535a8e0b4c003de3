//! Event text files, label bundles, ground-truth PNGs, class palettes and
//! sample directories.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evseg_core::event::{Event, EventStream, Polarity};
use evseg_core::labels::{LabelMode, PointLabel, PointLabelSet};
use evseg_core::synth::{DenseLabelMap, SceneSpec, SyntheticSample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVENTS_FILE: &str = "events.txt";
pub const GT_FILE: &str = "gt.png";
pub const LABELS_FILE: &str = "labels.json";
pub const META_FILE: &str = "meta.json";
pub const CLASSES_FILE: &str = "classes.json";

/// Serializes a stream as a `# width=W height=H` header followed by one
/// `t x y p` line per event, `p` being `1` or `-1`.
pub fn format_events(stream: &EventStream) -> String {
    let mut out = String::with_capacity(24 * stream.len() + 32);
    let _ = writeln!(out, "# width={} height={}", stream.width(), stream.height());
    for e in stream.events() {
        let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.sign());
    }
    out
}

pub fn parse_events(text: &str) -> std::result::Result<EventStream, String> {
    let mut lines = text.lines().enumerate();
    let (width, height) = loop {
        let Some((_, line)) = lines.next() else {
            return Err("missing `# width=W height=H` header".into());
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        break parse_header(line).ok_or_else(|| format!("bad header `{line}`"))?;
    };
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = || format!("line {}: expected `t x y p`, got `{line}`", i + 1);
        let mut f = line.split_ascii_whitespace();
        let t: u64 = f.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        let x: u16 = f.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        let y: u16 = f.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        let p = f
            .next()
            .and_then(|v| v.parse::<i8>().ok())
            .and_then(Polarity::from_sign)
            .ok_or_else(err)?;
        if f.next().is_some() {
            return Err(err());
        }
        events.push(Event::new(x, y, t, p));
    }
    EventStream::new(width, height, events).map_err(|e| e.to_string())
}

fn parse_header(line: &str) -> Option<(u16, u16)> {
    let rest = line.strip_prefix('#')?;
    let (mut w, mut h) = (None, None);
    for kv in rest.split_ascii_whitespace() {
        match kv.split_once('=')? {
            ("width", v) => w = v.parse().ok(),
            ("height", v) => h = v.parse().ok(),
            _ => {}
        }
    }
    Some((w?, h?))
}

/// Sensor size from the header line, without reading the events.
pub fn read_event_header(path: &Path) -> Result<(u16, u16)> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if !line.is_empty() {
            return parse_header(line).ok_or_else(|| Error::format(path, format!("bad header `{line}`")));
        }
    }
    Err(Error::format(path, "missing `# width=W height=H` header"))
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text).map_err(|m| Error::format(path, m))
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    write_bytes(path, format_events(stream).as_bytes())
}

/// One frame's clicks. `timestamp` is milliseconds since the Unix epoch and
/// `note` is free text; both are optional so bundles written by hand load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub frame_id: String,
    pub mode: LabelMode,
    pub points: Vec<PointLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl LabelRecord {
    pub fn from_set(frame_id: &str, set: &PointLabelSet) -> Self {
        Self {
            frame_id: frame_id.into(),
            mode: set.mode,
            points: set.points.clone(),
            note: None,
            timestamp: None,
        }
    }

    pub fn to_set(&self) -> PointLabelSet {
        PointLabelSet::new(self.mode, self.points.clone())
    }
}

/// `labels.json`: `{"frames": [{"frame_id", "mode", "points": [{"x", "y", "class_id"}]}]}`.
/// Points are 0-based pixel coordinates, `x` the column and `y` the row.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBundle {
    pub frames: Vec<LabelRecord>,
}

impl LabelBundle {
    pub fn get(&self, frame_id: &str) -> Option<&LabelRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }
}

/// Restricts `samples` to the frames in `bundle` and replaces their point
/// labels. Every frame must name a sample and re-validate against it.
pub fn apply_bundle(samples: Vec<SyntheticSample>, bundle: &LabelBundle, classes: usize) -> Result<Vec<SyntheticSample>> {
    let mut by_id: std::collections::BTreeMap<String, SyntheticSample> =
        samples.into_iter().map(|s| (s.id.clone(), s)).collect();
    let mut out = Vec::with_capacity(bundle.frames.len());
    for frame in &bundle.frames {
        let mut s = by_id
            .remove(&frame.frame_id)
            .ok_or_else(|| Error::format(LABELS_FILE, format!("frame `{}` is not in the dataset (or repeats)", frame.frame_id)))?;
        let set = frame.to_set();
        set.validate(s.events.width(), s.events.height(), classes)?;
        s.labels = set;
        out.push(s);
    }
    Ok(out)
}

/// `meta.json` of a sample directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub target_time_us: u64,
    pub seed: u64,
    pub scene: SceneSpec,
}

pub fn write_label_png(path: &Path, map: &DenseLabelMap) -> Result<()> {
    let (w, h) = (map.width as u32, map.height as u32);
    let img = image::GrayImage::from_raw(w, h, map.data.clone()).ok_or_else(|| Error::format(path, "label map size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

pub fn read_label_png(path: &Path) -> Result<DenseLabelMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => return Err(Error::format(path, "expected an 8-bit single-channel PNG")),
    };
    Ok(DenseLabelMap {
        width: gray.width() as usize,
        height: gray.height() as usize,
        data: gray.into_raw(),
    })
}

pub fn encode_rgb_png(width: usize, height: usize, rgb: Vec<u8>) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb).ok_or_else(|| Error::format("<frame>", "pixel buffer size mismatch"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format("<frame>", e))?;
    Ok(out.into_inner())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    /// `#rrggbb`.
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub classes: Vec<ClassInfo>,
}

impl Palette {
    fn from_table(table: &[(&str, [u8; 3])]) -> Self {
        let classes = table
            .iter()
            .enumerate()
            .map(|(i, (name, c))| ClassInfo {
                id: i as u8,
                name: (*name).into(),
                color: format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
            })
            .collect();
        Self { classes }
    }

    /// The 11-class driving-scene palette.
    pub fn driving() -> Self {
        Self::from_table(&[
            ("Sky", [70, 130, 180]),
            ("Building", [70, 70, 70]),
            ("Fence", [190, 153, 153]),
            ("Person", [220, 20, 60]),
            ("Pole", [153, 153, 153]),
            ("Road", [128, 64, 128]),
            ("Sidewalk", [244, 35, 232]),
            ("Vegetation", [107, 142, 35]),
            ("Car", [0, 0, 142]),
            ("Wall", [102, 102, 156]),
            ("Traffic-sign", [220, 220, 0]),
        ])
    }

    /// Names for the simulator's object archetypes; extra classes get
    /// generic names.
    pub fn synthetic(classes: usize) -> Self {
        let table = [
            ("Background", [0, 0, 0]),
            ("Large disk", [230, 25, 75]),
            ("Small disk", [60, 180, 75]),
            ("Striped box", [255, 225, 25]),
            ("Bar", [0, 130, 200]),
            ("Plain box", [245, 130, 48]),
        ];
        let mut p = Self::from_table(&table[..classes.min(table.len())]);
        for id in table.len()..classes {
            let v = (id * 37 % 200 + 40) as u8;
            p.classes.push(ClassInfo {
                id: id as u8,
                name: format!("Class {id}"),
                color: format!("#{v:02x}{:02x}{:02x}", 255 - v, v / 2),
            });
        }
        p
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, c) in self.classes.iter().enumerate() {
            if usize::from(c.id) != i {
                return Err(format!("class ids must be 0..{} in order, found {} at position {i}", self.len(), c.id));
            }
            let hex = c.color.strip_prefix('#').unwrap_or("");
            if hex.len() != 6 || !hex.chars().all(|ch| ch.is_ascii_hexdigit()) {
                return Err(format!("class {}: color `{}` is not #rrggbb", c.id, c.color));
            }
        }
        Ok(())
    }
}

/// `DIR/classes.json` when present, the driving palette otherwise.
pub fn read_palette(dir: &Path) -> Result<Palette> {
    let path = dir.join(CLASSES_FILE);
    if !path.exists() {
        return Ok(Palette::driving());
    }
    let p: Palette = read_json(&path)?;
    p.validate().map_err(|m| Error::format(&path, m))?;
    Ok(p)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Replaces `path` through a temporary file in the same directory, so
/// readers see either the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_sample(dir: &Path, sample: &SyntheticSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_events(&dir.join(EVENTS_FILE), &sample.events)?;
    write_label_png(&dir.join(GT_FILE), &sample.gt)?;
    let bundle = LabelBundle {
        frames: vec![LabelRecord::from_set(&sample.id, &sample.labels)],
    };
    write_json(&dir.join(LABELS_FILE), &bundle)?;
    let meta = SampleMeta {
        target_time_us: sample.target_time,
        seed: sample.seed,
        scene: sample.scene.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

/// Reads a sample directory; its id is the directory name. A missing
/// `labels.json` yields an empty label set.
pub fn read_sample(dir: &Path) -> Result<SyntheticSample> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(dir, "sample directory needs a UTF-8 name"))?
        .to_string();
    let events = read_events(&dir.join(EVENTS_FILE))?;
    let meta: SampleMeta = read_json(&dir.join(META_FILE))?;
    let gt_path = dir.join(GT_FILE);
    let gt = read_label_png(&gt_path)?;
    if (gt.width, gt.height) != (usize::from(events.width()), usize::from(events.height())) {
        return Err(Error::format(&gt_path, "size differs from the event sensor"));
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        let bundle: LabelBundle = read_json(&labels_path)?;
        match bundle.frames.as_slice() {
            [] => PointLabelSet::empty(LabelMode::OneClick),
            [one] => one.to_set(),
            _ => return Err(Error::format(&labels_path, "a sample holds one frame")),
        }
    } else {
        PointLabelSet::empty(LabelMode::OneClick)
    };
    Ok(SyntheticSample {
        id,
        scene: meta.scene,
        seed: meta.seed,
        events,
        target_time: meta.target_time_us,
        gt,
        labels,
    })
}

/// Sub-directories of `dir` holding an events file, sorted by name.
pub fn sample_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(EVENTS_FILE).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticSample>> {
    sample_dirs(dir)?.iter().map(|d| read_sample(d)).collect()
}
