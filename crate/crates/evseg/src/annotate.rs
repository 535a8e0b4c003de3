//! Point-annotation backend: a record store over a dataset directory and
//! the HTTP routes that serve it.
//!
//! Records live in `DIR/annotations/<frame_id>.json` as
//! `{"version": n, "record": LabelRecord}` and are replaced by
//! write-temp-then-rename. Routes:
//!
//! | method | path                  | body / result                              |
//! |--------|-----------------------|--------------------------------------------|
//! | GET    | `/frames`             | `[{"id", "annotated", "version"}]`         |
//! | GET    | `/frames/{id}/image`  | PNG of the forward window before the target |
//! | GET    | `/frames/{id}/labels` | stored record plus `version` (0 if none)   |
//! | PUT    | `/frames/{id}/labels` | `{"mode", "points", "note"?, "base_version"?}` |
//! | GET    | `/classes`            | palette                                    |
//! | GET    | `/export`             | every record as one `labels.json` bundle   |
//!
//! Concurrent PUTs to one frame are serialized and the last one wins; the
//! response carries the new version and `conflict: true` when the writer's
//! `base_version` was stale.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use evseg_core::event::{render_frame, slice_window};
use evseg_core::labels::{LabelMode, PointLabel, PointLabelSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, LabelBundle, LabelRecord, Palette, SampleMeta};

pub const ANNOTATIONS_DIR: &str = "annotations";

/// Points in a write where an injected fault can abort it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteStage {
    /// Half of the record is in the temporary file.
    Partial,
    /// The temporary file is complete and synced but not yet renamed.
    BeforeRename,
}

pub type FaultHook = Arc<dyn Fn(WriteStage, &Path) -> io::Result<()> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub dir: PathBuf,
    pub width: u16,
    pub height: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredRecord {
    version: u64,
    record: LabelRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStatus {
    pub id: String,
    pub annotated: bool,
    pub version: u64,
}

/// What `GET` and `PUT` return for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelResponse {
    #[serde(flatten)]
    pub record: LabelRecord,
    pub version: u64,
    #[serde(default)]
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelUpdate {
    /// Must match the URL when present.
    #[serde(default)]
    pub frame_id: Option<String>,
    pub mode: LabelMode,
    pub points: Vec<PointLabel>,
    #[serde(default)]
    pub note: Option<String>,
    /// Version the client last saw.
    #[serde(default)]
    pub base_version: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PutError {
    #[error("unknown frame `{0}`")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("validation failed: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("could not persist the record: {0}")]
    Storage(String),
}

pub struct AnnotationStore {
    dir: PathBuf,
    palette: Palette,
    frames: BTreeMap<String, Frame>,
    records: RwLock<BTreeMap<String, StoredRecord>>,
    locks: BTreeMap<String, Mutex<()>>,
    window_us: u64,
    fault: Option<FaultHook>,
}

impl AnnotationStore {
    /// Opens the store over `root`, re-validating every persisted record.
    /// A record that fails to parse or validate is reported by path.
    pub fn open(root: &Path, window_us: u64) -> Result<Self> {
        let palette = formats::read_palette(root)?;
        let mut frames = BTreeMap::new();
        for dir in formats::sample_dirs(root)? {
            let (width, height) = formats::read_event_header(&dir.join(formats::EVENTS_FILE))?;
            let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            frames.insert(
                id.clone(),
                Frame {
                    id,
                    dir,
                    width,
                    height,
                },
            );
        }
        let dir = root.join(ANNOTATIONS_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for path in entries {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            // Leftovers of interrupted writes never replaced a record.
            if name.starts_with('.') {
                continue;
            }
            let Some(stem) = name.strip_suffix(".json") else {
                continue;
            };
            let stored: StoredRecord = formats::read_json(&path)?;
            let frame = frames
                .get(stem)
                .ok_or_else(|| Error::format(&path, format!("no frame named `{stem}` in the dataset")))?;
            if stored.record.frame_id != stem {
                return Err(Error::format(&path, format!("record names frame `{}`", stored.record.frame_id)));
            }
            let violations = check_points(frame, &stored.record.to_set(), palette.len());
            if !violations.is_empty() {
                return Err(Error::format(&path, violations.join("; ")));
            }
            records.insert(stem.to_string(), stored);
        }
        let locks = frames.keys().map(|k| (k.clone(), Mutex::new(()))).collect();
        Ok(Self {
            dir,
            palette,
            frames,
            records: RwLock::new(records),
            locks,
            window_us,
            fault: None,
        })
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn record_path(&self, frame_id: &str) -> PathBuf {
        self.dir.join(format!("{frame_id}.json"))
    }

    pub fn frames(&self) -> Vec<FrameStatus> {
        let records = self.records.read().unwrap();
        self.frames
            .keys()
            .map(|id| {
                let version = records.get(id).map_or(0, |r| r.version);
                FrameStatus {
                    id: id.clone(),
                    annotated: version > 0,
                    version,
                }
            })
            .collect()
    }

    pub fn labels(&self, frame_id: &str) -> Option<LabelResponse> {
        self.frames.get(frame_id)?;
        let records = self.records.read().unwrap();
        Some(match records.get(frame_id) {
            Some(s) => LabelResponse {
                record: s.record.clone(),
                version: s.version,
                conflict: false,
            },
            None => LabelResponse {
                record: LabelRecord {
                    frame_id: frame_id.into(),
                    mode: LabelMode::OneClick,
                    points: Vec::new(),
                    note: None,
                    timestamp: None,
                },
                version: 0,
                conflict: false,
            },
        })
    }

    pub fn put(&self, frame_id: &str, update: LabelUpdate) -> std::result::Result<LabelResponse, PutError> {
        let frame = self
            .frames
            .get(frame_id)
            .ok_or_else(|| PutError::NotFound(frame_id.into()))?;
        if let Some(id) = update.frame_id.as_deref().filter(|id| *id != frame_id) {
            return Err(PutError::BadRequest(format!("body names frame `{id}` but the URL names `{frame_id}`")));
        }
        let set = PointLabelSet::new(update.mode, update.points);
        let violations = check_points(frame, &set, self.palette.len());
        if !violations.is_empty() {
            return Err(PutError::Invalid(violations));
        }
        let _guard = self.locks[frame_id].lock().unwrap();
        let current = self.records.read().unwrap().get(frame_id).map_or(0, |r| r.version);
        let stored = StoredRecord {
            version: current + 1,
            record: LabelRecord {
                frame_id: frame_id.into(),
                mode: set.mode,
                points: set.points,
                note: update.note,
                timestamp: Some(now_ms()),
            },
        };
        let mut bytes = serde_json::to_vec_pretty(&stored).expect("records serialize");
        bytes.push(b'\n');
        self.persist(&self.record_path(frame_id), &bytes)
            .map_err(|e| PutError::Storage(e.to_string()))?;
        let response = LabelResponse {
            record: stored.record.clone(),
            version: stored.version,
            conflict: update.base_version.is_some_and(|b| b != current),
        };
        self.records.write().unwrap().insert(frame_id.into(), stored);
        Ok(response)
    }

    fn persist(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        let half = bytes.len() / 2;
        tmp.write_all(&bytes[..half])?;
        if let Some(hook) = &self.fault {
            hook(WriteStage::Partial, tmp.path())?;
        }
        tmp.write_all(&bytes[half..])?;
        tmp.as_file().sync_all()?;
        if let Some(hook) = &self.fault {
            hook(WriteStage::BeforeRename, tmp.path())?;
        }
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Every stored record, ordered by frame id.
    pub fn export(&self) -> LabelBundle {
        LabelBundle {
            frames: self.records.read().unwrap().values().map(|s| s.record.clone()).collect(),
        }
    }

    /// PNG of the events in the window before the frame's target time (the
    /// whole stream when the frame has no `meta.json`).
    pub fn image(&self, frame_id: &str) -> Option<Result<Vec<u8>>> {
        let frame = self.frames.get(frame_id)?;
        Some(self.render(frame))
    }

    fn render(&self, frame: &Frame) -> Result<Vec<u8>> {
        let events = formats::read_events(&frame.dir.join(formats::EVENTS_FILE))?;
        let meta_path = frame.dir.join(formats::META_FILE);
        let shown = if meta_path.exists() {
            let meta: SampleMeta = formats::read_json(&meta_path)?;
            slice_window(&events, meta.target_time_us.saturating_sub(self.window_us), meta.target_time_us)?
        } else {
            events
        };
        let img = render_frame(&shown);
        formats::encode_rgb_png(img.width, img.height, img.to_bytes())
    }
}

fn check_points(frame: &Frame, set: &PointLabelSet, classes: usize) -> Vec<String> {
    set.violations(frame.width, frame.height, classes)
        .iter()
        .map(ToString::to_string)
        .collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<String>,
}

fn error_response(status: StatusCode, error: String, violations: Vec<String>) -> Response {
    (status, Json(ErrorBody { error, violations })).into_response()
}

fn not_found(id: &str) -> Response {
    error_response(StatusCode::NOT_FOUND, format!("unknown frame `{id}`"), Vec::new())
}

impl IntoResponse for PutError {
    fn into_response(self) -> Response {
        let msg = self.to_string();
        match self {
            PutError::NotFound(_) => error_response(StatusCode::NOT_FOUND, msg, Vec::new()),
            PutError::BadRequest(_) => error_response(StatusCode::BAD_REQUEST, msg, Vec::new()),
            PutError::Invalid(v) => error_response(StatusCode::UNPROCESSABLE_ENTITY, "validation failed".into(), v),
            PutError::Storage(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, msg, Vec::new()),
        }
    }
}

type Shared = Arc<AnnotationStore>;

async fn list_frames(State(store): State<Shared>) -> Json<Vec<FrameStatus>> {
    Json(store.frames())
}

async fn get_image(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let rendered = tokio::task::spawn_blocking({
        let id = id.clone();
        move || store.image(&id)
    })
    .await;
    match rendered {
        Ok(Some(Ok(png))) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(Some(Err(e))) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), Vec::new()),
        Ok(None) => not_found(&id),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), Vec::new()),
    }
}

async fn get_labels(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match store.labels(&id) {
        Some(r) => Json(r).into_response(),
        None => not_found(&id),
    }
}

async fn put_labels(State(store): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let update: LabelUpdate = match serde_json::from_slice(&body) {
        Ok(u) => u,
        Err(e) => return PutError::BadRequest(format!("malformed body: {e}")).into_response(),
    };
    match tokio::task::spawn_blocking(move || store.put(&id, update)).await {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), Vec::new()),
    }
}

async fn get_classes(State(store): State<Shared>) -> Json<Palette> {
    Json(store.palette().clone())
}

async fn export(State(store): State<Shared>) -> Json<LabelBundle> {
    Json(store.export())
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/frames", get(list_frames))
        .route("/frames/{id}/image", get(get_image))
        .route("/frames/{id}/labels", get(get_labels).put(put_labels))
        .route("/classes", get(get_classes))
        .route("/export", get(export))
        .with_state(store)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(store: Shared, listener: tokio::net::TcpListener) -> io::Result<()> {
    axum::serve(listener, router(store)).await
}
