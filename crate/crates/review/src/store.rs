//! Dataset loading, the append-only decision log and curated export.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use mapanno_core::annotate::{
    format_label_line, make_box, read_audit, read_labels, write_audit, AnnotationParams, AuditRecord, Manifest,
    NormBox, AUDIT_DIR, LABELS_DIR, MANIFEST_FILE, POLE_BASE_CLASS_INDEX,
};
use mapanno_core::frames::Pixel;
use serde::{Deserialize, Serialize};

pub const LOG_FILE: &str = "review_log.jsonl";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mapanno_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReviewError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ReviewError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ReviewError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<NormBox>,
    pub audit: Vec<AuditRecord>,
}

/// An exported annotation dataset (manifest, label and audit files).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub images_dir: Option<PathBuf>,
    pub manifest: Manifest,
    frames: Vec<FrameData>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn open(root: &Path, images_dir: Option<&Path>) -> Result<Self> {
        let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for f in &manifest.frames {
            let boxes = read_labels(&root.join(LABELS_DIR).join(format!("{}.txt", f.image_id)))?
                .into_iter()
                .map(|(_, b)| b)
                .collect();
            let audit_path = root.join(AUDIT_DIR).join(format!("{}.jsonl", f.image_id));
            let audit = if audit_path.exists() {
                read_audit(&audit_path)?
            } else {
                Vec::new()
            };
            frames.push(FrameData {
                image_id: f.image_id.clone(),
                width: f.image_width,
                height: f.image_height,
                boxes,
                audit,
            });
        }
        frames.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let index = frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.image_id.clone(), i))
            .collect();
        Ok(Dataset {
            root: root.to_path_buf(),
            images_dir: images_dir.map(Path::to_path_buf),
            manifest,
            frames,
            index,
        })
    }

    pub fn frames(&self) -> &[FrameData] {
        &self.frames
    }

    pub fn frame(&self, image_id: &str) -> Option<&FrameData> {
        self.index.get(image_id).map(|&i| &self.frames[i])
    }

    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        let dir = self.images_dir.as_ref()?;
        self.frame(image_id)?;
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{image_id}.{ext}")))
            .find(|p| p.is_file())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Adjust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub image_id: String,
    pub annotation_index: usize,
    pub verdict: Verdict,
    /// Normalized `(cx, cy)`; required for `adjust`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted_center: Option<[f64; 2]>,
    #[serde(default)]
    pub reviewer: String,
    /// Client-side time, seconds since the epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

/// One acknowledged line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub decision: ReviewDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameState {
    /// No annotation decided yet.
    Unreviewed,
    InProgress,
    /// Every annotation has a live decision.
    Reviewed,
}

impl FrameState {
    pub fn parse(s: &str) -> Option<Option<FrameState>> {
        match s {
            "" | "all" => Some(None),
            "unreviewed" => Some(Some(FrameState::Unreviewed)),
            "in_progress" => Some(Some(FrameState::InProgress)),
            "reviewed" => Some(Some(FrameState::Reviewed)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub annotations: usize,
    pub decided: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub adjusted: usize,
    pub log_entries: u64,
}

/// Live decision per `(image_id, annotation_index)`; a pure fold over the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewState {
    live: HashMap<(String, usize), LogEntry>,
    entries: u64,
}

impl ReviewState {
    pub fn replay<'a>(entries: impl IntoIterator<Item = &'a LogEntry>) -> Self {
        let mut s = ReviewState::default();
        for e in entries {
            s.apply(e.clone());
        }
        s
    }

    pub fn apply(&mut self, entry: LogEntry) {
        self.entries += 1;
        let key = (entry.decision.image_id.clone(), entry.decision.annotation_index);
        match self.live.get(&key) {
            Some(prev) if prev.seq > entry.seq => {}
            _ => {
                self.live.insert(key, entry);
            }
        }
    }

    pub fn get(&self, image_id: &str, index: usize) -> Option<&LogEntry> {
        self.live.get(&(image_id.to_string(), index))
    }

    pub fn counters(&self, dataset: &Dataset) -> Counters {
        let mut c = Counters {
            annotations: dataset.frames.iter().map(|f| f.boxes.len()).sum(),
            log_entries: self.entries,
            ..Default::default()
        };
        for e in self.live.values() {
            c.decided += 1;
            match e.decision.verdict {
                Verdict::Accept => c.accepted += 1,
                Verdict::Reject => c.rejected += 1,
                Verdict::Adjust => c.adjusted += 1,
            }
        }
        c
    }

    fn frame_summary(&self, f: &FrameData) -> FrameSummary {
        let mut s = FrameSummary {
            image_id: f.image_id.clone(),
            annotations: f.boxes.len(),
            state: FrameState::Unreviewed,
            decided: 0,
            accepted: 0,
            rejected: 0,
            adjusted: 0,
        };
        for i in 0..f.boxes.len() {
            if let Some(e) = self.get(&f.image_id, i) {
                s.decided += 1;
                match e.decision.verdict {
                    Verdict::Accept => s.accepted += 1,
                    Verdict::Reject => s.rejected += 1,
                    Verdict::Adjust => s.adjusted += 1,
                }
            }
        }
        s.state = if s.decided == 0 {
            FrameState::Unreviewed
        } else if s.decided == s.annotations {
            FrameState::Reviewed
        } else {
            FrameState::InProgress
        };
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub image_id: String,
    pub annotations: usize,
    pub state: FrameState,
    pub decided: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub adjusted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePage {
    pub frames: Vec<FrameSummary>,
    /// Frames matching the filter.
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: NormBox,
    /// Box center in pixels.
    pub center_px: [f64; 2],
    pub audit: Option<AuditRecord>,
    pub decision: Option<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub state: FrameState,
    pub has_image: bool,
    pub annotations: Vec<AnnotationView>,
    /// Audit records of features without an annotation (occluded, out of image, ...).
    pub dropped: Vec<AuditRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Only accepted and adjusted annotations.
    pub strict: bool,
    pub box_width_px: f64,
    pub box_height_px: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            strict: false,
            box_width_px: 200.0,
            box_height_px: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExportProvenance {
    pub strict: bool,
    pub log_entries: u64,
    pub accepted: usize,
    pub rejected: usize,
    pub adjusted: usize,
    pub unreviewed_kept: usize,
    pub unreviewed_dropped: usize,
}

struct LogWriter {
    file: File,
    next_seq: u64,
}

/// Dataset plus decision log. Reads take a shared lock; each decision is
/// appended and synced to disk under the writer lock before it is applied.
pub struct ReviewStore {
    dataset: Dataset,
    log_path: PathBuf,
    state: RwLock<ReviewState>,
    writer: Mutex<LogWriter>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| ReviewError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| ReviewError::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) => out.push(e),
            // a torn final line was never acknowledged
            Err(e) if i + 1 == lines.len() => tracing::warn!(line = i + 1, error = %e, "ignoring torn log tail"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

impl ReviewStore {
    /// Opens the store, replaying `log_path` (default: the log beside the dataset).
    pub fn open(dataset: Dataset, log_path: Option<PathBuf>) -> Result<Self> {
        let log_path = log_path.unwrap_or_else(|| dataset.root.join(LOG_FILE));
        let entries = read_log(&log_path)?;
        let next_seq = entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        let state = ReviewState::replay(&entries);
        // drop a torn, unacknowledged tail so the next record starts on its own line
        if let Ok(text) = std::fs::read(&log_path) {
            if !text.is_empty() && text.last() != Some(&b'\n') {
                let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new()
                    .write(true)
                    .open(&log_path)
                    .map_err(|e| ReviewError::io(&log_path, e))?;
                f.set_len(keep as u64).map_err(|e| ReviewError::io(&log_path, e))?;
                f.sync_data().map_err(|e| ReviewError::io(&log_path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| ReviewError::io(&log_path, e))?;
        Ok(ReviewStore {
            dataset,
            log_path,
            state: RwLock::new(state),
            writer: Mutex::new(LogWriter { file, next_seq }),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn state(&self) -> ReviewState {
        self.state.read().expect("state lock").clone()
    }

    fn validate(&self, d: &ReviewDecision) -> Result<()> {
        let frame = self
            .dataset
            .frame(&d.image_id)
            .ok_or_else(|| ReviewError::NotFound(format!("frame {}", d.image_id)))?;
        if d.annotation_index >= frame.boxes.len() {
            return Err(ReviewError::NotFound(format!(
                "annotation {} of frame {}",
                d.annotation_index, d.image_id
            )));
        }
        match (d.verdict, d.adjusted_center) {
            (Verdict::Adjust, None) => Err(ReviewError::Validation("adjust needs adjusted_center".into())),
            (Verdict::Adjust, Some([x, y])) if !((0.0..1.0).contains(&x) && (0.0..1.0).contains(&y)) => Err(
                ReviewError::Validation(format!("adjusted center ({x}, {y}) is outside the image")),
            ),
            (Verdict::Accept | Verdict::Reject, Some(_)) => Err(ReviewError::Validation(
                "adjusted_center is only valid with adjust".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Validates, appends and syncs the decision, then applies it.
    pub fn post(&self, decision: ReviewDecision) -> Result<LogEntry> {
        self.validate(&decision)?;
        let mut w = self.writer.lock().expect("writer lock");
        let entry = LogEntry {
            seq: w.next_seq,
            decision,
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        w.file
            .write_all(&line)
            .map_err(|e| ReviewError::io(&self.log_path, e))?;
        w.file.sync_data().map_err(|e| ReviewError::io(&self.log_path, e))?;
        w.next_seq += 1;
        self.state.write().expect("state lock").apply(entry.clone());
        Ok(entry)
    }

    pub fn list_frames(&self, filter: Option<FrameState>, page: usize, page_size: usize) -> FramePage {
        let state = self.state.read().expect("state lock");
        let matching: Vec<FrameSummary> = self
            .dataset
            .frames
            .iter()
            .map(|f| state.frame_summary(f))
            .filter(|s| filter.is_none_or(|want| s.state == want))
            .collect();
        let total = matching.len();
        let page_size = page_size.max(1);
        FramePage {
            frames: matching.into_iter().skip(page * page_size).take(page_size).collect(),
            total,
            page,
            page_size,
            counters: state.counters(&self.dataset),
        }
    }

    pub fn frame_view(&self, image_id: &str) -> Result<FrameView> {
        let f = self
            .dataset
            .frame(image_id)
            .ok_or_else(|| ReviewError::NotFound(format!("frame {image_id}")))?;
        let state = self.state.read().expect("state lock");
        let annotations = f
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| AnnotationView {
                index: i,
                bbox: *b,
                center_px: [b.cx * f64::from(f.width), b.cy * f64::from(f.height)],
                audit: f.audit.iter().find(|r| r.annotation_index == Some(i)).cloned(),
                decision: state.get(image_id, i).cloned(),
            })
            .collect();
        Ok(FrameView {
            image_id: f.image_id.clone(),
            width: f.width,
            height: f.height,
            state: state.frame_summary(f).state,
            has_image: self.dataset.image_path(image_id).is_some(),
            annotations,
            dropped: f
                .audit
                .iter()
                .filter(|r| r.annotation_index.is_none())
                .cloned()
                .collect(),
        })
    }

    /// Writes the curated dataset: rejected annotations dropped, adjusted ones
    /// re-boxed around their new center, unreviewed ones kept unless strict.
    pub fn export(&self, out_dir: &Path, opts: &ExportOptions) -> Result<Manifest> {
        let state = self.state();
        let mut params = AnnotationParams::new(1.0);
        params.box_width_px = opts.box_width_px;
        params.box_height_px = opts.box_height_px;
        params.validate()?;
        let labels_dir = out_dir.join(LABELS_DIR);
        let audit_dir = out_dir.join(AUDIT_DIR);
        for d in [&labels_dir, &audit_dir] {
            std::fs::create_dir_all(d).map_err(|e| ReviewError::io(d, e))?;
        }
        let mut manifest = self.dataset.manifest.clone();
        manifest.annotations = 0;
        let mut prov = ExportProvenance {
            strict: opts.strict,
            log_entries: state.entries,
            ..Default::default()
        };
        let mut per_frame: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &self.dataset.frames {
            let mut text = String::new();
            for (i, b) in f.boxes.iter().enumerate() {
                let out = match state.get(&f.image_id, i).map(|e| &e.decision) {
                    None if opts.strict => {
                        prov.unreviewed_dropped += 1;
                        None
                    }
                    None => {
                        prov.unreviewed_kept += 1;
                        Some(*b)
                    }
                    Some(d) => match d.verdict {
                        Verdict::Accept => {
                            prov.accepted += 1;
                            Some(*b)
                        }
                        Verdict::Reject => {
                            prov.rejected += 1;
                            None
                        }
                        Verdict::Adjust => {
                            prov.adjusted += 1;
                            let [x, y] = d.adjusted_center.expect("validated on post");
                            let px = Pixel::new(x * f64::from(f.width), y * f64::from(f.height), 0.0);
                            Some(make_box(&px, &params, f.width, f.height)?)
                        }
                    },
                };
                if let Some(b) = out {
                    text.push_str(&format_label_line(POLE_BASE_CLASS_INDEX, &b));
                    text.push('\n');
                    *per_frame.entry(&f.image_id).or_insert(0) += 1;
                }
            }
            let path = labels_dir.join(format!("{}.txt", f.image_id));
            std::fs::write(&path, text).map_err(|e| ReviewError::io(&path, e))?;
            write_audit(&audit_dir.join(format!("{}.jsonl", f.image_id)), &f.audit)?;
        }
        for mf in &mut manifest.frames {
            mf.annotations = per_frame.get(mf.image_id.as_str()).copied().unwrap_or(0);
            manifest.annotations += mf.annotations;
        }
        manifest.review = Some(serde_json::to_value(prov)?);
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| ReviewError::io(&path, e))?;
        Ok(manifest)
    }
}
