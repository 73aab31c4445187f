//! Loaders for every on-disk input: frame directories, SRT subtitles, cast
//! lists, ground-truth ADs, the clip manifest, and the detection/embedding
//! interchange file. Everything is validated here so downstream stages can
//! trust the records they receive.

use crate::frame::{FrameBuffer, FrameError};
use crate::tracker::BoundingBox;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

/// Length of every face embedding in the interchange format.
pub const EMBEDDING_DIM: usize = 512;

const FRAME_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("frame directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("no frames in {0}")]
    NoFrames(PathBuf),
    #[error("mixed dimensions: {path} is {got:?}, expected {expected:?}")]
    MixedDimensions { path: PathBuf, expected: (u32, u32), got: (u32, u32) },
    #[error("cannot decode {path}: {source}")]
    Image { path: PathBuf, source: FrameError },
    #[error("frame indices in {dir} are not contiguous from 0 (missing {missing})")]
    NonContiguous { dir: PathBuf, missing: usize },
    #[error("duplicate frame index {index} in {dir}")]
    DuplicateFrame { dir: PathBuf, index: usize },
    #[error("srt line {line}: {msg}")]
    Srt { line: usize, msg: String },
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("duplicate cast_id {0}")]
    DuplicateCastId(String),
    #[error("{path}:{line}: face embedding has {got} values, expected {EMBEDDING_DIM}")]
    EmbeddingLength { path: PathBuf, line: usize, got: usize },
    #[error("{path}:{line}: unknown clip_id {clip_id}")]
    UnknownClip { path: PathBuf, line: usize, clip_id: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

fn record_err(path: &Path, line: usize, msg: impl Into<String>) -> IngestError {
    IngestError::Record { path: path.to_path_buf(), line, msg: msg.into() }
}

// ---------------------------------------------------------------------------
// Domain records

/// One clip of a movie: the unit of AD generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovieClip {
    pub clip_id: String,
    pub movie_id: String,
    /// Title shown to the model; falls back to `movie_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub movie_title: Option<String>,
    pub start_s: f64,
    pub end_s: f64,
    pub fps: f64,
    /// Relative to the frames root unless absolute. Defaults to `clip_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_dir: Option<PathBuf>,
}

impl MovieClip {
    pub fn title(&self) -> &str {
        self.movie_title.as_deref().unwrap_or(&self.movie_id)
    }

    pub fn resolve_frame_dir(&self, frames_root: &Path) -> PathBuf {
        match &self.frame_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => frames_root.join(p),
            None => frames_root.join(&self.clip_id),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.clip_id.trim().is_empty() {
            return Err("empty clip_id".into());
        }
        if !(self.end_s > self.start_s) {
            return Err(format!("clip {}: end_s must exceed start_s", self.clip_id));
        }
        if !(self.fps > 0.0) {
            return Err(format!("clip {}: fps must be positive", self.clip_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtitle {
    pub index: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastMember {
    pub cast_id: String,
    pub actor_name: String,
    pub character_name: String,
    pub profile_image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_idx: u32,
    pub person_box: BoundingBox,
    pub confidence: f32,
    pub face_box: Option<BoundingBox>,
    pub face_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAD {
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub word_count: usize,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

// ---------------------------------------------------------------------------
// Frames

/// A scanned frame directory. Frames are decoded lazily so callers that only
/// need a handful of sampled frames do not pay for the rest.
#[derive(Debug, Clone)]
pub struct FrameDir {
    dir: PathBuf,
    paths: Vec<PathBuf>,
}

impl FrameDir {
    pub fn scan(dir: &Path) -> Result<Self, IngestError> {
        if !dir.is_dir() {
            return Err(IngestError::MissingDir(dir.to_path_buf()));
        }
        let mut indexed = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            let is_frame = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !is_frame {
                continue;
            }
            let Some(index) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            indexed.push((index, path));
        }
        if indexed.is_empty() {
            return Err(IngestError::NoFrames(dir.to_path_buf()));
        }
        indexed.sort();
        for (pos, (index, _)) in indexed.iter().enumerate() {
            if *index < pos {
                return Err(IngestError::DuplicateFrame { dir: dir.to_path_buf(), index: *index });
            }
            if *index > pos {
                return Err(IngestError::NonContiguous { dir: dir.to_path_buf(), missing: pos });
            }
        }
        Ok(Self { dir: dir.to_path_buf(), paths: indexed.into_iter().map(|(_, p)| p).collect() })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self, index: usize) -> Result<FrameBuffer, IngestError> {
        let path = &self.paths[index];
        FrameBuffer::open(path).map_err(|source| IngestError::Image { path: path.clone(), source })
    }

    /// Loads the listed frames, checking they all share one size.
    pub fn load_many(&self, indices: &[usize]) -> Result<Vec<FrameBuffer>, IngestError> {
        let mut frames: Vec<FrameBuffer> = Vec::with_capacity(indices.len());
        for &i in indices {
            let frame = self.load(i)?;
            if let Some(first) = frames.first() {
                let expected = (first.width(), first.height());
                let got = (frame.width(), frame.height());
                if expected != got {
                    return Err(IngestError::MixedDimensions { path: self.paths[i].clone(), expected, got });
                }
            }
            frames.push(frame);
        }
        Ok(frames)
    }

    pub fn load_all(&self) -> Result<Vec<FrameBuffer>, IngestError> {
        self.load_many(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Loads every frame of a directory in ascending index order.
pub fn load_frames(frame_dir: &Path) -> Result<Vec<FrameBuffer>, IngestError> {
    FrameDir::scan(frame_dir)?.load_all()
}

// ---------------------------------------------------------------------------
// SRT

fn parse_srt_time(s: &str) -> Option<u64> {
    let (hms, ms) = s.trim().split_once(',')?;
    let mut parts = hms.split(':');
    let h: u64 = parts.next()?.parse().ok()?;
    let m: u64 = parts.next()?.parse().ok()?;
    let sec: u64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || m >= 60 || sec >= 60 || ms.len() != 3 {
        return None;
    }
    let ms: u64 = ms.parse().ok()?;
    Some(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

fn parse_timing_line(line: &str) -> Option<(u64, u64)> {
    let (a, b) = line.split_once("-->")?;
    // Anything after the end stamp (position hints) is ignored.
    let b = b.split_whitespace().next()?;
    Some((parse_srt_time(a)?, parse_srt_time(b)?))
}

/// Parses SRT text. Cues are returned sorted by start time; multi-line bodies
/// are joined with single spaces; cues whose body is blank are dropped.
pub fn parse_srt(text: &str) -> Result<Vec<Subtitle>, IngestError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let mut subs = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let index: u32 = lines[i]
            .trim()
            .parse()
            .map_err(|_| IngestError::Srt { line: i + 1, msg: format!("expected cue index, got {:?}", lines[i]) })?;
        i += 1;
        let timing = lines.get(i).copied().unwrap_or("");
        let (start_ms, end_ms) = parse_timing_line(timing)
            .ok_or_else(|| IngestError::Srt { line: i + 1, msg: format!("malformed timestamp line {timing:?}") })?;
        if end_ms < start_ms {
            return Err(IngestError::Srt { line: i + 1, msg: "cue ends before it starts".into() });
        }
        i += 1;
        let mut body = Vec::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            body.push(lines[i].trim());
            i += 1;
        }
        let text = body.join(" ");
        if text.is_empty() {
            tracing::warn!(index, "dropping empty subtitle cue");
            continue;
        }
        subs.push(Subtitle { index, start_s: start_ms as f64 / 1000.0, end_s: end_ms as f64 / 1000.0, text });
    }
    subs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.index.cmp(&b.index)));
    Ok(subs)
}

fn format_srt_time(seconds: f64) -> String {
    let total = (seconds * 1000.0).round() as u64;
    let (ms, s) = (total % 1000, total / 1000);
    format!("{:02}:{:02}:{:02},{:03}", s / 3600, (s / 60) % 60, s % 60, ms)
}

/// Serializes subtitles back to SRT text.
pub fn format_srt(subs: &[Subtitle]) -> String {
    let mut out = String::new();
    for s in subs {
        out.push_str(&format!(
            "{}\n{} --> {}\n{}\n\n",
            s.index,
            format_srt_time(s.start_s),
            format_srt_time(s.end_s),
            s.text
        ));
    }
    out
}

pub fn load_srt(path: &Path) -> Result<Vec<Subtitle>, IngestError> {
    parse_srt(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Cast, ground truth, clips

pub fn load_cast(path: &Path) -> Result<Vec<CastMember>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let cast: Vec<CastMember> =
        serde_json::from_str(&text).map_err(|e| record_err(path, e.line(), e.to_string()))?;
    let mut seen = HashSet::new();
    for (i, member) in cast.iter().enumerate() {
        if !seen.insert(member.cast_id.as_str()) {
            return Err(IngestError::DuplicateCastId(member.cast_id.clone()));
        }
        if member.character_name.trim().is_empty() {
            return Err(record_err(path, i + 1, format!("cast {} has an empty character_name", member.cast_id)));
        }
    }
    Ok(cast)
}

/// Iterates non-blank JSON-lines, yielding `(1-based line number, value)`.
fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    mut f: impl FnMut(usize, T) -> Result<(), IngestError>,
) -> Result<(), IngestError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| record_err(path, i + 1, e.to_string()))?;
        f(i + 1, value)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawGroundTruth {
    clip_id: String,
    start_s: f64,
    end_s: f64,
    text: String,
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthAD>, IngestError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    read_jsonl(path, |line, raw: RawGroundTruth| {
        if raw.end_s < raw.start_s {
            return Err(record_err(path, line, "end_s before start_s"));
        }
        if !seen.insert(raw.clip_id.clone()) {
            return Err(record_err(path, line, format!("duplicate ground truth for clip {}", raw.clip_id)));
        }
        let word_count = word_count(&raw.text);
        out.push(GroundTruthAD {
            clip_id: raw.clip_id,
            start_s: raw.start_s,
            end_s: raw.end_s,
            text: raw.text,
            word_count,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Loads the clip manifest (JSON-lines of [`MovieClip`]).
pub fn load_clips(path: &Path) -> Result<Vec<MovieClip>, IngestError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    read_jsonl(path, |line, clip: MovieClip| {
        clip.validate().map_err(|m| record_err(path, line, m))?;
        if !seen.insert(clip.clip_id.clone()) {
            return Err(record_err(path, line, format!("duplicate clip_id {}", clip.clip_id)));
        }
        out.push(clip);
        Ok(())
    })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detections

#[derive(Deserialize)]
struct RawDetection {
    clip_id: String,
    frame_idx: u32,
    person_box: [f32; 4],
    confidence: f32,
    #[serde(default)]
    face_box: Option<[f32; 4]>,
    #[serde(default)]
    face_embedding: Option<Vec<f32>>,
}

fn parse_box(path: &Path, line: usize, raw: [f32; 4], what: &str) -> Result<BoundingBox, IngestError> {
    BoundingBox::new(raw[0], raw[1], raw[2], raw[3])
        .ok_or_else(|| record_err(path, line, format!("degenerate {what} {raw:?}")))
}

/// Loads the detection interchange file, grouped by clip. When `known_clips`
/// is given, records for any other clip are rejected.
pub fn load_detections(
    path: &Path,
    known_clips: Option<&HashSet<String>>,
) -> Result<BTreeMap<String, Vec<DetectionRecord>>, IngestError> {
    let mut out: BTreeMap<String, Vec<DetectionRecord>> = BTreeMap::new();
    read_jsonl(path, |line, raw: RawDetection| {
        if let Some(known) = known_clips {
            if !known.contains(&raw.clip_id) {
                return Err(IngestError::UnknownClip { path: path.to_path_buf(), line, clip_id: raw.clip_id });
            }
        }
        if !(0.0..=1.0).contains(&raw.confidence) {
            return Err(record_err(path, line, format!("confidence {} outside [0, 1]", raw.confidence)));
        }
        if let Some(emb) = &raw.face_embedding {
            if emb.len() != EMBEDDING_DIM {
                return Err(IngestError::EmbeddingLength { path: path.to_path_buf(), line, got: emb.len() });
            }
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(record_err(path, line, "non-finite value in face embedding"));
            }
        }
        let record = DetectionRecord {
            frame_idx: raw.frame_idx,
            person_box: parse_box(path, line, raw.person_box, "person_box")?,
            confidence: raw.confidence,
            face_box: raw.face_box.map(|b| parse_box(path, line, b, "face_box")).transpose()?,
            face_embedding: raw.face_embedding,
        };
        out.entry(raw.clip_id).or_default().push(record);
        Ok(())
    })?;
    Ok(out)
}
