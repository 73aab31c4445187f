//! End-to-end orchestration: shots, tracks, identities, overlays, context,
//! prompts and backend calls for every clip, plus evaluation.

mod cache;
mod config;

pub use cache::Cache;
pub use config::{ExemplarScope, RunConfig, RunPaths};

use crate::annotate::{dump_annotated, render_overlays, sample_frames, AnnotateError};
use crate::backend::{build_backend, Backend, BackendError, Bounded};
use crate::context::{build_context, select_prev_ads, select_subtitle_window, PriorAd};
use crate::faceid::{assign_identities, best_cast, build_cast_gallery, load_gallery, CastGallery, FaceEmbedding, FaceIdError, RecognitionMode};
use crate::frame::FrameBuffer;
use crate::ingest::{
    load_cast, load_clips, load_detections, load_ground_truth, load_srt, CastMember, DetectionRecord, FrameDir, GroundTruthAD, IngestError,
    MovieClip, Subtitle,
};
use crate::metrics::{char_pr, evaluate_run, ner_match, EvalReport, MetricsError};
use crate::promptgen::{
    build_ad_prompt, generate_ad, generate_ad_two_stage, plan_two_stage, ADOutput, ClipPrompt, GenerationMode, PromptError, PromptTemplate,
};
use crate::shotseg::{detect_shots, load_boundaries, shots_from_boundaries, Shot, ShotError};
use crate::tracker::{track_clip, Tracklet};
use async_trait::async_trait;
use futures::StreamExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const FIRST_PASS_FILE: &str = "outputs_pass1.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IDENTITIES_FILE: &str = "identities.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    FaceId(#[from] FaceIdError),
    #[error(transparent)]
    Shot(#[from] ShotError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes()).map_err(io_err(path))
}

/// Reads a JSON-lines file of [`ADOutput`] records.
pub fn load_outputs(path: &Path) -> Result<Vec<ADOutput>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Other(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

// ---------------------------------------------------------------------------
// Inputs

/// Per-movie side data.
#[derive(Debug, Clone, Default)]
pub struct MovieData {
    pub subtitles: Vec<Subtitle>,
    pub cast: Vec<CastMember>,
    /// Profile embeddings per cast id, in gallery-file order.
    pub originals: Vec<(String, Vec<FaceEmbedding>)>,
}

impl MovieData {
    pub fn character_names(&self) -> HashMap<String, String> {
        self.cast.iter().map(|c| (c.cast_id.clone(), c.character_name.clone())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunInputs {
    pub clips: Vec<MovieClip>,
    pub detections: BTreeMap<String, Vec<DetectionRecord>>,
    pub ground_truth: BTreeMap<String, GroundTruthAD>,
    pub movies: BTreeMap<String, MovieData>,
    pub template: PromptTemplate,
}

/// `path` itself when it is a file, else `<path>/<movie_id>.<ext>` if that exists.
fn per_movie(path: Option<&Path>, movie_id: &str, ext: &str) -> Option<PathBuf> {
    let path = path?;
    if path.is_dir() {
        let p = path.join(format!("{movie_id}.{ext}"));
        if p.exists() {
            Some(p)
        } else {
            tracing::warn!(dir = %path.display(), movie = movie_id, ext, "no per-movie file");
            None
        }
    } else {
        Some(path.to_path_buf())
    }
}

impl RunInputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let p = &cfg.paths;
        let clips = load_clips(&p.clips)?;
        let known: HashSet<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
        let detections = load_detections(&p.detections, Some(&known))?;
        let ground_truth = match &p.ground_truth {
            Some(path) => load_ground_truth(path)?.into_iter().map(|g| (g.clip_id.clone(), g)).collect(),
            None => BTreeMap::new(),
        };
        let template = match &p.template {
            Some(path) => PromptTemplate::load(path)?,
            None => PromptTemplate::default(),
        };
        let movie_ids: BTreeSet<&str> = clips.iter().map(|c| c.movie_id.as_str()).collect();
        let mut movies = BTreeMap::new();
        for movie in movie_ids {
            let subtitles = match per_movie(p.subtitles.as_deref(), movie, "srt") {
                Some(path) => load_srt(&path)?,
                None => Vec::new(),
            };
            let cast = match per_movie(p.cast.as_deref(), movie, "json") {
                Some(path) => load_cast(&path)?,
                None => Vec::new(),
            };
            let mut originals = Vec::new();
            if let Some(path) = per_movie(p.gallery.as_deref(), movie, "jsonl") {
                for (id, orig, exemplars) in load_gallery(&path)? {
                    if !exemplars.is_empty() {
                        tracing::warn!(cast = %id, "gallery file exemplars ignored; exemplars are mined at run time");
                    }
                    if orig.is_empty() {
                        tracing::warn!(cast = %id, "cast member has no original embedding, skipped");
                        continue;
                    }
                    originals.push((id, orig));
                }
            }
            movies.insert(movie.to_string(), MovieData { subtitles, cast, originals });
        }
        Ok(Self { clips, detections, ground_truth, movies, template })
    }

    pub fn clip_detections(&self, clip_id: &str) -> &[DetectionRecord] {
        self.detections.get(clip_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The timestamp used for `clip` when counting preceding ADs: the ground
    /// truth AD start when known, else the clip start.
    pub fn ad_timestamp(&self, clip: &MovieClip) -> f64 {
        self.ground_truth.get(&clip.clip_id).map_or(clip.start_s, |g| g.start_s)
    }

    fn movie_ad_timestamps(&self) -> HashMap<&str, Vec<f64>> {
        let mut out: HashMap<&str, Vec<f64>> = HashMap::new();
        for c in &self.clips {
            out.entry(c.movie_id.as_str()).or_default().push(self.ad_timestamp(c));
        }
        for v in out.values_mut() {
            v.sort_by(f64::total_cmp);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Visual stage

/// A clip after tracking, before identification.
#[derive(Debug, Clone)]
pub struct TrackedClip {
    pub clip_index: usize,
    pub num_frames: usize,
    pub shots: Vec<Shot>,
    pub tracklets: Vec<Tracklet>,
    pub sampled: Vec<usize>,
    pub sampled_frames: Vec<FrameBuffer>,
}

fn track_one(cfg: &RunConfig, inputs: &RunInputs, clip_index: usize) -> Result<TrackedClip, PipelineError> {
    let clip = &inputs.clips[clip_index];
    let dir = FrameDir::scan(&clip.resolve_frame_dir(&cfg.paths.frames_root))?;
    let num_frames = dir.len();
    let sampled = sample_frames(num_frames, cfg.num_frames);
    let sampled_frames = dir.load_many(&sampled)?;
    let (shots, tracklets) = if cfg.recognition == RecognitionMode::FrameLevel {
        (Vec::new(), Vec::new())
    } else {
        let boundary_file = cfg.paths.shot_boundaries.as_ref().map(|d| d.join(format!("{}.json", clip.clip_id))).filter(|p| p.exists());
        let shots = match boundary_file {
            Some(path) => shots_from_boundaries(&load_boundaries(&path)?, num_frames)?,
            None => detect_shots(&dir.load_all()?, &cfg.shots),
        };
        let tracklets = track_clip(inputs.clip_detections(&clip.clip_id), &shots, &cfg.tracker);
        (shots, tracklets)
    };
    tracing::debug!(clip = %clip.clip_id, num_frames, shots = shots.len(), tracklets = tracklets.len(), "tracked");
    Ok(TrackedClip { clip_index, num_frames, shots, tracklets, sampled, sampled_frames })
}

/// Who is on screen in a clip.
#[derive(Debug, Clone, Default)]
pub struct ClipIdentity {
    pub cast_ids: BTreeSet<String>,
    /// Character names of `cast_ids`.
    pub names: BTreeSet<String>,
    /// Named tracklets used for drawing overlays.
    pub overlay_tracklets: Vec<Tracklet>,
}

/// Builds the gallery for one movie: exemplars are mined from `queries` in
/// tracklet-exemplar mode only.
pub fn movie_gallery(
    originals: &[(String, Vec<FaceEmbedding>)],
    queries: &[FaceEmbedding],
    mode: RecognitionMode,
    k: usize,
    cutoff: Option<f64>,
) -> Result<CastGallery, FaceIdError> {
    match mode {
        RecognitionMode::TrackletExemplar => build_cast_gallery(originals.to_vec(), queries, k, cutoff),
        RecognitionMode::Tracklet | RecognitionMode::FrameLevel => CastGallery::from_originals(originals.to_vec()),
    }
}

/// All face embeddings carried by `tracklets`, in tracklet then frame order.
pub fn tracklet_faces<'a>(tracklets: impl IntoIterator<Item = &'a Tracklet>) -> Vec<FaceEmbedding> {
    tracklets.into_iter().flat_map(|t| t.faces().cloned()).collect()
}

/// Identifies the characters visible in the sampled frames of a clip.
///
/// Tracklet modes name whole tracklets and keep those covering at least one
/// sampled frame. Frame-level mode matches every face detected on a sampled
/// frame independently against the originals, and each match becomes a
/// one-frame tracklet for drawing.
pub fn identify_clip(
    tracklets: &[Tracklet],
    detections: &[DetectionRecord],
    sampled: &[usize],
    gallery: &CastGallery,
    names: &HashMap<String, String>,
    mode: RecognitionMode,
    tau: f64,
) -> ClipIdentity {
    let name_of = |id: &str| names.get(id).cloned().unwrap_or_else(|| id.to_string());
    let mut out = ClipIdentity::default();
    match mode {
        RecognitionMode::FrameLevel => {
            let sampled_set: BTreeSet<usize> = sampled.iter().copied().collect();
            for (i, d) in detections.iter().enumerate() {
                let frame = d.frame_idx as usize;
                if !sampled_set.contains(&frame) {
                    continue;
                }
                let Some(face) = d.face_embedding.as_deref().and_then(FaceEmbedding::from_raw) else { continue };
                let Some((ci, dist)) = best_cast(&[&face], gallery) else { continue };
                if dist >= tau {
                    continue;
                }
                let cast_id = gallery.entries[ci].cast_id.clone();
                out.overlay_tracklets.push(Tracklet {
                    tracklet_id: i as u64,
                    shot: Shot { start_frame: frame, end_frame: frame + 1 },
                    boxes: BTreeMap::from([(frame, d.person_box)]),
                    confidences: BTreeMap::from([(frame, d.confidence)]),
                    face_embeddings: BTreeMap::new(),
                    sources: BTreeMap::new(),
                    name: Some(name_of(&cast_id)),
                    cast_id: Some(cast_id),
                });
            }
        }
        RecognitionMode::Tracklet | RecognitionMode::TrackletExemplar => {
            let assignments = assign_identities(tracklets, gallery, tau);
            for (t, a) in tracklets.iter().zip(assignments) {
                let Some(cast_id) = a.cast_id else { continue };
                if !sampled.iter().any(|&f| t.covers(f)) {
                    continue;
                }
                let mut t = t.clone();
                t.name = Some(name_of(&cast_id));
                t.cast_id = Some(cast_id);
                out.overlay_tracklets.push(t);
            }
        }
    }
    for t in &out.overlay_tracklets {
        out.cast_ids.extend(t.cast_id.clone());
        out.names.extend(t.name.clone());
    }
    out
}

/// A clip ready for prompting.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip: MovieClip,
    pub sampled: Vec<usize>,
    pub frames: Vec<FrameBuffer>,
    pub identity: ClipIdentity,
}

/// Result of the CPU-bound stages for a whole run. Clips that failed carry
/// their error message.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub inputs: Arc<RunInputs>,
    pub clips: Vec<Result<PreparedClip, String>>,
}

/// Runs shots, tracking, identification and overlay rendering for every
/// clip. Per-clip failures are recorded, not propagated.
pub fn prepare_run(cfg: &RunConfig, inputs: Arc<RunInputs>) -> PreparedRun {
    let tracked: Vec<Result<TrackedClip, String>> =
        (0..inputs.clips.len()).into_par_iter().map(|i| track_one(cfg, &inputs, i).map_err(|e| e.to_string())).collect();

    // Galleries per movie, mined from every successfully tracked clip.
    let mut galleries: HashMap<&str, Result<CastGallery, String>> = HashMap::new();
    if cfg.exemplar_scope == ExemplarScope::Movie || cfg.recognition != RecognitionMode::TrackletExemplar {
        for (movie_id, data) in &inputs.movies {
            let queries = if cfg.recognition == RecognitionMode::TrackletExemplar {
                tracklet_faces(
                    tracked.iter().flatten().filter(|t| inputs.clips[t.clip_index].movie_id == *movie_id).flat_map(|t| &t.tracklets),
                )
            } else {
                Vec::new()
            };
            let g = movie_gallery(&data.originals, &queries, cfg.recognition, cfg.exemplar_k, cfg.exemplar_cutoff).map_err(|e| e.to_string());
            galleries.insert(movie_id.as_str(), g);
        }
    }

    let clips = tracked
        .into_par_iter()
        .map(|t| {
            let t = t?;
            let clip = inputs.clips[t.clip_index].clone();
            let data = &inputs.movies[&clip.movie_id];
            let gallery = match galleries.get(clip.movie_id.as_str()) {
                Some(g) => g.clone()?,
                None => movie_gallery(&data.originals, &tracklet_faces(&t.tracklets), cfg.recognition, cfg.exemplar_k, cfg.exemplar_cutoff)
                    .map_err(|e| e.to_string())?,
            };
            let identity = identify_clip(
                &t.tracklets,
                inputs.clip_detections(&clip.clip_id),
                &t.sampled,
                &gallery,
                &data.character_names(),
                cfg.recognition,
                cfg.tau,
            );
            let frames = render_overlays(&t.sampled_frames, &t.sampled, &identity.overlay_tracklets, &cfg.overlay).map_err(|e| e.to_string())?;
            Ok(PreparedClip { clip, sampled: t.sampled, frames, identity })
        })
        .collect();
    PreparedRun { inputs, clips }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStatus {
    Done,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub status: ClipStatus,
    pub prompt_hash: Option<String>,
    /// First-pass prompt hash when the context-AD pass ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_pass_hash: Option<String>,
    pub characters: Vec<String>,
    pub sampled_frames: Vec<usize>,
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub template_version: String,
    pub clips: Vec<ClipRecord>,
    pub backend_calls: usize,
    pub elapsed_ms: u64,
}

impl RunManifest {
    pub fn count(&self, status: ClipStatus) -> usize {
        self.clips.iter().filter(|c| c.status == status).count()
    }

    pub fn has_failures(&self) -> bool {
        self.count(ClipStatus::Failed) > 0
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    /// Final outputs in clip-manifest order; failed clips are absent.
    pub outputs: Vec<ADOutput>,
    pub first_pass: Option<Vec<ADOutput>>,
}

struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

#[async_trait]
impl<B: Backend> Backend for Counting<B> {
    async fn complete(&self, bundle: &crate::promptgen::PromptBundle) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(bundle).await
    }
}

struct ClipOutcome {
    result: Result<(ADOutput, bool), String>,
    elapsed_ms: u64,
}

async fn generate_clip(
    cfg: &RunConfig,
    inputs: &RunInputs,
    prep: &PreparedClip,
    timestamps: &[f64],
    prior: &[PriorAd],
    backend: &dyn Backend,
    cache: Option<&Cache>,
) -> Result<(ADOutput, bool), PipelineError> {
    let data = &inputs.movies[&prep.clip.movie_id];
    let now = inputs.ad_timestamp(&prep.clip);
    let subs = select_subtitle_window(&data.subtitles, timestamps, now, cfg.context_len);
    let prev = if cfg.context_ad { select_prev_ads(prior, now, cfg.context_len) } else { Vec::new() };
    let context = build_context(subs, prev, cfg.context_len);
    let clip = ClipPrompt {
        clip_id: &prep.clip.clip_id,
        movie_title: prep.clip.title(),
        frames: &prep.frames,
        gt_words: inputs.ground_truth.get(&prep.clip.clip_id).map(|g| g.word_count),
    };
    let t = &inputs.template;
    match cfg.mode {
        GenerationMode::OneStage => {
            let bundle = build_ad_prompt(t, clip, &context, &prep.identity.names, cfg.length_policy, cfg.ad_style)?;
            let hash = bundle.hash();
            if let Some(hit) = cache.and_then(|c| c.lookup(&hash)) {
                return Ok((hit, true));
            }
            let out = generate_ad(&bundle, backend, &cfg.retry).await?;
            store(cache, &out);
            Ok((out, false))
        }
        GenerationMode::TwoStage => {
            let (_, hash) = plan_two_stage(t, clip, &context, &prep.identity.names, cfg.length_policy, cfg.ad_style)?;
            if let Some(hit) = cache.and_then(|c| c.lookup(&hash)) {
                return Ok((hit, true));
            }
            let out =
                generate_ad_two_stage(t, clip, &context, &prep.identity.names, cfg.length_policy, cfg.ad_style, backend, &cfg.retry).await?;
            store(cache, &out);
            Ok((out, false))
        }
    }
}

fn store(cache: Option<&Cache>, out: &ADOutput) {
    if let Some(c) = cache {
        if let Err(e) = c.store(out) {
            tracing::warn!(clip = %out.clip_id, error = %e, "cache write failed");
        }
    }
}

async fn generate_pass(
    cfg: &RunConfig,
    run: &PreparedRun,
    prior: &HashMap<String, Vec<PriorAd>>,
    backend: &dyn Backend,
    cache: Option<&Cache>,
) -> Vec<Option<ClipOutcome>> {
    let timestamps = run.inputs.movie_ad_timestamps();
    let empty = Vec::new();
    futures::stream::iter(run.clips.iter().map(|prep| {
        let timestamps = &timestamps;
        let empty = &empty;
        async move {
            let prep = prep.as_ref().ok()?;
            let start = Instant::now();
            let ts = &timestamps[prep.clip.movie_id.as_str()];
            let prior = prior.get(&prep.clip.movie_id).unwrap_or(empty);
            let result = generate_clip(cfg, &run.inputs, prep, ts, prior, backend, cache).await.map_err(|e| e.to_string());
            if let Err(e) = &result {
                tracing::error!(clip = %prep.clip.clip_id, error = %e, "clip failed");
            }
            Some(ClipOutcome { result, elapsed_ms: start.elapsed().as_millis() as u64 })
        }
    }))
    .buffered(cfg.concurrency)
    .collect()
    .await
}

/// Runs the whole pipeline against the given backend and writes outputs and
/// manifest to the output directory. Configuration and input errors abort
/// before any backend call; per-clip errors are recorded in the manifest.
pub async fn run_with_backend(cfg: &RunConfig, backend: Arc<dyn Backend>) -> Result<RunSummary, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    let inputs = {
        let cfg = cfg.clone();
        tokio::task::spawn_blocking(move || RunInputs::load(&cfg))
            .await
            .map_err(|e| PipelineError::Other(e.to_string()))??
    };
    let cache = cfg.paths.cache_dir.as_deref().map(Cache::open).transpose().map_err(|source| PipelineError::Io {
        path: cfg.paths.cache_dir.clone().unwrap_or_default(),
        source,
    })?;
    let run = {
        let cfg = cfg.clone();
        let inputs = Arc::new(inputs);
        tokio::task::spawn_blocking(move || prepare_run(&cfg, inputs)).await.map_err(|e| PipelineError::Other(e.to_string()))?
    };
    if let Some(dir) = &cfg.paths.dump_annotated {
        for prep in run.clips.iter().flatten() {
            dump_annotated(dir, &prep.clip.clip_id, &prep.frames, &prep.sampled)?;
        }
    }

    let backend = Counting { inner: Bounded::new(backend, cfg.concurrency), calls: AtomicUsize::new(0) };
    let mut outcomes = generate_pass(cfg, &run, &HashMap::new(), &backend, cache.as_ref()).await;
    let mut first_pass = None;
    let mut first_hashes: Vec<Option<String>> = vec![None; run.clips.len()];
    if cfg.context_ad {
        // The second pass sees the complete first pass.
        let firsts = collect_outputs(&outcomes);
        let mut prior: HashMap<String, Vec<PriorAd>> = HashMap::new();
        for (prep, o) in run.clips.iter().zip(&outcomes) {
            if let (Ok(prep), Some(ClipOutcome { result: Ok((out, _)), .. })) = (prep, o) {
                prior
                    .entry(prep.clip.movie_id.clone())
                    .or_default()
                    .push(PriorAd { timestamp_s: run.inputs.ad_timestamp(&prep.clip), text: out.text.clone() });
            }
        }
        first_hashes = firsts_hashes(&outcomes);
        first_pass = Some(firsts);
        outcomes = generate_pass(cfg, &run, &prior, &backend, cache.as_ref()).await;
    }

    let mut records = Vec::with_capacity(run.clips.len());
    for ((clip, prep), (outcome, first_hash)) in run.inputs.clips.iter().zip(&run.clips).zip(outcomes.iter().zip(first_hashes)) {
        let (characters, sampled_frames) = match prep {
            Ok(p) => (p.identity.names.iter().cloned().collect(), p.sampled.clone()),
            Err(_) => (Vec::new(), Vec::new()),
        };
        let base = ClipRecord {
            clip_id: clip.clip_id.clone(),
            status: ClipStatus::Failed,
            prompt_hash: None,
            first_pass_hash: first_hash,
            characters,
            sampled_frames,
            error: None,
            elapsed_ms: 0,
        };
        records.push(match (prep, outcome) {
            (Err(e), _) => ClipRecord { error: Some(e.clone()), ..base },
            (Ok(_), Some(ClipOutcome { result: Ok((out, cached)), elapsed_ms })) => ClipRecord {
                status: if *cached { ClipStatus::Cached } else { ClipStatus::Done },
                prompt_hash: Some(out.prompt_hash.clone()),
                elapsed_ms: *elapsed_ms,
                ..base
            },
            (Ok(_), Some(ClipOutcome { result: Err(e), elapsed_ms })) => ClipRecord { error: Some(e.clone()), elapsed_ms: *elapsed_ms, ..base },
            (Ok(_), None) => ClipRecord { error: Some("not processed".into()), ..base },
        });
    }
    let outputs = collect_outputs(&outcomes);
    let manifest = RunManifest {
        config: cfg.clone(),
        template_version: run.inputs.template.version.clone(),
        clips: records,
        backend_calls: backend.calls.load(Ordering::SeqCst),
        elapsed_ms: started.elapsed().as_millis() as u64,
    };

    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    if let Some(firsts) = &first_pass {
        write_jsonl(&out_dir.join(FIRST_PASS_FILE), firsts)?;
    }
    write_jsonl(&out_dir.join(OUTPUTS_FILE), &outputs)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    atomic_write(&manifest_path, (serde_json::to_string_pretty(&manifest).expect("serializable") + "\n").as_bytes())
        .map_err(io_err(&manifest_path))?;
    tracing::info!(
        done = manifest.count(ClipStatus::Done),
        cached = manifest.count(ClipStatus::Cached),
        failed = manifest.count(ClipStatus::Failed),
        backend_calls = manifest.backend_calls,
        "run finished"
    );
    Ok(RunSummary { manifest, outputs, first_pass })
}

fn collect_outputs(outcomes: &[Option<ClipOutcome>]) -> Vec<ADOutput> {
    outcomes.iter().flatten().filter_map(|o| o.result.as_ref().ok().map(|(out, _)| out.clone())).collect()
}

fn firsts_hashes(outcomes: &[Option<ClipOutcome>]) -> Vec<Option<String>> {
    outcomes.iter().map(|o| o.as_ref().and_then(|o| o.result.as_ref().ok()).map(|(out, _)| out.prompt_hash.clone())).collect()
}

/// Builds the configured backend and runs the pipeline.
pub async fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let (backend, _) = build_backend(&cfg.backend)?;
    run_with_backend(cfg, backend).await
}

// ---------------------------------------------------------------------------
// Evaluation, identification, annotation

fn cast_lookup(inputs: &RunInputs) -> impl Fn(&str) -> Vec<CastMember> + '_ {
    let movie_of: HashMap<&str, &str> = inputs.clips.iter().map(|c| (c.clip_id.as_str(), c.movie_id.as_str())).collect();
    move |clip_id: &str| movie_of.get(clip_id).and_then(|m| inputs.movies.get(*m)).map(|d| d.cast.clone()).unwrap_or_default()
}

/// Scores `outputs_path` against the configured ground truth and writes
/// `eval.json` and `eval.csv` into the output directory.
pub fn run_eval(cfg: &RunConfig, outputs_path: &Path) -> Result<EvalReport, PipelineError> {
    if cfg.paths.ground_truth.is_none() {
        return Err(PipelineError::Config("evaluation needs paths.ground_truth".into()));
    }
    let inputs = RunInputs::load(cfg)?;
    let outputs = load_outputs(outputs_path)?;
    let report = evaluate_run(&outputs, &inputs.ground_truth, &cast_lookup(&inputs))?;
    let dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    report.write_json(&dir.join(EVAL_FILE))?;
    report.write_csv(&dir.join(EVAL_CSV_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub clip_id: String,
    pub cast_ids: BTreeSet<String>,
    pub names: BTreeSet<String>,
    /// Cast named in the ground-truth AD, when ground truth is configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotated: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub recognition: RecognitionMode,
    pub clips: Vec<IdentityRecord>,
    pub failed: Vec<String>,
    /// Micro-averaged against ground-truth name matches, when available.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

/// Character recognition only: per-clip identity sets, written to
/// `identities.jsonl`.
pub fn run_identify(cfg: &RunConfig) -> Result<IdentityReport, PipelineError> {
    cfg.validate()?;
    let inputs = Arc::new(RunInputs::load(cfg)?);
    let run = prepare_run(cfg, inputs.clone());
    let cast = cast_lookup(&inputs);
    let mut clips = Vec::new();
    let mut failed = Vec::new();
    for (clip, prep) in inputs.clips.iter().zip(&run.clips) {
        match prep {
            Ok(p) => clips.push(IdentityRecord {
                clip_id: clip.clip_id.clone(),
                cast_ids: p.identity.cast_ids.clone(),
                names: p.identity.names.clone(),
                annotated: inputs.ground_truth.get(&clip.clip_id).map(|g| ner_match(&g.text, &cast(&clip.clip_id))),
            }),
            Err(e) => {
                tracing::error!(clip = %clip.clip_id, error = %e, "clip failed");
                failed.push(clip.clip_id.clone());
            }
        }
    }
    let scored: Vec<&IdentityRecord> = clips.iter().filter(|c| c.annotated.is_some()).collect();
    let (recall, precision) = if scored.is_empty() {
        (None, None)
    } else {
        let preds = scored.iter().map(|c| (c.clip_id.clone(), c.cast_ids.clone())).collect();
        let truth = scored.iter().map(|c| (c.clip_id.clone(), c.annotated.clone().unwrap_or_default())).collect();
        let (r, p) = char_pr(&preds, &truth)?;
        (Some(r), Some(p))
    };
    let dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(IDENTITIES_FILE), &clips)?;
    Ok(IdentityReport { recognition: cfg.recognition, clips, failed, recall, precision })
}

/// Writes the annotated prompt frames of every clip under `dir` without
/// calling any backend. Returns the ids of clips that failed.
pub fn annotate_dump(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>, PipelineError> {
    cfg.validate()?;
    let run = prepare_run(cfg, Arc::new(RunInputs::load(cfg)?));
    let mut failed = Vec::new();
    for (clip, prep) in run.inputs.clips.iter().zip(&run.clips) {
        match prep {
            Ok(p) => dump_annotated(dir, &p.clip.clip_id, &p.frames, &p.sampled)?,
            Err(e) => {
                tracing::error!(clip = %clip.clip_id, error = %e, "clip failed");
                failed.push(clip.clip_id.clone());
            }
        }
    }
    Ok(failed)
}
