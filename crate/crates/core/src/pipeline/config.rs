use super::PipelineError;
use crate::annotate::OverlayStyle;
use crate::backend::{BackendConfig, RetryPolicy};
use crate::faceid::RecognitionMode;
use crate::promptgen::{GenerationMode, LengthPolicy};
use crate::shotseg::ShotParams;
use crate::tracker::TrackerParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Input and output locations. `subtitles`, `cast` and `gallery` may each be
/// a single file shared by every clip or a directory holding one file per
/// movie (`<movie_id>.srt`, `<movie_id>.json`, `<movie_id>.jsonl`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    /// Clip manifest (JSON lines).
    pub clips: PathBuf,
    pub frames_root: PathBuf,
    pub detections: PathBuf,
    pub subtitles: Option<PathBuf>,
    pub cast: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Directory of `<clip_id>.json` boundary lists. Clips without one fall
    /// back to histogram shot detection.
    pub shot_boundaries: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// When set, annotated prompt frames are also written here.
    pub dump_annotated: Option<PathBuf>,
}

impl RunPaths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.clips, &mut self.frames_root, &mut self.detections, &mut self.output_dir] {
            fix(p);
        }
        for p in [
            &mut self.subtitles,
            &mut self.cast,
            &mut self.gallery,
            &mut self.ground_truth,
            &mut self.shot_boundaries,
            &mut self.template,
            &mut self.cache_dir,
            &mut self.dump_annotated,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarScope {
    /// Exemplars are mined from every clip of the movie.
    #[default]
    Movie,
    /// Exemplars are mined from the clip being identified only.
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: RunPaths,
    /// Frames sampled per clip for the prompt.
    pub num_frames: usize,
    pub overlay: OverlayStyle,
    /// Context length T, in preceding ADs.
    pub context_len: usize,
    /// Run a second pass that adds the first pass's ADs to the context.
    pub context_ad: bool,
    pub recognition: RecognitionMode,
    pub exemplar_k: usize,
    pub exemplar_cutoff: Option<f64>,
    pub exemplar_scope: ExemplarScope,
    pub tau: f64,
    pub tracker: TrackerParams,
    pub shots: ShotParams,
    pub length_policy: LengthPolicy,
    pub ad_style: bool,
    pub mode: GenerationMode,
    pub backend: BackendConfig,
    /// Maximum in-flight backend calls (and clips in generation).
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: RunPaths::default(),
            num_frames: 10,
            overlay: OverlayStyle::default(),
            context_len: 100,
            context_ad: false,
            recognition: RecognitionMode::default(),
            exemplar_k: 5,
            exemplar_cutoff: None,
            exemplar_scope: ExemplarScope::default(),
            tau: 0.6,
            tracker: TrackerParams::default(),
            shots: ShotParams::default(),
            length_policy: LengthPolicy::default(),
            ad_style: true,
            mode: GenerationMode::default(),
            backend: BackendConfig::default(),
            concurrency: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML config. Relative paths are resolved against the
    /// directory containing the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks numeric ranges and that every input path exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check((1..=crate::promptgen::MAX_FRAMES).contains(&self.num_frames), format!("num_frames {} not in 1..=10", self.num_frames));
        check(self.tau > 0.0 && self.tau <= 2.0, format!("tau {} not in (0, 2]", self.tau));
        check(self.exemplar_cutoff.is_none_or(|c| (0.0..=2.0).contains(&c)), "exemplar_cutoff not in [0, 2]".into());
        check(self.tracker.iou_min > 0.0 && self.tracker.iou_min <= 1.0, format!("tracker.iou_min {} not in (0, 1]", self.tracker.iou_min));
        check((0.0..=1.0).contains(&self.tracker.min_conf), format!("tracker.min_conf {} not in [0, 1]", self.tracker.min_conf));
        check(self.tracker.min_len >= 1, "tracker.min_len must be at least 1".into());
        check(self.shots.min_shot_len >= 1, "shots.min_shot_len must be at least 1".into());
        check(self.shots.k_sigma >= 0.0, "shots.k_sigma must be non-negative".into());
        check(self.concurrency >= 1, "concurrency must be at least 1".into());
        check(self.overlay.label_scale >= 1, "overlay.label_scale must be at least 1".into());
        check(self.overlay.box_thickness >= 1, "overlay.box_thickness must be at least 1".into());
        check(
            !(self.length_policy == LengthPolicy::GtLength && self.paths.ground_truth.is_none()),
            "length_policy gt_length needs paths.ground_truth".into(),
        );

        let p = &self.paths;
        let mut exists = |name: &str, path: &Path| {
            if path.as_os_str().is_empty() {
                problems.push(format!("paths.{name} is not set"));
            } else if !path.exists() {
                problems.push(format!("paths.{name} does not exist: {}", path.display()));
            }
        };
        exists("clips", &p.clips);
        exists("frames_root", &p.frames_root);
        exists("detections", &p.detections);
        for (name, opt) in [
            ("subtitles", &p.subtitles),
            ("cast", &p.cast),
            ("gallery", &p.gallery),
            ("ground_truth", &p.ground_truth),
            ("shot_boundaries", &p.shot_boundaries),
            ("template", &p.template),
        ] {
            if let Some(path) = opt {
                exists(name, path);
            }
        }
        if p.output_dir.as_os_str().is_empty() {
            problems.push("paths.output_dir is not set".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(problems.join("; ")))
        }
    }
}
