//! Prompt construction and one-/two-stage generation.
//!
//! Prompt building is pure: the same clip, context, names, policy and
//! template always give byte-identical bundles and hashes.

use crate::backend::{complete_with_retry, Backend, BackendError, RetryPolicy};
use crate::context::ContextWindow;
use crate::frame::FrameBuffer;
use crate::ingest::word_count;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Maximum number of frames a single bundle may carry.
pub const MAX_FRAMES: usize = 10;

const DEFAULT_TEMPLATE: &str = include_str!("../templates/ad_prompt_v1.toml");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("length policy gt_length requires a ground-truth AD for clip {0}")]
    GtLengthWithoutGroundTruth(String),
    #[error("bundle carries {0} frames, at most {MAX_FRAMES} allowed")]
    TooManyFrames(usize),
    #[error("{captions} captions for {frames} frames")]
    CaptionCountMismatch { captions: usize, frames: usize },
    #[error("requested word count must be at least 1")]
    ZeroWordCount,
    #[error("template: {0}")]
    Template(String),
    #[error("backend failed for clip {clip_id}: {source}")]
    Backend {
        clip_id: String,
        #[source]
        source: BackendError,
    },
}

/// Serialized as `"none"`, `"fixed:N"` or `"gt_length"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LengthPolicy {
    None,
    Fixed(usize),
    GtLength,
}

impl Default for LengthPolicy {
    fn default() -> Self {
        Self::Fixed(10)
    }
}

impl LengthPolicy {
    /// The word count to request, given the clip's ground-truth length if any.
    pub fn resolve(self, clip_id: &str, gt_words: Option<usize>) -> Result<Option<usize>, PromptError> {
        let n = match self {
            Self::None => return Ok(None),
            Self::Fixed(n) => n,
            Self::GtLength => gt_words.ok_or_else(|| PromptError::GtLengthWithoutGroundTruth(clip_id.to_string()))?,
        };
        if n == 0 {
            return Err(PromptError::ZeroWordCount);
        }
        Ok(Some(n))
    }
}

impl fmt::Display for LengthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Fixed(n) => write!(f, "fixed:{n}"),
            Self::GtLength => f.write_str("gt_length"),
        }
    }
}

impl From<LengthPolicy> for String {
    fn from(p: LengthPolicy) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for LengthPolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for LengthPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "gt_length" => Ok(Self::GtLength),
            _ => {
                let n = s
                    .strip_prefix("fixed:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| format!("unknown length policy {s:?} (expected none, fixed:N or gt_length)"))?;
                if n == 0 {
                    return Err("fixed word count must be at least 1".into());
                }
                Ok(Self::Fixed(n))
            }
        }
    }
}

/// Text template. Every field is a format string with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: String,
    pub system: String,
    pub title: String,
    pub subtitles_header: String,
    pub subtitle_line: String,
    pub prior_ads_header: String,
    pub prior_ad_line: String,
    pub characters: String,
    pub ad_instruction: String,
    pub caption_instruction: String,
    pub length_clause: String,
    pub frame_caption_instruction: String,
    pub captions_header: String,
    pub caption_line: String,
    pub summary_ad_instruction: String,
    pub summary_caption_instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let t: Self = toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        if t.version.trim().is_empty() {
            return Err(PromptError::Template("empty version".into()));
        }
        if !t.length_clause.contains("{n}") {
            return Err(PromptError::Template("length_clause lacks {n}".into()));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Ad,
    FrameCaption,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub clip_id: String,
    pub movie_title: String,
    pub requested_word_count: Option<usize>,
    pub template_version: String,
    pub kind: BundleKind,
}

/// Everything one backend call needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub frames: Vec<FrameBuffer>,
    pub metadata: BundleMeta,
}

impl PromptBundle {
    /// SHA-256 of the serialized bundle, hex encoded. Frames contribute their
    /// dimensions and raw pixels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(serde_json::to_string(&self.metadata).expect("metadata serializes").as_bytes());
        field(self.system_text.as_bytes());
        field(self.user_text.as_bytes());
        for f in &self.frames {
            field(&f.width().to_le_bytes());
            field(&f.height().to_le_bytes());
            field(f.pixels());
        }
        hex::encode(h.finalize())
    }
}

/// The per-clip inputs to prompt construction.
#[derive(Debug, Clone, Copy)]
pub struct ClipPrompt<'a> {
    pub clip_id: &'a str,
    pub movie_title: &'a str,
    /// Sampled frames with overlays already drawn.
    pub frames: &'a [FrameBuffer],
    /// Word count of the ground-truth AD, when known.
    pub gt_words: Option<usize>,
}

fn context_lines(t: &PromptTemplate, context: &ContextWindow, names: &BTreeSet<String>, movie_title: &str) -> Vec<String> {
    let mut lines = vec![fill(&t.title, &[("title", movie_title)])];
    if !context.subtitles.is_empty() {
        lines.push(String::new());
        lines.push(t.subtitles_header.clone());
        lines.extend(context.subtitles.iter().map(|s| fill(&t.subtitle_line, &[("text", &s.text)])));
    }
    if !context.previous_ads.is_empty() {
        lines.push(String::new());
        lines.push(t.prior_ads_header.clone());
        lines.extend(context.previous_ads.iter().map(|a| fill(&t.prior_ad_line, &[("text", &a.text)])));
    }
    if !names.is_empty() {
        let joined = names.iter().map(String::as_str).collect::<Vec<_>>().join(", ");
        lines.push(String::new());
        lines.push(fill(&t.characters, &[("names", &joined)]));
    }
    lines
}

fn length_text(t: &PromptTemplate, n: Option<usize>) -> String {
    n.map(|n| fill(&t.length_clause, &[("n", &n.to_string())])).unwrap_or_default()
}

pub fn build_ad_prompt(
    template: &PromptTemplate,
    clip: ClipPrompt<'_>,
    context: &ContextWindow,
    character_names: &BTreeSet<String>,
    policy: LengthPolicy,
    ad_style: bool,
) -> Result<PromptBundle, PromptError> {
    if clip.frames.len() > MAX_FRAMES {
        return Err(PromptError::TooManyFrames(clip.frames.len()));
    }
    let n = policy.resolve(clip.clip_id, clip.gt_words)?;
    let mut lines = context_lines(template, context, character_names, clip.movie_title);
    let instruction = if ad_style { &template.ad_instruction } else { &template.caption_instruction };
    lines.push(String::new());
    lines.push(fill(instruction, &[("count", &clip.frames.len().to_string()), ("length", &length_text(template, n))]));
    Ok(PromptBundle {
        system_text: template.system.clone(),
        user_text: lines.join("\n"),
        frames: clip.frames.to_vec(),
        metadata: BundleMeta {
            clip_id: clip.clip_id.to_string(),
            movie_title: clip.movie_title.to_string(),
            requested_word_count: n,
            template_version: template.version.clone(),
            kind: BundleKind::Ad,
        },
    })
}

/// First stage of two-stage mode: one detailed description per frame.
pub fn build_frame_caption_prompt(template: &PromptTemplate, clip: ClipPrompt<'_>, frame_idx: usize) -> PromptBundle {
    let frame = clip.frames[frame_idx].clone();
    let user_text = [fill(&template.title, &[("title", clip.movie_title)]), String::new(), template.frame_caption_instruction.clone()].join("\n");
    PromptBundle {
        system_text: template.system.clone(),
        user_text,
        frames: vec![frame],
        metadata: BundleMeta {
            clip_id: clip.clip_id.to_string(),
            movie_title: clip.movie_title.to_string(),
            requested_word_count: None,
            template_version: template.version.clone(),
            kind: BundleKind::FrameCaption,
        },
    }
}

/// Second stage: a text-only call that condenses the frame captions.
pub fn build_summary_prompt(
    template: &PromptTemplate,
    clip: ClipPrompt<'_>,
    captions: &[String],
    context: &ContextWindow,
    character_names: &BTreeSet<String>,
    policy: LengthPolicy,
    ad_style: bool,
) -> Result<PromptBundle, PromptError> {
    if captions.len() != clip.frames.len() {
        return Err(PromptError::CaptionCountMismatch { captions: captions.len(), frames: clip.frames.len() });
    }
    let n = policy.resolve(clip.clip_id, clip.gt_words)?;
    let mut lines = context_lines(template, context, character_names, clip.movie_title);
    lines.push(String::new());
    lines.push(template.captions_header.clone());
    for (k, c) in captions.iter().enumerate() {
        lines.push(fill(&template.caption_line, &[("k", &(k + 1).to_string()), ("text", c.trim())]));
    }
    let instruction = if ad_style { &template.summary_ad_instruction } else { &template.summary_caption_instruction };
    lines.push(String::new());
    lines.push(fill(instruction, &[("length", &length_text(template, n))]));
    Ok(PromptBundle {
        system_text: template.system.clone(),
        user_text: lines.join("\n"),
        frames: Vec::new(),
        metadata: BundleMeta {
            clip_id: clip.clip_id.to_string(),
            movie_title: clip.movie_title.to_string(),
            requested_word_count: n,
            template_version: template.version.clone(),
            kind: BundleKind::Summary,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    #[default]
    OneStage,
    TwoStage,
}

impl FromStr for GenerationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "one_stage" => Ok(Self::OneStage),
            "two_stage" => Ok(Self::TwoStage),
            _ => Err(format!("unknown pipeline mode {s:?} (expected one_stage or two_stage)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ADOutput {
    pub clip_id: String,
    pub text: String,
    pub word_count: usize,
    pub mode: GenerationMode,
    pub prompt_hash: String,
}

impl ADOutput {
    pub fn new(clip_id: &str, completion: &str, mode: GenerationMode, prompt_hash: String) -> Self {
        let text = completion.trim().to_string();
        Self { clip_id: clip_id.to_string(), word_count: word_count(&text), text, mode, prompt_hash }
    }
}

/// One backend call; the output text is the trimmed completion.
pub async fn generate_ad(bundle: &PromptBundle, backend: &dyn Backend, retry: &RetryPolicy) -> Result<ADOutput, PromptError> {
    let text = complete_with_retry(backend, bundle, retry)
        .await
        .map_err(|source| PromptError::Backend { clip_id: bundle.metadata.clip_id.clone(), source })?;
    Ok(ADOutput::new(&bundle.metadata.clip_id, &text, GenerationMode::OneStage, bundle.hash()))
}

/// Deterministic cache key for a two-stage generation. The summary prompt
/// depends on the captions the backend returns, so the key is built from the
/// caption bundles plus the summary prompt with empty captions.
pub fn two_stage_hash(caption_bundles: &[PromptBundle], summary_skeleton: &PromptBundle) -> String {
    let mut h = Sha256::new();
    h.update(b"two_stage");
    for b in caption_bundles {
        h.update(b.hash().as_bytes());
    }
    h.update(summary_skeleton.hash().as_bytes());
    hex::encode(h.finalize())
}

/// The caption bundles and the content hash of a two-stage generation,
/// computed without calling the backend.
pub fn plan_two_stage(
    template: &PromptTemplate,
    clip: ClipPrompt<'_>,
    context: &ContextWindow,
    character_names: &BTreeSet<String>,
    policy: LengthPolicy,
    ad_style: bool,
) -> Result<(Vec<PromptBundle>, String), PromptError> {
    if clip.frames.len() > MAX_FRAMES {
        return Err(PromptError::TooManyFrames(clip.frames.len()));
    }
    let captions: Vec<PromptBundle> = (0..clip.frames.len()).map(|i| build_frame_caption_prompt(template, clip, i)).collect();
    let blanks = vec![String::new(); clip.frames.len()];
    let skeleton = build_summary_prompt(template, clip, &blanks, context, character_names, policy, ad_style)?;
    let hash = two_stage_hash(&captions, &skeleton);
    Ok((captions, hash))
}

/// Frame captions (in parallel) followed by one text-only summary call.
pub async fn generate_ad_two_stage(
    template: &PromptTemplate,
    clip: ClipPrompt<'_>,
    context: &ContextWindow,
    character_names: &BTreeSet<String>,
    policy: LengthPolicy,
    ad_style: bool,
    backend: &dyn Backend,
    retry: &RetryPolicy,
) -> Result<ADOutput, PromptError> {
    let (caption_bundles, hash) = plan_two_stage(template, clip, context, character_names, policy, ad_style)?;
    let wrap = |source| PromptError::Backend { clip_id: clip.clip_id.to_string(), source };
    let results = futures::future::join_all(caption_bundles.iter().map(|b| complete_with_retry(backend, b, retry))).await;
    let captions: Vec<String> = results.into_iter().collect::<Result<_, _>>().map_err(wrap)?;
    let summary = build_summary_prompt(template, clip, &captions, context, character_names, policy, ad_style)?;
    let text = complete_with_retry(backend, &summary, retry).await.map_err(wrap)?;
    Ok(ADOutput::new(clip.clip_id, &text, GenerationMode::TwoStage, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};
    use crate::context::{build_context, PriorAd};
    use crate::ingest::Subtitle;

    fn frames(n: usize) -> Vec<FrameBuffer> {
        (0..n).map(|i| FrameBuffer::filled(8, 6, [i as u8, 0, 0])).collect()
    }

    fn clip(frames: &[FrameBuffer]) -> ClipPrompt<'_> {
        ClipPrompt { clip_id: "c1", movie_title: "Gone Girl", frames, gt_words: None }
    }

    fn names(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn fixed_policy_clause() {
        let f = frames(10);
        let b = build_ad_prompt(&PromptTemplate::default(), clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(10), true).unwrap();
        assert!(b.user_text.contains("exactly 10 words"));
        assert_eq!(b.user_text.matches("audio description").count(), 1);
        assert_eq!(b.frames.len(), 10);
        assert_eq!(b.metadata.requested_word_count, Some(10));
    }

    #[test]
    fn caption_style_avoids_ad_wording() {
        let f = frames(3);
        let b = build_ad_prompt(&PromptTemplate::default(), clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(6), false).unwrap();
        assert!(!b.user_text.to_lowercase().contains("audio description"));
        assert!(b.user_text.contains("exactly 6 words"));
    }

    #[test]
    fn empty_blocks_are_elided() {
        let t = PromptTemplate::default();
        let f = frames(2);
        let b = build_ad_prompt(&t, clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::None, true).unwrap();
        assert!(!b.user_text.contains(&t.subtitles_header));
        assert!(!b.user_text.contains(&t.prior_ads_header));
        assert!(!b.user_text.contains("Characters"));
        assert!(!b.user_text.contains("exactly"));
        assert!(b.user_text.starts_with("Movie: Gone Girl"));
    }

    #[test]
    fn blocks_appear_in_order() {
        let t = PromptTemplate::default();
        let ctx = build_context(
            vec![Subtitle { index: 1, start_s: 1.0, end_s: 2.0, text: "Where were you?".into() }],
            vec![PriorAd { timestamp_s: 1.5, text: "Nick turns.".into() }],
            5,
        );
        let f = frames(2);
        let b = build_ad_prompt(&t, clip(&f), &ctx, &names(&["Nick", "Amy"]), LengthPolicy::Fixed(10), true).unwrap();
        let pos = |s: &str| b.user_text.find(s).unwrap_or_else(|| panic!("missing {s}"));
        assert!(pos("Movie:") < pos("Where were you?"));
        assert!(pos("Where were you?") < pos("Nick turns."));
        assert!(pos("Nick turns.") < pos("Amy, Nick"));
        assert!(pos("Amy, Nick") < pos("exactly 10 words"));
    }

    #[test]
    fn gt_length_needs_ground_truth() {
        let f = frames(1);
        let r = build_ad_prompt(&PromptTemplate::default(), clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::GtLength, true);
        assert!(matches!(r, Err(PromptError::GtLengthWithoutGroundTruth(_))));
        let c = ClipPrompt { gt_words: Some(7), ..clip(&f) };
        let b = build_ad_prompt(&PromptTemplate::default(), c, &ContextWindow::default(), &names(&[]), LengthPolicy::GtLength, true).unwrap();
        assert!(b.user_text.contains("exactly 7 words"));
    }

    #[test]
    fn too_many_frames() {
        let f = frames(11);
        let r = build_ad_prompt(&PromptTemplate::default(), clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::None, true);
        assert!(matches!(r, Err(PromptError::TooManyFrames(11))));
    }

    #[test]
    fn hash_is_deterministic_and_pixel_sensitive() {
        let t = PromptTemplate::default();
        let f = frames(3);
        let a = build_ad_prompt(&t, clip(&f), &ContextWindow::default(), &names(&["A"]), LengthPolicy::Fixed(10), true).unwrap();
        let b = build_ad_prompt(&t, clip(&f), &ContextWindow::default(), &names(&["A"]), LengthPolicy::Fixed(10), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let mut g = frames(3);
        g[1].put_pixel(0, 0, [9, 9, 9]);
        let c = build_ad_prompt(&t, clip(&g), &ContextWindow::default(), &names(&["A"]), LengthPolicy::Fixed(10), true).unwrap();
        assert_ne!(a.hash(), c.hash());
        let mut t2 = t.clone();
        t2.version = "ad-v2".into();
        let d = build_ad_prompt(&t2, clip(&f), &ContextWindow::default(), &names(&["A"]), LengthPolicy::Fixed(10), true).unwrap();
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn caption_and_summary_prompts() {
        let t = PromptTemplate::default();
        let f = frames(10);
        for i in 0..10 {
            assert_eq!(build_frame_caption_prompt(&t, clip(&f), i).frames.len(), 1);
        }
        let f2 = frames(2);
        let s = build_summary_prompt(&t, clip(&f2), &["a".into(), "b".into()], &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(6), true).unwrap();
        assert!(s.frames.is_empty());
        assert!(s.user_text.contains("Frame 1: a") && s.user_text.contains("Frame 2: b"));
        assert!(s.user_text.find("Frame 1: a") < s.user_text.find("Frame 2: b"));
        assert!(s.user_text.contains("exactly 6 words"));
        let bad = build_summary_prompt(&t, clip(&f2), &["a".into()], &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(6), true);
        assert!(matches!(bad, Err(PromptError::CaptionCountMismatch { captions: 1, frames: 2 })));
    }

    #[test]
    fn policy_parsing() {
        for s in ["none", "fixed:10", "gt_length"] {
            assert_eq!(s.parse::<LengthPolicy>().unwrap().to_string(), s);
        }
        assert!("fixed:0".parse::<LengthPolicy>().is_err());
        assert!("fixed".parse::<LengthPolicy>().is_err());
        let p: LengthPolicy = serde_json::from_str(r#""fixed:6""#).unwrap();
        assert_eq!(p, LengthPolicy::Fixed(6));
        assert_eq!(serde_json::to_string(&LengthPolicy::GtLength).unwrap(), r#""gt_length""#);
    }

    #[tokio::test]
    async fn one_and_two_stage_call_counts() {
        let t = PromptTemplate::default();
        let f = frames(10);
        let retry = RetryPolicy::default();
        let mock = MockBackend::new(MockConfig::default());
        let b = build_ad_prompt(&t, clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(10), true).unwrap();
        let out = generate_ad(&b, &mock, &retry).await.unwrap();
        assert_eq!(mock.call_count(), 1);
        assert_eq!(out.word_count, 10);
        assert_eq!(out.prompt_hash, b.hash());

        let mock = MockBackend::new(MockConfig::default());
        let out = generate_ad_two_stage(&t, clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::Fixed(10), true, &mock, &retry)
            .await
            .unwrap();
        assert_eq!(mock.call_count(), 11);
        assert_eq!(out.word_count, 10);
        assert_eq!(out.mode, GenerationMode::TwoStage);
    }

    #[tokio::test]
    async fn output_is_trimmed() {
        let mock = MockBackend::new(MockConfig { mode: crate::backend::MockMode::Fixed, fixed_text: "  Amy smiles.\n".into(), ..Default::default() });
        let f = frames(1);
        let b = build_ad_prompt(&PromptTemplate::default(), clip(&f), &ContextWindow::default(), &names(&[]), LengthPolicy::None, true).unwrap();
        let out = generate_ad(&b, &mock, &RetryPolicy::default()).await.unwrap();
        assert_eq!(out.text, "Amy smiles.");
        assert_eq!(out.word_count, 2);
    }
}
