use adscribe_core::backend::{Backend, MockBackend, MockConfig};
use adscribe_core::faceid::RecognitionMode;
use adscribe_core::pipeline::{
    annotate_dump, load_outputs, run_eval, run_identify, run_with_backend, ClipStatus, RunConfig, FIRST_PASS_FILE, MANIFEST_FILE, OUTPUTS_FILE,
};
use adscribe_core::promptgen::{BundleKind, GenerationMode, LengthPolicy};
use adscribe_core::synth::{write_fixture, Fixture, FixtureSpec};
use std::sync::Arc;

fn fixture(dir: &std::path::Path, clips: usize) -> Fixture {
    write_fixture(dir, &FixtureSpec { num_clips: clips, ..Default::default() }).unwrap()
}

async fn run(cfg: &RunConfig, mock: MockConfig) -> (adscribe_core::pipeline::RunSummary, Arc<MockBackend>) {
    let backend = Arc::new(MockBackend::new(mock));
    let summary = run_with_backend(cfg, backend.clone() as Arc<dyn Backend>).await.unwrap();
    (summary, backend)
}

#[tokio::test]
async fn three_clip_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let (summary, mock) = run(&fx.config, MockConfig::default()).await;
    assert_eq!(summary.outputs.len(), 3);
    assert_eq!(summary.manifest.count(ClipStatus::Done), 3);
    assert_eq!(mock.call_count(), 3);
    let written = load_outputs(&fx.config.paths.output_dir.join(OUTPUTS_FILE)).unwrap();
    assert_eq!(written, summary.outputs);
    assert!(fx.config.paths.output_dir.join(MANIFEST_FILE).exists());
    for out in &summary.outputs {
        assert_eq!(out.word_count, 10);
        assert_eq!(out.mode, GenerationMode::OneStage);
    }
}

#[tokio::test]
async fn characters_are_named_in_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let (summary, mock) = run(&fx.config, MockConfig::default()).await;
    // clip00 shows cast0 and cast1 in its first half, cast1 in its second.
    let rec = &summary.manifest.clips[0];
    assert_eq!(rec.characters, vec!["Amy Dunne".to_string(), "Nick Dunne".to_string()]);
    let call = mock.calls().into_iter().find(|c| c.clip_id == "clip00").unwrap();
    assert!(call.user_text.contains("Amy Dunne, Nick Dunne"));
    assert!(call.user_text.contains("The Quiet Harbour"));
}

#[tokio::test]
async fn permanent_failure_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let (summary, mock) = run(&fx.config, MockConfig { fail_clips: vec!["clip01".into()], ..Default::default() }).await;
    assert_eq!(summary.manifest.count(ClipStatus::Done), 2);
    assert_eq!(summary.manifest.count(ClipStatus::Failed), 1);
    assert!(summary.manifest.has_failures());
    let failed = &summary.manifest.clips[1];
    assert_eq!(failed.status, ClipStatus::Failed);
    assert!(failed.error.as_deref().unwrap().contains("clip01"));
    // 1 + 3 retries for the failing clip.
    assert_eq!(mock.call_count(), 2 + 4);
    assert_eq!(summary.outputs.iter().map(|o| o.clip_id.as_str()).collect::<Vec<_>>(), vec!["clip00", "clip02"]);
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 2);
    let cfg = RunConfig { concurrency: 1, ..fx.config.clone() };
    let (summary, mock) = run(&cfg, MockConfig { fail_first: 2, ..Default::default() }).await;
    assert_eq!(summary.manifest.count(ClipStatus::Done), 2);
    assert_eq!(mock.call_count(), 4);
}

#[tokio::test]
async fn warm_cache_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let cfg = RunConfig { paths: adscribe_core::pipeline::RunPaths { cache_dir: Some(dir.path().join("cache")), ..fx.config.paths.clone() }, ..fx.config.clone() };
    let (first, _) = run(&cfg, MockConfig::default()).await;
    let before = std::fs::read(cfg.paths.output_dir.join(OUTPUTS_FILE)).unwrap();
    let (second, mock) = run(&cfg, MockConfig::default()).await;
    assert_eq!(mock.call_count(), 0);
    assert_eq!(second.manifest.count(ClipStatus::Cached), 3);
    assert_eq!(first.outputs, second.outputs);
    assert_eq!(before, std::fs::read(cfg.paths.output_dir.join(OUTPUTS_FILE)).unwrap());

    // A corrupted entry is a miss: exactly one clip is regenerated.
    let entry = walk(&dir.path().join("cache")).into_iter().next().unwrap();
    std::fs::write(&entry, "garbage").unwrap();
    let (_, mock) = run(&cfg, MockConfig::default()).await;
    assert_eq!(mock.call_count(), 1);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[tokio::test]
async fn invalid_config_aborts_before_backend() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 2);
    let mut cfg = RunConfig { tau: -1.0, ..fx.config.clone() };
    let mock = Arc::new(MockBackend::new(MockConfig::default()));
    assert!(run_with_backend(&cfg, mock.clone()).await.is_err());
    cfg.tau = 0.6;
    cfg.paths.detections = dir.path().join("missing.jsonl");
    assert!(run_with_backend(&cfg, mock.clone()).await.is_err());
    assert_eq!(mock.call_count(), 0);
}

#[tokio::test]
async fn two_stage_makes_eleven_calls_per_clip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 2);
    let cfg = RunConfig { mode: GenerationMode::TwoStage, ..fx.config.clone() };
    let (summary, mock) = run(&cfg, MockConfig::default()).await;
    assert_eq!(mock.call_count(), 22);
    for clip in ["clip00", "clip01"] {
        let calls: Vec<_> = mock.calls().into_iter().filter(|c| c.clip_id == clip).collect();
        assert_eq!(calls.iter().filter(|c| c.kind == BundleKind::FrameCaption && c.frames.len() == 1).count(), 10);
        let summary_call = calls.iter().find(|c| c.kind == BundleKind::Summary).unwrap();
        assert!(summary_call.frames.is_empty());
        assert!(summary_call.user_text.contains("Frame 10:"));
    }
    assert!(summary.outputs.iter().all(|o| o.word_count == 10 && o.mode == GenerationMode::TwoStage));
}

#[tokio::test]
async fn context_ad_runs_two_full_passes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let cfg = RunConfig { context_ad: true, ..fx.config.clone() };
    let (summary, mock) = run(&cfg, MockConfig::default()).await;
    assert_eq!(mock.call_count(), 6);
    let calls = mock.calls();
    // Pass two starts only after every pass-one call: the first three calls
    // carry no prior ADs.
    let header = adscribe_core::promptgen::PromptTemplate::default().prior_ads_header;
    assert!(calls[..3].iter().all(|c| !c.user_text.contains(&header)));
    let last = calls[3..].iter().find(|c| c.clip_id == "clip02").unwrap();
    assert!(last.user_text.contains(&header));
    // clip02 sees both earlier ADs, clip00 none.
    let first = calls[3..].iter().find(|c| c.clip_id == "clip00").unwrap();
    assert!(!first.user_text.contains(&header));
    assert_eq!(summary.first_pass.as_ref().unwrap().len(), 3);
    assert!(cfg.paths.output_dir.join(FIRST_PASS_FILE).exists());
    assert!(summary.manifest.clips.iter().all(|c| c.first_pass_hash.is_some()));
}

#[tokio::test]
async fn concurrency_bound_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 5);
    let cfg = RunConfig { concurrency: 2, mode: GenerationMode::TwoStage, ..fx.config.clone() };
    let (_, mock) = run(&cfg, MockConfig { delay_ms: 5, ..Default::default() }).await;
    assert_eq!(mock.call_count(), 55);
    assert!(mock.max_in_flight() <= 2, "max in flight {}", mock.max_in_flight());
    assert!(mock.max_in_flight() >= 1);
}

#[tokio::test]
async fn gt_length_policy_uses_reference_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let cfg = RunConfig { length_policy: LengthPolicy::GtLength, ..fx.config.clone() };
    let (summary, _) = run(&cfg, MockConfig::default()).await;
    for (out, gt) in summary.outputs.iter().zip(&fx.ground_truth) {
        assert_eq!(out.word_count, gt.word_count);
    }
}

#[tokio::test]
async fn eval_after_run() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let (_, _) = run(&fx.config, MockConfig::default()).await;
    let report = run_eval(&fx.config, &fx.config.paths.output_dir.join(OUTPUTS_FILE)).unwrap();
    assert_eq!(report.num_clips, 3);
    assert!((0.0..=1.0).contains(&report.rouge_l));
    assert!(fx.config.paths.output_dir.join("eval.json").exists());
    assert!(fx.config.paths.output_dir.join("eval.csv").exists());

    // Perfect outputs score 1.0 ROUGE-L.
    let perfect: Vec<_> = fx
        .ground_truth
        .iter()
        .map(|g| adscribe_core::promptgen::ADOutput::new(&g.clip_id, &g.text, GenerationMode::OneStage, String::new()))
        .collect();
    let path = dir.path().join("perfect.jsonl");
    std::fs::write(&path, perfect.iter().map(|o| serde_json::to_string(o).unwrap() + "\n").collect::<String>()).unwrap();
    let report = run_eval(&fx.config, &path).unwrap();
    assert_eq!(report.rouge_l, 1.0);
    assert_eq!((report.char_recall, report.char_precision), (1.0, 1.0));

    // An output without ground truth is reported by id.
    std::fs::write(&path, r#"{"clip_id":"nope","text":"x","word_count":1,"mode":"one_stage","prompt_hash":""}"#).unwrap();
    let err = run_eval(&fx.config, &path).unwrap_err().to_string();
    assert!(err.contains("nope"), "{err}");
}

#[test]
fn identify_modes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    for mode in [RecognitionMode::TrackletExemplar, RecognitionMode::Tracklet, RecognitionMode::FrameLevel] {
        let cfg = RunConfig { recognition: mode, ..fx.config.clone() };
        let report = run_identify(&cfg).unwrap();
        assert_eq!(report.clips.len(), 3);
        assert!(report.failed.is_empty());
        assert_eq!(report.clips[0].cast_ids.iter().map(String::as_str).collect::<Vec<_>>(), vec!["cast0", "cast1"], "{mode:?}");
        assert_eq!(report.clips[2].cast_ids.len(), 3, "{mode:?}");
        assert!(report.recall.is_some());
    }
}

#[test]
fn annotate_dump_writes_sampled_frames() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 2);
    let out = dir.path().join("annotated");
    assert!(annotate_dump(&fx.config, &out).unwrap().is_empty());
    let files = walk(&out.join("clip00"));
    assert_eq!(files.len(), 10);
    assert!(files[0].file_name().unwrap().to_str().unwrap().starts_with("00_000000"));
}

#[tokio::test]
async fn missing_frames_fail_only_that_clip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    std::fs::remove_dir_all(fx.config.paths.frames_root.join("clip01")).unwrap();
    let (summary, mock) = run(&fx.config, MockConfig::default()).await;
    assert_eq!(summary.manifest.count(ClipStatus::Done), 2);
    assert_eq!(summary.manifest.clips[1].status, ClipStatus::Failed);
    assert_eq!(mock.call_count(), 2);
}

#[tokio::test]
async fn config_file_roundtrip_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 1);
    let text = r#"
        length_policy = "fixed:6"
        [paths]
        clips = "clips.jsonl"
        frames_root = "frames"
        detections = "detections.jsonl"
        subtitles = "subtitles.srt"
        cast = "cast.json"
        gallery = "gallery.jsonl"
        output_dir = "out"
        [backend]
        kind = "mock"
    "#;
    let path = fx.root.join("run.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.paths.clips, fx.root.join("clips.jsonl"));
    let summary = adscribe_core::pipeline::run_pipeline(&cfg).await.unwrap();
    assert_eq!(summary.outputs[0].word_count, 6);
}
