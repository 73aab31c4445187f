//! Deterministic synthetic data: an on-disk clip fixture for end-to-end runs
//! and an in-memory face-drift benchmark for comparing recognition modes.

use crate::annotate::sample_frames;
use crate::backend::{BackendConfig, MockConfig};
use crate::faceid::{FaceEmbedding, RecognitionMode};
use crate::frame::FrameBuffer;
use crate::ingest::{format_srt, word_count, CastMember, DetectionRecord, GroundTruthAD, MovieClip, Subtitle, EMBEDDING_DIM};
use crate::metrics::char_pr;
use crate::pipeline::{identify_clip, movie_gallery, tracklet_faces, RunConfig, RunPaths};
use crate::promptgen::LengthPolicy;
use crate::shotseg::Shot;
use crate::tracker::{track_clip, BoundingBox, TrackerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let mut v = gaussian(rng, dim);
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// `center + sigma * g` renormalized, with `g` isotropic of expected norm 1.
pub fn perturb(center: &[f32], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let scale = sigma / (center.len() as f64).sqrt();
    let mut v: Vec<f64> = center.iter().zip(gaussian(rng, center.len())).map(|(&c, g)| c as f64 + scale * g).collect();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// A unit vector whose cosine distance to the unit vector `center` is exactly `d`.
pub fn at_distance(center: &[f32], d: f64, rng: &mut impl Rng) -> Vec<f32> {
    let c: Vec<f64> = center.iter().map(|&x| x as f64).collect();
    let mut u = gaussian(rng, c.len());
    let proj: f64 = u.iter().zip(&c).map(|(a, b)| a * b).sum();
    u.iter_mut().zip(&c).for_each(|(a, b)| *a -= proj * b);
    normalize(&mut u);
    let cos = 1.0 - d;
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let mut v: Vec<f64> = c.iter().zip(&u).map(|(a, b)| cos * a + sin * b).collect();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

// ---------------------------------------------------------------------------
// On-disk fixture

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub width: u32,
    pub height: u32,
    pub subtitles_per_clip: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { num_clips: 5, frames_per_clip: 40, width: 96, height: 64, subtitles_per_clip: 3, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub config: RunConfig,
    pub clips: Vec<MovieClip>,
    pub subtitles: Vec<Subtitle>,
    pub cast: Vec<CastMember>,
    pub ground_truth: Vec<GroundTruthAD>,
    /// Frame index of the single cut in every clip.
    pub cut_frame: usize,
}

pub const FIXTURE_MOVIE: &str = "movie1";
pub const FIXTURE_TITLE: &str = "The Quiet Harbour";
const CHARACTERS: [(&str, &str); 3] = [("Amy Dunne", "Rosa Park"), ("Nick Dunne", "Ben Ford"), ("Margo Dunne", "Carrie Lee")];
const PERSON_COLORS: [[u8; 3]; 3] = [[220, 60, 60], [60, 200, 90], [240, 230, 70]];
const GT_TEXTS: [&str; 5] = [
    "Amy opens the front door and steps into the rain.",
    "Nick sits alone at the kitchen table.",
    "Margo pours two glasses of whisky at the bar.",
    "Amy and Nick stare at each other across the room.",
    "Nick walks down the pier as the sun sets.",
];

#[derive(Serialize)]
struct DetectionLine<'a> {
    clip_id: &'a str,
    #[serde(flatten)]
    record: &'a DetectionRecord,
}

#[derive(Serialize)]
struct GalleryLine<'a> {
    cast_id: &'a str,
    kind: &'a str,
    embedding: &'a [f32],
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, &item)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

/// Which cast members are on screen in each half of clip `i`.
fn fixture_people(i: usize) -> [Vec<usize>; 2] {
    match i % 3 {
        0 => [vec![0, 1], vec![1]],
        1 => [vec![1], vec![0, 2]],
        _ => [vec![2], vec![0, 1, 2]],
    }
}

/// Writes clips, frames, detections, gallery, cast, subtitles and ground
/// truth under `root`, plus a config using the echo mock backend.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> std::io::Result<Fixture> {
    let mut rng = rng(spec.seed);
    std::fs::create_dir_all(root)?;
    let frames_root = root.join("frames");
    let centers: Vec<Vec<f32>> = (0..CHARACTERS.len()).map(|_| random_unit(&mut rng, EMBEDDING_DIM)).collect();
    let cast: Vec<CastMember> = CHARACTERS
        .iter()
        .enumerate()
        .map(|(i, (character, actor))| CastMember {
            cast_id: format!("cast{i}"),
            actor_name: actor.to_string(),
            character_name: character.to_string(),
            profile_image: PathBuf::from(format!("profiles/cast{i}.jpg")),
        })
        .collect();

    let cut = spec.frames_per_clip / 2;
    let fps = 10.0;
    let clip_len_s = spec.frames_per_clip as f64 / fps;
    let mut clips = Vec::new();
    let mut subtitles = Vec::new();
    let mut ground_truth = Vec::new();
    let mut detections: Vec<(String, DetectionRecord)> = Vec::new();
    let slot_w = spec.width / 3;
    for i in 0..spec.num_clips {
        let clip_id = format!("clip{i:02}");
        let start_s = 5.0 + i as f64 * (clip_len_s + 6.0);
        clips.push(MovieClip {
            clip_id: clip_id.clone(),
            movie_id: FIXTURE_MOVIE.into(),
            movie_title: Some(FIXTURE_TITLE.into()),
            start_s,
            end_s: start_s + clip_len_s,
            fps,
            frame_dir: None,
        });
        let text = GT_TEXTS[i % GT_TEXTS.len()];
        ground_truth.push(GroundTruthAD {
            clip_id: clip_id.clone(),
            start_s: start_s + 0.5,
            end_s: start_s + 3.0,
            text: text.into(),
            word_count: word_count(text),
        });
        // Subtitles fall in the gap before each clip.
        for s in 0..spec.subtitles_per_clip {
            let t = start_s - 4.5 + s as f64 * 1.2;
            let index = subtitles.len() as u32 + 1;
            subtitles.push(Subtitle { index, start_s: t, end_s: t + 1.0, text: format!("Line {index} before {clip_id}.") });
        }

        let dir = frames_root.join(&clip_id);
        std::fs::create_dir_all(&dir)?;
        let people = fixture_people(i);
        for f in 0..spec.frames_per_clip {
            let half = usize::from(f >= cut);
            let bg = if half == 0 { [30, 30, 90] } else { [200, 120, 40] };
            let mut frame = FrameBuffer::filled(spec.width, spec.height, bg);
            for &p in &people[half] {
                let x0 = p as u32 * slot_w + 4;
                let (x1, y0, y1) = (x0 + slot_w - 8, spec.height / 4, spec.height - 4);
                frame.fill_rect(x0 as i64, y0 as i64, x1 as i64, y1 as i64, PERSON_COLORS[p]);
                let record = DetectionRecord {
                    frame_idx: f as u32,
                    person_box: BoundingBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32).expect("valid box"),
                    confidence: 0.9,
                    face_box: BoundingBox::new(x0 as f32 + 2.0, y0 as f32, x1 as f32 - 2.0, y0 as f32 + 10.0),
                    face_embedding: Some(perturb(&centers[p], 0.3, &mut rng)),
                };
                detections.push((clip_id.clone(), record));
            }
            frame.save_png(&dir.join(format!("{f:05}.png"))).map_err(std::io::Error::other)?;
        }
    }

    write_lines(&root.join("clips.jsonl"), &clips)?;
    write_lines(&root.join("detections.jsonl"), detections.iter().map(|(c, r)| DetectionLine { clip_id: c, record: r }))?;
    write_lines(&root.join("ground_truth.jsonl"), &ground_truth)?;
    let gallery: Vec<Vec<f32>> = centers.iter().map(|c| at_distance(c, 0.1, &mut rng)).collect();
    write_lines(
        &root.join("gallery.jsonl"),
        cast.iter().zip(&gallery).map(|(c, e)| GalleryLine { cast_id: &c.cast_id, kind: "original", embedding: e }),
    )?;
    std::fs::write(root.join("cast.json"), serde_json::to_string_pretty(&cast)?)?;
    std::fs::write(root.join("subtitles.srt"), format_srt(&subtitles))?;

    let config = RunConfig {
        paths: RunPaths {
            clips: root.join("clips.jsonl"),
            frames_root,
            detections: root.join("detections.jsonl"),
            subtitles: Some(root.join("subtitles.srt")),
            cast: Some(root.join("cast.json")),
            gallery: Some(root.join("gallery.jsonl")),
            ground_truth: Some(root.join("ground_truth.jsonl")),
            output_dir: root.join("out"),
            ..Default::default()
        },
        length_policy: LengthPolicy::Fixed(10),
        backend: BackendConfig::Mock(MockConfig::default()),
        retry: crate::backend::RetryPolicy { max_retries: 3, base_delay_ms: 1, max_delay_ms: 4 },
        ..Default::default()
    };
    Ok(Fixture { root: root.to_path_buf(), config, clips, subtitles, cast, ground_truth, cut_frame: cut })
}

// ---------------------------------------------------------------------------
// Face-drift benchmark

/// Knobs of the drift benchmark. Every cast member has an in-movie face
/// cluster; its profile embedding sits at a fixed cosine distance from the
/// cluster centre, drawn from `near_drift` or (with probability
/// `far_fraction`) from `far_drift`.
#[derive(Debug, Clone)]
pub struct DriftParams {
    pub movies: usize,
    pub clips_per_movie: usize,
    pub casts_per_movie: usize,
    pub frames_per_clip: usize,
    pub max_people_per_clip: usize,
    /// Probability that an on-screen person has a detected face on a frame.
    pub face_presence: f64,
    /// Probability that a detected face is pure noise.
    pub occlusion: f64,
    pub face_noise: f64,
    pub far_fraction: f64,
    pub near_drift: (f64, f64),
    pub far_drift: (f64, f64),
    /// Probability that a clip also shows an uncast extra.
    pub extra_prob: f64,
    pub seed: u64,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            movies: 4,
            clips_per_movie: 15,
            casts_per_movie: 6,
            frames_per_clip: 60,
            max_people_per_clip: 3,
            face_presence: 0.5,
            occlusion: 0.3,
            face_noise: 0.5,
            far_fraction: 0.15,
            near_drift: (0.05, 0.2),
            far_drift: (0.6, 0.7),
            extra_prob: 0.3,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriftClip {
    pub clip_id: String,
    pub movie_id: String,
    pub num_frames: usize,
    pub detections: Vec<DetectionRecord>,
    /// Cast on screen during at least one sampled frame.
    pub truth: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct DriftBenchmark {
    /// Per movie, the profile embeddings of its cast.
    pub originals: BTreeMap<String, Vec<(String, Vec<FaceEmbedding>)>>,
    pub clips: Vec<DriftClip>,
    pub num_sampled: usize,
}

pub fn drift_benchmark(p: &DriftParams) -> DriftBenchmark {
    let mut rng = rng(p.seed);
    let num_sampled = 10;
    let sampled = sample_frames(p.frames_per_clip, num_sampled);
    let mut originals = BTreeMap::new();
    let mut clips = Vec::new();
    for m in 0..p.movies {
        let movie_id = format!("m{m}");
        let centers: Vec<Vec<f32>> = (0..p.casts_per_movie).map(|_| random_unit(&mut rng, EMBEDDING_DIM)).collect();
        let gallery = centers
            .iter()
            .enumerate()
            .map(|(c, center)| {
                let (lo, hi) = if rng.random_bool(p.far_fraction) { p.far_drift } else { p.near_drift };
                let d = rng.random_range(lo..=hi);
                let e = FaceEmbedding::from_raw(&at_distance(center, d, &mut rng)).expect("unit vector");
                (format!("{movie_id}_c{c}"), vec![e])
            })
            .collect::<Vec<_>>();
        originals.insert(movie_id.clone(), gallery);

        for k in 0..p.clips_per_movie {
            let clip_id = format!("{movie_id}_clip{k:02}");
            let n_people = rng.random_range(1..=p.max_people_per_clip.min(p.casts_per_movie));
            let mut who: Vec<Option<usize>> = rand::seq::index::sample(&mut rng, p.casts_per_movie, n_people).into_iter().map(Some).collect();
            if rng.random_bool(p.extra_prob) {
                who.push(None);
            }
            let mut detections = Vec::new();
            let mut truth = BTreeSet::new();
            for (slot, person) in who.iter().enumerate() {
                let len = rng.random_range(10..=30.min(p.frames_per_clip));
                let start = rng.random_range(0..=p.frames_per_clip - len);
                let range = start..start + len;
                let extra_center = random_unit(&mut rng, EMBEDDING_DIM);
                let center = person.map_or(&extra_center, |c| &centers[c]);
                if let Some(c) = person {
                    if sampled.iter().any(|f| range.contains(f)) {
                        truth.insert(format!("{movie_id}_c{c}"));
                    }
                }
                let x0 = 20.0 + slot as f32 * 150.0;
                for f in range {
                    let jitter = rng.random_range(-1.0f32..=1.0);
                    let face_embedding = rng.random_bool(p.face_presence).then(|| {
                        if rng.random_bool(p.occlusion) {
                            random_unit(&mut rng, EMBEDDING_DIM)
                        } else {
                            perturb(center, p.face_noise, &mut rng)
                        }
                    });
                    detections.push(DetectionRecord {
                        frame_idx: f as u32,
                        person_box: BoundingBox::new(x0 + jitter, 40.0, x0 + 100.0 + jitter, 300.0).expect("valid box"),
                        confidence: rng.random_range(0.75f32..0.95),
                        face_box: None,
                        face_embedding,
                    });
                }
            }
            detections.sort_by_key(|d| d.frame_idx);
            clips.push(DriftClip { clip_id, movie_id: movie_id.clone(), num_frames: p.frames_per_clip, detections, truth });
        }
    }
    DriftBenchmark { originals, clips, num_sampled }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftScore {
    pub recall: f64,
    pub precision: f64,
}

/// Runs tracking and identification for every clip under `mode` and scores
/// the identity sets against the benchmark truth.
pub fn evaluate_drift(bench: &DriftBenchmark, mode: RecognitionMode, tracker: &TrackerParams, k: usize, tau: f64) -> DriftScore {
    let mut tracked = HashMap::new();
    for c in &bench.clips {
        let shots = [Shot { start_frame: 0, end_frame: c.num_frames }];
        tracked.insert(c.clip_id.as_str(), track_clip(&c.detections, &shots, tracker));
    }
    let mut preds = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let no_names = HashMap::new();
    for (movie_id, originals) in &bench.originals {
        let movie_clips: Vec<&DriftClip> = bench.clips.iter().filter(|c| &c.movie_id == movie_id).collect();
        let queries = tracklet_faces(movie_clips.iter().flat_map(|c| &tracked[c.clip_id.as_str()]));
        let gallery = movie_gallery(originals, &queries, mode, k, None).expect("non-empty originals");
        for c in movie_clips {
            let sampled = sample_frames(c.num_frames, bench.num_sampled);
            let id = identify_clip(&tracked[c.clip_id.as_str()], &c.detections, &sampled, &gallery, &no_names, mode, tau);
            preds.insert(c.clip_id.clone(), id.cast_ids);
            truth.insert(c.clip_id.clone(), c.truth.clone());
        }
    }
    let (recall, precision) = char_pr(&preds, &truth).expect("same keys");
    DriftScore { recall, precision }
}
