//! Per-shot person tracking by IoU with optimal bipartite association, and
//! the duration/confidence filter that drops background characters.

use crate::assignment::max_weight_assignment;
use crate::faceid::FaceEmbedding;
use crate::ingest::DetectionRecord;
use crate::shotseg::Shot;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Axis-aligned box in pixel coordinates, origin top-left. `x2 > x1` and
/// `y2 > y1` hold for every value built through [`BoundingBox::new`].
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Option<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        (finite && x2 > x1 && y2 > y1).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() as f64 * self.height() as f64
    }

    /// Intersection with the frame rectangle; `None` when nothing is left.
    pub fn clamp(&self, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (width as f32, height as f32);
        Self::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    fn lerp(&self, other: &Self, t: f32) -> Self {
        let mix = |a: f32, b: f32| a + (b - a) * t;
        Self { x1: mix(self.x1, other.x1), y1: mix(self.y1, other.y1), x2: mix(self.x2, other.x2), y2: mix(self.y2, other.y2) }
    }
}

impl TryFrom<[f32; 4]> for BoundingBox {
    type Error = String;
    fn try_from(v: [f32; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3]).ok_or_else(|| format!("degenerate box {v:?}"))
    }
}

impl From<BoundingBox> for [f32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub iou_min: f64,
    /// Frames a track may go unmatched before it terminates.
    pub max_coast: usize,
    pub min_len: usize,
    pub min_conf: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self { iou_min: 0.3, max_coast: 1, min_len: 5, min_conf: 0.5 }
    }
}

/// A contiguous, single-shot trajectory of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub tracklet_id: u64,
    pub shot: Shot,
    pub boxes: BTreeMap<usize, BoundingBox>,
    pub confidences: BTreeMap<usize, f32>,
    pub face_embeddings: BTreeMap<usize, FaceEmbedding>,
    /// Index into the shot's detection slice for each observed (non-coasted) frame.
    pub sources: BTreeMap<usize, usize>,
    pub cast_id: Option<String>,
    pub name: Option<String>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.boxes.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.boxes.keys().next_back().copied()
    }

    pub fn covers(&self, frame: usize) -> bool {
        self.boxes.contains_key(&frame)
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.values().map(|&c| c as f64).sum::<f64>() / self.confidences.len() as f64
    }

    pub fn faces(&self) -> impl Iterator<Item = &FaceEmbedding> {
        self.face_embeddings.values()
    }
}

/// Track state visible to the association step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveTrack {
    pub id: u64,
    pub last_box: BoundingBox,
    pub first_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(track index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

impl Assignment {
    pub fn total_iou(&self, tracks: &[ActiveTrack], detections: &[BoundingBox]) -> f64 {
        self.matches.iter().map(|&(t, d)| iou(&tracks[t].last_box, &detections[d])).sum()
    }
}

/// One-to-one association maximizing summed IoU. Pairs below `iou_min` never
/// match. Among equal-IoU solutions older tracks, then lower ids, win.
pub fn associate_frame(tracks: &[ActiveTrack], detections: &[BoundingBox], iou_min: f64) -> Assignment {
    let mut out = Assignment::default();
    if tracks.is_empty() || detections.is_empty() {
        out.unmatched_tracks = (0..tracks.len()).collect();
        out.unmatched_detections = (0..detections.len()).collect();
        return out;
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&t| (tracks[t].first_frame, tracks[t].id));
    let mut seniority = vec![0.0; tracks.len()];
    for (rank, &t) in order.iter().enumerate() {
        seniority[t] = (tracks.len() - rank) as f64;
    }
    // Tie-break bonus stays far below any meaningful IoU difference.
    let eps = 1e-10 / (tracks.len() * tracks.len()) as f64;

    let ious: Vec<Vec<f64>> =
        tracks.iter().map(|t| detections.iter().map(|d| iou(&t.last_box, d)).collect()).collect();
    let weights: Vec<Vec<f64>> = ious
        .iter()
        .enumerate()
        .map(|(t, row)| row.iter().map(|&v| if v >= iou_min && v > 0.0 { v + eps * seniority[t] } else { 0.0 }).collect())
        .collect();

    let solution = max_weight_assignment(&weights);
    let mut det_used = vec![false; detections.len()];
    for (t, col) in solution.into_iter().enumerate() {
        match col {
            Some(d) if weights[t][d] > 0.0 => {
                out.matches.push((t, d));
                det_used[d] = true;
            }
            _ => out.unmatched_tracks.push(t),
        }
    }
    out.unmatched_detections = (0..detections.len()).filter(|&d| !det_used[d]).collect();
    out
}

struct Building {
    track: ActiveTrack,
    missed: usize,
    last_frame: usize,
    last_conf: f32,
    tracklet: Tracklet,
}

/// Tracks people through one shot. `detections` must be sorted by frame;
/// records outside the shot are ignored. Tracklet ids are assigned from
/// `first_id` upward in order of creation.
pub fn build_tracklets(detections: &[DetectionRecord], shot: Shot, params: &TrackerParams, first_id: u64) -> Vec<Tracklet> {
    let mut next_id = first_id;
    let mut active: Vec<Building> = Vec::new();
    let mut done: Vec<Tracklet> = Vec::new();

    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        if shot.contains(d.frame_idx as usize) {
            by_frame.entry(d.frame_idx as usize).or_default().push(i);
        }
    }

    for frame in shot.start_frame..shot.end_frame {
        let idxs = by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let boxes: Vec<BoundingBox> = idxs.iter().map(|&i| detections[i].person_box).collect();
        let tracks: Vec<ActiveTrack> = active.iter().map(|b| b.track).collect();
        let a = associate_frame(&tracks, &boxes, params.iou_min);

        for &(t, d) in &a.matches {
            let rec = &detections[idxs[d]];
            let b = &mut active[t];
            // Fill coasted frames so the tracklet stays contiguous.
            let gap = frame - b.last_frame;
            for k in 1..gap {
                let f = b.last_frame + k;
                let t = k as f32 / gap as f32;
                b.tracklet.boxes.insert(f, b.track.last_box.lerp(&rec.person_box, t));
                b.tracklet.confidences.insert(f, b.last_conf + (rec.confidence - b.last_conf) * t);
            }
            attach(&mut b.tracklet, frame, idxs[d], rec);
            b.track.last_box = rec.person_box;
            b.last_frame = frame;
            b.last_conf = rec.confidence;
            b.missed = 0;
        }
        for &t in &a.unmatched_tracks {
            active[t].missed += 1;
        }
        let (alive, expired): (Vec<_>, Vec<_>) = active.into_iter().partition(|b| b.missed <= params.max_coast);
        done.extend(expired.into_iter().map(|b| b.tracklet));
        active = alive;

        for &d in &a.unmatched_detections {
            let rec = &detections[idxs[d]];
            let id = next_id;
            next_id += 1;
            let mut tracklet = Tracklet {
                tracklet_id: id,
                shot,
                boxes: BTreeMap::new(),
                confidences: BTreeMap::new(),
                face_embeddings: BTreeMap::new(),
                sources: BTreeMap::new(),
                cast_id: None,
                name: None,
            };
            attach(&mut tracklet, frame, idxs[d], rec);
            active.push(Building {
                track: ActiveTrack { id, last_box: rec.person_box, first_frame: frame },
                missed: 0,
                last_frame: frame,
                last_conf: rec.confidence,
                tracklet,
            });
        }
    }
    done.extend(active.into_iter().map(|b| b.tracklet));
    done.sort_by_key(|t| t.tracklet_id);
    done
}

fn attach(t: &mut Tracklet, frame: usize, source: usize, rec: &DetectionRecord) {
    t.boxes.insert(frame, rec.person_box);
    t.confidences.insert(frame, rec.confidence);
    t.sources.insert(frame, source);
    if let Some(face) = rec.face_embedding.as_deref().and_then(FaceEmbedding::from_raw) {
        t.face_embeddings.insert(frame, face);
    }
}

/// Keeps tracklets at least `min_len` frames long with mean confidence of at
/// least `min_conf`.
pub fn filter_tracklets(tracklets: Vec<Tracklet>, min_len: usize, min_conf: f64) -> Vec<Tracklet> {
    tracklets.into_iter().filter(|t| t.len() >= min_len && t.mean_confidence() >= min_conf).collect()
}

/// Tracks every shot of a clip and filters the result. `detections` need not
/// be sorted. Ids are unique within the clip.
pub fn track_clip(detections: &[DetectionRecord], shots: &[Shot], params: &TrackerParams) -> Vec<Tracklet> {
    let mut sorted: Vec<DetectionRecord> = detections.to_vec();
    sorted.sort_by_key(|d| d.frame_idx);
    let mut out = Vec::new();
    let mut next_id = 0;
    for &shot in shots {
        let lo = sorted.partition_point(|d| (d.frame_idx as usize) < shot.start_frame);
        let hi = sorted.partition_point(|d| (d.frame_idx as usize) < shot.end_frame);
        let built = build_tracklets(&sorted[lo..hi], shot, params, next_id);
        next_id = built.iter().map(|t| t.tracklet_id + 1).max().unwrap_or(next_id);
        out.extend(filter_tracklets(built, params.min_len, params.min_conf));
    }
    out
}
