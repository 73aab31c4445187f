//! Hard-cut shot segmentation from joint RGB histograms with a per-clip
//! adaptive threshold. Learned detectors can be plugged in upstream by
//! supplying boundary files instead.

use crate::frame::FrameBuffer;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const HIST_BINS: usize = 512;

/// Distances must also clear this absolute floor to count as a cut.
pub const ABSOLUTE_FLOOR: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum ShotError {
    #[error("histogram length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("boundary {boundary} outside clip of {num_frames} frames")]
    BoundaryOutOfRange { boundary: usize, num_frames: usize },
    #[error("clip has no frames")]
    Empty,
    #[error("boundary file {path}: {msg}")]
    BoundaryFile { path: String, msg: String },
}

/// Half-open frame range `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shot {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Shot {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotParams {
    pub min_shot_len: usize,
    pub k_sigma: f64,
}

impl Default for ShotParams {
    fn default() -> Self {
        Self { min_shot_len: 8, k_sigma: 3.0 }
    }
}

/// 8x8x8 joint RGB histogram (bin width 32), L1-normalized.
pub fn frame_histogram(frame: &FrameBuffer) -> Vec<f64> {
    let mut counts = vec![0u64; HIST_BINS];
    for px in frame.pixels().chunks_exact(3) {
        let bin = ((px[0] >> 5) as usize) * 64 + ((px[1] >> 5) as usize) * 8 + (px[2] >> 5) as usize;
        counts[bin] += 1;
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// L1 distance between two histograms; lies in `[0, 2]` for normalized inputs.
pub fn hist_distance(a: &[f64], b: &[f64]) -> Result<f64, ShotError> {
    if a.len() != b.len() {
        return Err(ShotError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Declares a cut at frame `i` when the distance between frames `i-1` and `i`
/// exceeds both `mean + k_sigma * stddev` of the clip's consecutive distances
/// and [`ABSOLUTE_FLOOR`]. Cuts within `min_shot_len` frames of the previously
/// accepted cut compete; the larger distance survives.
///
/// Because the statistics are per clip, a single cut in a very short clip may
/// not clear a 3-sigma threshold (the z-score of a lone spike among `m`
/// distances is `sqrt(m - 1)`).
pub fn detect_shots(frames: &[FrameBuffer], params: &ShotParams) -> Vec<Shot> {
    if frames.is_empty() {
        return Vec::new();
    }
    let hists: Vec<Vec<f64>> = frames.iter().map(frame_histogram).collect();
    let distances: Vec<f64> = hists
        .windows(2)
        .map(|w| hist_distance(&w[0], &w[1]).expect("fixed histogram length"))
        .collect();
    let boundaries = boundaries_from_distances(&distances, params);
    shots_from_sorted(&boundaries, frames.len())
}

/// `distances[j]` is the distance between frames `j` and `j + 1`, so a cut
/// detected there is reported at frame `j + 1`.
pub fn boundaries_from_distances(distances: &[f64], params: &ShotParams) -> Vec<usize> {
    if distances.is_empty() {
        return Vec::new();
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + params.k_sigma * var.sqrt();

    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (j, &d) in distances.iter().enumerate() {
        if !(d > threshold && d > ABSOLUTE_FLOOR) {
            continue;
        }
        let frame = j + 1;
        match kept.last_mut() {
            Some(last) if frame - last.0 < params.min_shot_len => {
                if d > last.1 {
                    *last = (frame, d);
                }
            }
            _ => kept.push((frame, d)),
        }
    }
    kept.into_iter().map(|(f, _)| f).collect()
}

fn shots_from_sorted(boundaries: &[usize], num_frames: usize) -> Vec<Shot> {
    let mut shots = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries {
        shots.push(Shot { start_frame: start, end_frame: b });
        start = b;
    }
    shots.push(Shot { start_frame: start, end_frame: num_frames });
    shots
}

/// Builds shots from externally supplied cut positions. Zero and duplicate
/// entries are ignored; positions at or past the clip end are rejected.
pub fn shots_from_boundaries(boundaries: &[usize], num_frames: usize) -> Result<Vec<Shot>, ShotError> {
    if num_frames == 0 {
        return Err(ShotError::Empty);
    }
    let mut cuts: Vec<usize> = boundaries.to_vec();
    cuts.sort_unstable();
    cuts.dedup();
    cuts.retain(|&b| b != 0);
    if let Some(&bad) = cuts.iter().find(|&&b| b >= num_frames) {
        return Err(ShotError::BoundaryOutOfRange { boundary: bad, num_frames });
    }
    Ok(shots_from_sorted(&cuts, num_frames))
}

/// Reads a boundary file: a JSON list of frame indices.
pub fn load_boundaries(path: &Path) -> Result<Vec<usize>, ShotError> {
    let err = |msg: String| ShotError::BoundaryFile { path: path.display().to_string(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(c: u8) -> FrameBuffer {
        FrameBuffer::filled(16, 8, [c, c, c])
    }

    fn assert_covers(shots: &[Shot], n: usize) {
        assert_eq!(shots.first().unwrap().start_frame, 0);
        assert_eq!(shots.last().unwrap().end_frame, n);
        for w in shots.windows(2) {
            assert_eq!(w[0].end_frame, w[1].start_frame);
        }
        assert!(shots.iter().all(|s| s.end_frame > s.start_frame));
    }

    #[test]
    fn histogram_single_bins() {
        let h = frame_histogram(&solid(0));
        assert_eq!(h[0], 1.0);
        let h = frame_histogram(&solid(255));
        assert_eq!(h[7 * 64 + 7 * 8 + 7], 1.0);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_half_and_half() {
        let mut f = solid(0);
        f.fill_rect(8, 0, 16, 8, [255, 255, 255]);
        let h = frame_histogram(&f);
        assert_eq!(h[0], 0.5);
        assert_eq!(h[511], 0.5);
    }

    #[test]
    fn distances() {
        let a = frame_histogram(&solid(0));
        assert_eq!(hist_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(hist_distance(&a, &frame_histogram(&solid(255))).unwrap(), 2.0);
        assert!((hist_distance(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        assert!(hist_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn constant_clip_is_one_shot() {
        let frames = vec![solid(90); 40];
        assert_eq!(detect_shots(&frames, &ShotParams::default()), vec![Shot { start_frame: 0, end_frame: 40 }]);
    }

    #[test]
    fn black_to_white_cut_at_20() {
        let frames: Vec<_> = (0..40).map(|i| if i < 20 { solid(0) } else { solid(255) }).collect();
        assert_eq!(
            detect_shots(&frames, &ShotParams::default()),
            vec![Shot { start_frame: 0, end_frame: 20 }, Shot { start_frame: 20, end_frame: 40 }]
        );
    }

    #[test]
    fn single_frame() {
        assert_eq!(detect_shots(&[solid(3)], &ShotParams::default()), vec![Shot { start_frame: 0, end_frame: 1 }]);
    }

    #[test]
    fn close_cuts_keep_the_larger() {
        let mut d = vec![0.0; 60];
        d[19] = 1.0; // cut at 20
        d[23] = 2.0; // cut at 24, within 8 of 20 and larger
        d[39] = 1.5; // cut at 40
        let b = boundaries_from_distances(&d, &ShotParams { min_shot_len: 8, k_sigma: 2.0 });
        assert_eq!(b, vec![24, 40]);
    }

    #[test]
    fn precomputed_boundaries() {
        let shots = shots_from_boundaries(&[30, 10, 0, 10], 40).unwrap();
        assert_eq!(
            shots,
            vec![
                Shot { start_frame: 0, end_frame: 10 },
                Shot { start_frame: 10, end_frame: 30 },
                Shot { start_frame: 30, end_frame: 40 }
            ]
        );
        assert!(shots_from_boundaries(&[40], 40).is_err());
    }

    fn arb_frames() -> impl Strategy<Value = Vec<FrameBuffer>> {
        proptest::collection::vec((0u8..8, 0u8..8, 0u8..8, 0u8..16), 1..40).prop_map(|cs| {
            cs.into_iter()
                .map(|(r, g, b, off)| {
                    let mut f = FrameBuffer::filled(6, 4, [r * 32 + off, g * 32 + off, b * 32 + off]);
                    f.fill_rect(0, 0, 3, 2, [b * 32 + off, r * 32 + off, g * 32 + off]);
                    f
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn shots_cover_clip(frames in arb_frames(), min_len in 1usize..10, k in 0.0f64..4.0) {
            let params = ShotParams { min_shot_len: min_len, k_sigma: k };
            let shots = detect_shots(&frames, &params);
            assert_covers(&shots, frames.len());
            prop_assert_eq!(detect_shots(&frames, &params), shots);
        }

        #[test]
        fn brightness_shift_within_bin_is_invisible(frames in arb_frames(), shift in 0u8..16) {
            let shifted: Vec<FrameBuffer> = frames
                .iter()
                .map(|f| {
                    let px = f.pixels().iter().map(|&v| v + shift).collect();
                    FrameBuffer::new(f.width(), f.height(), px).unwrap()
                })
                .collect();
            let p = ShotParams::default();
            prop_assert_eq!(detect_shots(&frames, &p), detect_shots(&shifted, &p));
        }

        #[test]
        fn precomputed_path_yields_listed_shots(mut cuts in proptest::collection::btree_set(1usize..50, 0..6)) {
            let n = 50;
            let shots = shots_from_boundaries(&cuts.iter().copied().collect::<Vec<_>>(), n).unwrap();
            assert_covers(&shots, n);
            cuts.insert(0);
            let starts: Vec<usize> = shots.iter().map(|s| s.start_frame).collect();
            prop_assert_eq!(starts, cuts.into_iter().collect::<Vec<_>>());
        }
    }
}
