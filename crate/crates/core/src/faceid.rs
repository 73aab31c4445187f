//! Tracklet-level character identification against a cast gallery.
//!
//! Each cast member starts with the embeddings of their profile images. The
//! gallery is then augmented with the `K` in-movie query faces closest to
//! those originals (exemplars), which absorbs age and make-up differences
//! between profile photos and the footage. A tracklet is named after the cast
//! member whose combined embeddings have the smallest *mean pairwise* cosine
//! distance to all of the tracklet's faces, provided that mean is below `tau`.

use crate::tracker::Tracklet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FaceIdError {
    #[error("cast {0} has no original embeddings")]
    NoOriginals(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("gallery file {path}:{line}: {msg}")]
    GalleryFile { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// L2-normalized face embedding (`|v| = 1 +- 1e-6`).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding(Vec<f32>);

impl FaceEmbedding {
    /// Normalizes a raw vector; `None` for zero or non-finite input.
    pub fn from_raw(raw: &[f32]) -> Option<Self> {
        let norm = raw.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        Some(Self(raw.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

/// Cosine distance `1 - a.b`, in `[0, 2]`.
pub fn embed_distance(a: &FaceEmbedding, b: &FaceEmbedding) -> f64 {
    1.0 - a.dot(b)
}

/// Indices and distances of the `k` queries nearest to any of `originals`,
/// ascending by distance with ties broken by query index. With `cutoff`,
/// queries farther than it are never selected.
pub fn rank_exemplars(
    originals: &[FaceEmbedding],
    queries: &[FaceEmbedding],
    k: usize,
    cutoff: Option<f64>,
) -> Vec<(usize, f64)> {
    if k == 0 || originals.is_empty() {
        return Vec::new();
    }
    let mut scored: Vec<(usize, f64)> = queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let d = originals.iter().map(|o| embed_distance(o, q)).fold(f64::INFINITY, f64::min);
            (qi, d)
        })
        .filter(|&(_, d)| cutoff.is_none_or(|c| d <= c))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// The `k` query embeddings closest to a cast member's originals.
pub fn mine_exemplars(originals: &[FaceEmbedding], queries: &[FaceEmbedding], k: usize) -> Vec<FaceEmbedding> {
    rank_exemplars(originals, queries, k, None).into_iter().map(|(i, _)| queries[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CastEntry {
    pub cast_id: String,
    pub original: Vec<FaceEmbedding>,
    pub exemplars: Vec<FaceEmbedding>,
}

impl CastEntry {
    /// Originals followed by exemplars.
    pub fn combined(&self) -> impl Iterator<Item = &FaceEmbedding> {
        self.original.iter().chain(&self.exemplars)
    }

    pub fn combined_len(&self) -> usize {
        self.original.len() + self.exemplars.len()
    }
}

/// Per-cast reference embeddings. Order is the cast order and decides ties.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CastGallery {
    pub entries: Vec<CastEntry>,
}

impl CastGallery {
    /// A gallery with no exemplars.
    pub fn from_originals(originals: Vec<(String, Vec<FaceEmbedding>)>) -> Result<Self, FaceIdError> {
        let entries = originals
            .into_iter()
            .map(|(cast_id, original)| {
                if original.is_empty() {
                    return Err(FaceIdError::NoOriginals(cast_id));
                }
                Ok(CastEntry { cast_id, original, exemplars: Vec::new() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.cast_id.as_str())
    }

    /// Copy of this gallery with exemplars removed.
    pub fn originals_only(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| CastEntry { cast_id: e.cast_id.clone(), original: e.original.clone(), exemplars: Vec::new() })
                .collect(),
        }
    }
}

/// Mines up to `k` exemplars per cast member from `all_queries`. A query may
/// become an exemplar of several cast members.
pub fn build_cast_gallery(
    originals: Vec<(String, Vec<FaceEmbedding>)>,
    all_queries: &[FaceEmbedding],
    k: usize,
    cutoff: Option<f64>,
) -> Result<CastGallery, FaceIdError> {
    let mut gallery = CastGallery::from_originals(originals)?;
    gallery.entries.par_iter_mut().for_each(|entry| {
        entry.exemplars = rank_exemplars(&entry.original, all_queries, k, cutoff)
            .into_iter()
            .map(|(i, _)| all_queries[i].clone())
            .collect();
    });
    Ok(gallery)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityAssignment {
    pub tracklet_id: u64,
    pub cast_id: Option<String>,
    /// Mean distance to the best cast; `+inf` for tracklets without faces.
    pub mean_distance: f64,
}

/// Mean over every (gallery embedding, face) pair of the cosine distance.
pub fn mean_pairwise_distance<'a>(gallery: impl Iterator<Item = &'a FaceEmbedding>, faces: &[&FaceEmbedding]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for g in gallery {
        for f in faces {
            sum += embed_distance(g, f);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Best cast index and its mean distance for a set of faces. Ties go to the
/// lowest cast index. `None` when there are no faces or no casts.
pub fn best_cast(faces: &[&FaceEmbedding], gallery: &CastGallery) -> Option<(usize, f64)> {
    if faces.is_empty() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in gallery.entries.iter().enumerate() {
        let d = mean_pairwise_distance(entry.combined(), faces);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

pub fn match_tracklet(tracklet: &Tracklet, gallery: &CastGallery, tau: f64) -> Result<IdentityAssignment, FaceIdError> {
    if gallery.is_empty() {
        return Err(FaceIdError::EmptyGallery);
    }
    let faces: Vec<&FaceEmbedding> = tracklet.faces().collect();
    let (cast_id, mean_distance) = match best_cast(&faces, gallery) {
        None => (None, f64::INFINITY),
        Some((i, d)) => ((d < tau).then(|| gallery.entries[i].cast_id.clone()), d),
    };
    Ok(IdentityAssignment { tracklet_id: tracklet.tracklet_id, cast_id, mean_distance })
}

/// One assignment per tracklet, in input order. Several tracklets may share
/// a cast member. An empty gallery leaves every tracklet unassigned.
pub fn assign_identities(tracklets: &[Tracklet], gallery: &CastGallery, tau: f64) -> Vec<IdentityAssignment> {
    tracklets
        .par_iter()
        .map(|t| {
            match_tracklet(t, gallery, tau).unwrap_or(IdentityAssignment {
                tracklet_id: t.tracklet_id,
                cast_id: None,
                mean_distance: f64::INFINITY,
            })
        })
        .collect()
}

/// Per-face identification without tracking: every face is matched on its
/// own and the clip's identity set is the union of the matches.
pub fn identify_faces_independently(faces: &[&FaceEmbedding], gallery: &CastGallery, tau: f64) -> BTreeSet<String> {
    faces
        .iter()
        .filter_map(|f| match best_cast(&[*f], gallery) {
            Some((i, d)) if d < tau => Some(gallery.entries[i].cast_id.clone()),
            _ => None,
        })
        .collect()
}

/// Which identification strategy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionMode {
    /// Tracklet matching against originals plus mined exemplars.
    #[default]
    TrackletExemplar,
    /// Tracklet matching against originals only.
    Tracklet,
    /// Independent per-face matching against originals, no tracking.
    FrameLevel,
}

impl std::str::FromStr for RecognitionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tracklet_exemplar" => Ok(Self::TrackletExemplar),
            "tracklet" => Ok(Self::Tracklet),
            "frame_level" => Ok(Self::FrameLevel),
            other => Err(format!("unknown recognition mode {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Gallery interchange: JSON-lines of {cast_id, kind, embedding}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Original,
    Exemplar,
}

#[derive(Serialize, Deserialize)]
struct GalleryLine {
    cast_id: String,
    kind: EmbeddingKind,
    embedding: Vec<f32>,
}

/// Reads a gallery file. Casts appear in first-seen order.
pub fn load_gallery(path: &Path) -> Result<Vec<(String, Vec<FaceEmbedding>, Vec<FaceEmbedding>)>, FaceIdError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| FaceIdError::Io { path: p.clone(), source })?;
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, (Vec<FaceEmbedding>, Vec<FaceEmbedding>)> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| FaceIdError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| FaceIdError::GalleryFile { path: p.clone(), line: i + 1, msg };
        let rec: GalleryLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.embedding.len() != crate::ingest::EMBEDDING_DIM {
            return Err(err(format!("embedding has {} values", rec.embedding.len())));
        }
        let emb = FaceEmbedding::from_raw(&rec.embedding).ok_or_else(|| err("zero or non-finite embedding".into()))?;
        let slot = map.entry(rec.cast_id.clone()).or_insert_with(|| {
            order.push(rec.cast_id.clone());
            Default::default()
        });
        match rec.kind {
            EmbeddingKind::Original => slot.0.push(emb),
            EmbeddingKind::Exemplar => slot.1.push(emb),
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (o, e) = map.remove(&id).expect("recorded");
            (id, o, e)
        })
        .collect())
}

pub fn dump_gallery(gallery: &CastGallery, path: &Path) -> Result<(), FaceIdError> {
    let p = path.display().to_string();
    let io = |source| FaceIdError::Io { path: p.clone(), source };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for entry in &gallery.entries {
        let lines = entry
            .original
            .iter()
            .map(|e| (EmbeddingKind::Original, e))
            .chain(entry.exemplars.iter().map(|e| (EmbeddingKind::Exemplar, e)));
        for (kind, emb) in lines {
            let line = GalleryLine { cast_id: entry.cast_id.clone(), kind, embedding: emb.as_slice().to_vec() };
            serde_json::to_writer(&mut w, &line).expect("serializable");
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shotseg::Shot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 16;

    fn basis(i: usize) -> FaceEmbedding {
        let mut v = vec![0.0; D];
        v[i] = 1.0;
        FaceEmbedding::from_raw(&v).unwrap()
    }

    fn mix(parts: &[(usize, f32)]) -> FaceEmbedding {
        let mut v = vec![0.0; D];
        for &(i, w) in parts {
            v[i] += w;
        }
        FaceEmbedding::from_raw(&v).unwrap()
    }

    fn tracklet_with(id: u64, faces: Vec<FaceEmbedding>) -> Tracklet {
        let mut t = Tracklet {
            tracklet_id: id,
            shot: Shot { start_frame: 0, end_frame: 100 },
            boxes: Default::default(),
            confidences: Default::default(),
            face_embeddings: Default::default(),
            sources: Default::default(),
            cast_id: None,
            name: None,
        };
        for (f, e) in faces.into_iter().enumerate() {
            t.boxes.insert(f, crate::tracker::BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
            t.face_embeddings.insert(f, e);
        }
        t
    }

    /// Independent pairwise-mean oracle over raw f64 vectors.
    fn oracle(faces: &[Vec<f64>], casts: &[Vec<Vec<f64>>], tau: f64) -> (Option<usize>, f64) {
        if faces.is_empty() {
            return (None, f64::INFINITY);
        }
        let ds: Vec<f64> = casts
            .iter()
            .map(|g| {
                let mut acc = Vec::new();
                for a in g {
                    for b in faces {
                        acc.push(1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>());
                    }
                }
                acc.iter().sum::<f64>() / acc.len() as f64
            })
            .collect();
        let mut best = 0;
        for i in 1..ds.len() {
            if ds[i] < ds[best] {
                best = i;
            }
        }
        ((ds[best] < tau).then_some(best), ds[best])
    }

    fn to_f64(e: &FaceEmbedding) -> Vec<f64> {
        e.as_slice().iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn normalization() {
        let e = FaceEmbedding::from_raw(&[3.0, 4.0]).unwrap();
        assert!((e.dot(&e) - 1.0).abs() < 1e-6);
        assert!(FaceEmbedding::from_raw(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn distance_cases() {
        assert!(embed_distance(&basis(0), &basis(0)).abs() < 1e-12);
        assert!((embed_distance(&basis(0), &basis(1)) - 1.0).abs() < 1e-12);
        let a = FaceEmbedding::from_raw(&[1.0, 0.0]).unwrap();
        let b = FaceEmbedding::from_raw(&[0.8, 0.6]).unwrap();
        assert!((embed_distance(&a, &b) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn mining_exact_copy_first() {
        let o = basis(0);
        let q = vec![basis(1), basis(0), mix(&[(0, 1.0), (1, 1.0)])];
        assert_eq!(mine_exemplars(&[o.clone()], &q, 1), vec![basis(0)]);
        assert!(mine_exemplars(&[o], &q, 0).is_empty());
    }

    #[test]
    fn mining_sorted_by_distance() {
        // dot products 0.6, 0.9, 0.7 -> distances 0.4, 0.1, 0.3
        let o = FaceEmbedding::from_raw(&[1.0, 0.0]).unwrap();
        let at = |c: f32| FaceEmbedding::from_raw(&[c, (1.0 - c * c).sqrt()]).unwrap();
        let q = vec![at(0.6), at(0.9), at(0.7)];
        let ranked = rank_exemplars(&[o.clone()], &q, 2, None);
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!((ranked[0].1 - 0.1).abs() < 1e-6 && (ranked[1].1 - 0.3).abs() < 1e-6);
        assert_eq!(mine_exemplars(&[o], &q, 2), vec![q[1].clone(), q[2].clone()]);
    }

    #[test]
    fn mining_uses_min_over_originals_and_ties_by_index() {
        let originals = [basis(0), basis(1)];
        let q = vec![basis(2), basis(1), basis(0)];
        let ranked = rank_exemplars(&originals, &q, 3, None);
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn mining_cutoff() {
        let q = vec![basis(1), mix(&[(0, 1.0), (1, 0.1)])];
        assert_eq!(rank_exemplars(&[basis(0)], &q, 5, Some(0.5)).len(), 1);
    }

    #[test]
    fn gallery_without_queries_is_originals() {
        let g = build_cast_gallery(vec![("a".into(), vec![basis(0)]), ("b".into(), vec![basis(1)])], &[], 5, None).unwrap();
        assert!(g.entries.iter().all(|e| e.exemplars.is_empty()));
        assert!(build_cast_gallery(vec![("a".into(), vec![])], &[], 5, None).is_err());
    }

    #[test]
    fn gallery_exemplars_from_own_cluster() {
        let queries: Vec<FaceEmbedding> = (0..4)
            .flat_map(|j| {
                let w = 0.1 + j as f32 * 0.05;
                [mix(&[(0, 1.0), (2, w)]), mix(&[(1, 1.0), (3, w)])]
            })
            .collect();
        let g = build_cast_gallery(vec![("a".into(), vec![basis(0)]), ("b".into(), vec![basis(1)])], &queries, 3, None).unwrap();
        // Brute-force nearest distances: cluster a is every even query.
        let mut a_d: Vec<(f64, usize)> = queries.iter().enumerate().map(|(i, q)| (embed_distance(&basis(0), q), i)).collect();
        a_d.sort_by(|x, y| x.0.total_cmp(&y.0));
        let expected: Vec<_> = a_d[..3].iter().map(|&(_, i)| queries[i].clone()).collect();
        assert_eq!(g.entries[0].exemplars, expected);
        assert!(g.entries[0].exemplars.iter().all(|e| e.as_slice()[0] > 0.9));
        assert!(g.entries[1].exemplars.iter().all(|e| e.as_slice()[1] > 0.9));
    }

    #[test]
    fn gallery_k_exceeds_queries() {
        let q = vec![basis(2), basis(3)];
        let g = build_cast_gallery(vec![("a".into(), vec![basis(0)])], &q, 10, None).unwrap();
        assert_eq!(g.entries[0].exemplars.len(), 2);
    }

    #[test]
    fn match_exact() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)]), ("B".into(), vec![basis(1)])]).unwrap();
        let a = match_tracklet(&tracklet_with(4, vec![basis(0); 3]), &g, 0.6).unwrap();
        assert_eq!(a.cast_id.as_deref(), Some("A"));
        assert!(a.mean_distance.abs() < 1e-12);
    }

    #[test]
    fn match_orthogonal_unassigned() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)]), ("B".into(), vec![basis(1)])]).unwrap();
        let a = match_tracklet(&tracklet_with(0, vec![basis(5), basis(6)]), &g, 0.6).unwrap();
        assert_eq!(a.cast_id, None);
        assert!((a.mean_distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn match_no_faces_sentinel_and_empty_gallery() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)])]).unwrap();
        let a = match_tracklet(&tracklet_with(0, vec![]), &g, 0.6).unwrap();
        assert_eq!(a.cast_id, None);
        assert!(a.mean_distance.is_infinite());
        assert!(matches!(match_tracklet(&tracklet_with(0, vec![basis(0)]), &CastGallery::default(), 0.6), Err(FaceIdError::EmptyGallery)));
    }

    #[test]
    fn match_three_casts_against_oracle() {
        let casts = vec![vec![basis(0)], vec![basis(1)], vec![basis(2)]];
        let face = mix(&[(0, 0.9), (1, 0.1)]);
        let g = CastGallery::from_originals(casts.iter().enumerate().map(|(i, c)| (format!("c{i}"), c.clone())).collect()).unwrap();
        let a = match_tracklet(&tracklet_with(0, vec![face.clone(); 3]), &g, 0.6).unwrap();
        let (want, d) = oracle(
            &vec![to_f64(&face); 3],
            &casts.iter().map(|c| c.iter().map(to_f64).collect()).collect::<Vec<_>>(),
            0.6,
        );
        assert_eq!(want, Some(0));
        assert_eq!(a.cast_id.as_deref(), Some("c0"));
        assert!((a.mean_distance - d).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)]), ("B".into(), vec![basis(1)])]).unwrap();
        let a = match_tracklet(&tracklet_with(0, vec![mix(&[(0, 1.0), (1, 1.0)])]), &g, 0.6).unwrap();
        assert_eq!(a.cast_id.as_deref(), Some("A"));
    }

    #[test]
    fn shared_identity_allowed() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)])]).unwrap();
        let ts = vec![tracklet_with(0, vec![basis(0)]), tracklet_with(1, vec![basis(0)])];
        let out = assign_identities(&ts, &g, 0.6);
        assert!(out.iter().all(|a| a.cast_id.as_deref() == Some("A")));
        assert!(assign_identities(&[], &g, 0.6).is_empty());
    }

    #[test]
    fn mixed_scenario_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..D).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let casts: Vec<Vec<FaceEmbedding>> = (0..3).map(|_| (0..2).map(|_| FaceEmbedding::from_raw(&rand_vec(&mut rng)).unwrap()).collect()).collect();
        let g = CastGallery::from_originals(casts.iter().enumerate().map(|(i, c)| (format!("c{i}"), c.clone())).collect()).unwrap();
        let tracklets: Vec<Tracklet> = (0..4)
            .map(|t| {
                let center = casts[t % 3][0].as_slice().to_vec();
                let faces = (0..3)
                    .map(|_| {
                        let n = rand_vec(&mut rng);
                        FaceEmbedding::from_raw(&center.iter().zip(&n).map(|(c, e)| c + 0.2 * e).collect::<Vec<_>>()).unwrap()
                    })
                    .collect();
                tracklet_with(t as u64, faces)
            })
            .collect();
        let got = assign_identities(&tracklets, &g, 0.6);
        let cast64: Vec<Vec<Vec<f64>>> = casts.iter().map(|c| c.iter().map(to_f64).collect()).collect();
        for (t, a) in tracklets.iter().zip(&got) {
            let faces: Vec<Vec<f64>> = t.faces().map(to_f64).collect();
            let (want, d) = oracle(&faces, &cast64, 0.6);
            assert_eq!(a.cast_id, want.map(|i| format!("c{i}")));
            assert!((a.mean_distance - d).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_level_union() {
        let g = CastGallery::from_originals(vec![("A".into(), vec![basis(0)]), ("B".into(), vec![basis(1)])]).unwrap();
        let faces = [basis(0), basis(1), basis(7)];
        let refs: Vec<&FaceEmbedding> = faces.iter().collect();
        let ids = identify_faces_independently(&refs, &g, 0.6);
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec!["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn gallery_dump_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        let unit = |i: usize| {
            let mut v = vec![0.0f32; 512];
            v[i] = 1.0;
            FaceEmbedding::from_raw(&v).unwrap()
        };
        let g = CastGallery { entries: vec![CastEntry { cast_id: "x".into(), original: vec![unit(0)], exemplars: vec![unit(1), unit(2)] }] };
        dump_gallery(&g, &p).unwrap();
        let back = load_gallery(&p).unwrap();
        assert_eq!(back, vec![("x".to_string(), vec![unit(0)], vec![unit(1), unit(2)])]);
    }

    fn arb_emb() -> impl Strategy<Value = FaceEmbedding> {
        proptest::collection::vec(-1.0f32..1.0, D).prop_filter_map("nonzero", |v| FaceEmbedding::from_raw(&v))
    }

    /// Applies a fixed orthogonal map: a permutation with sign flips followed
    /// by a Givens rotation on every adjacent coordinate pair.
    fn rotate(e: &FaceEmbedding, perm: &[usize], signs: &[bool], angle: f64) -> FaceEmbedding {
        let src = e.as_slice();
        let mut v: Vec<f64> = perm.iter().zip(signs).map(|(&p, &s)| if s { -(src[p] as f64) } else { src[p] as f64 }).collect();
        let (c, s) = (angle.cos(), angle.sin());
        for i in (0..D - 1).step_by(2) {
            let (a, b) = (v[i], v[i + 1]);
            v[i] = c * a - s * b;
            v[i + 1] = s * a + c * b;
        }
        FaceEmbedding::from_raw(&v.iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap()
    }

    proptest! {
        #[test]
        fn order_invariance(
            faces in proptest::collection::vec(arb_emb(), 1..6),
            g0 in proptest::collection::vec(arb_emb(), 1..4),
            g1 in proptest::collection::vec(arb_emb(), 1..4),
        ) {
            let g = CastGallery::from_originals(vec![("a".into(), g0.clone()), ("b".into(), g1.clone())]).unwrap();
            let mut rf = faces.clone();
            rf.reverse();
            let (mut r0, mut r1) = (g0, g1);
            r0.reverse();
            r1.reverse();
            let gr = CastGallery::from_originals(vec![("a".into(), r0), ("b".into(), r1)]).unwrap();
            let a = match_tracklet(&tracklet_with(0, faces), &g, 0.6).unwrap();
            let b = match_tracklet(&tracklet_with(0, rf), &gr, 0.6).unwrap();
            prop_assert!((a.mean_distance - b.mean_distance).abs() < 1e-9);
            if (a.mean_distance - 0.6).abs() > 1e-9 {
                prop_assert_eq!(a.cast_id, b.cast_id);
            }
        }

        #[test]
        fn rotation_invariance(
            faces in proptest::collection::vec(arb_emb(), 1..6),
            casts in proptest::collection::vec(proptest::collection::vec(arb_emb(), 1..3), 1..4),
            perm in Just((0..D).collect::<Vec<_>>()).prop_shuffle(),
            signs in proptest::collection::vec(any::<bool>(), D),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let mk = |cs: &Vec<Vec<FaceEmbedding>>| CastGallery::from_originals(cs.iter().enumerate().map(|(i, c)| (format!("c{i}"), c.clone())).collect()).unwrap();
            let rot = |e: &FaceEmbedding| rotate(e, &perm, &signs, angle);
            let a = match_tracklet(&tracklet_with(0, faces.clone()), &mk(&casts), 0.6).unwrap();
            let rc: Vec<Vec<FaceEmbedding>> = casts.iter().map(|c| c.iter().map(rot).collect()).collect();
            let b = match_tracklet(&tracklet_with(0, faces.iter().map(rot).collect()), &mk(&rc), 0.6).unwrap();
            prop_assert!((a.mean_distance - b.mean_distance).abs() < 1e-5);
            if (a.mean_distance - 0.6).abs() > 1e-4 {
                prop_assert_eq!(a.cast_id, b.cast_id);
            }
        }

        #[test]
        fn close_exemplar_never_raises_mean(
            faces in proptest::collection::vec(arb_emb(), 1..6),
            originals in proptest::collection::vec(arb_emb(), 1..4),
            pick in any::<proptest::sample::Index>(),
        ) {
            let refs: Vec<&FaceEmbedding> = faces.iter().collect();
            let before = mean_pairwise_distance(originals.iter(), &refs);
            let ex = faces[pick.index(faces.len())].clone();
            let own = mean_pairwise_distance(std::iter::once(&ex), &refs);
            let entry = CastEntry { cast_id: "a".into(), original: originals.clone(), exemplars: vec![ex] };
            let after = mean_pairwise_distance(entry.combined(), &refs);
            if own < before {
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}
