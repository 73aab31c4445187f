//! Caption metrics (ROUGE-L, CIDEr-D) and character recognition scores.

use crate::ingest::{CastMember, GroundTruthAD};
use crate::promptgen::ADOutput;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no ground truth for clip {0}")]
    MissingGroundTruth(String),
    #[error("nothing to evaluate")]
    EmptyRun,
    #[error("clip key sets differ: {0}")]
    KeyMismatch(String),
    #[error("duplicate output for clip {0}")]
    DuplicateOutput(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Lowercases, replaces ASCII punctuation with spaces and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Single-row DP.
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let r = lcs / reference.len() as f64;
    let p = lcs / candidate.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub type Ngram = Vec<String>;

pub fn ngrams(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut out = HashMap::new();
    if n == 0 || n > tokens.len() {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// Document frequencies for n = 1..=4 over a reference corpus where each
/// element is one clip's reference set.
#[derive(Debug, Clone)]
pub struct CorpusIdf {
    num_docs: usize,
    df: [HashMap<Ngram, usize>; CIDER_MAX_N],
}

impl CorpusIdf {
    pub fn new(corpus: &[Vec<Vec<String>>]) -> Self {
        let mut df: [HashMap<Ngram, usize>; CIDER_MAX_N] = Default::default();
        for refs in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                let present: HashSet<Ngram> = refs.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
                for g in present {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Self { num_docs: corpus.len(), df }
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// `ln(|corpus| / df)`. N-grams absent from the corpus are treated as
    /// having df = 1.
    pub fn idf(&self, g: &[String]) -> f64 {
        let n = g.len();
        assert!((1..=CIDER_MAX_N).contains(&n), "n-gram order {n} out of range");
        let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
        (self.num_docs as f64 / df as f64).ln()
    }
}

/// Convenience wrapper returning the idf table for one n-gram order.
pub fn idf(corpus: &[Vec<Vec<String>>], n: usize) -> HashMap<Ngram, f64> {
    let c = CorpusIdf::new(corpus);
    c.df[n - 1].keys().map(|g| (g.clone(), c.idf(g))).collect()
}

fn tfidf(tokens: &[String], n: usize, idf: &CorpusIdf) -> (HashMap<Ngram, f64>, f64) {
    let vec: HashMap<Ngram, f64> = ngrams(tokens, n).into_iter().map(|(g, c)| {
        let w = c as f64 * idf.idf(&g);
        (g, w)
    }).collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// CIDEr-D of one candidate against its references, in [0, 10].
pub fn cider_d(candidate: &[String], references: &[Vec<String>], idf: &CorpusIdf, sigma: f64) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let (cv, cn) = tfidf(candidate, n, idf);
        let mut per_n = 0.0;
        for r in references {
            let (rv, rn) = tfidf(r, n, idf);
            if cn == 0.0 || rn == 0.0 {
                continue;
            }
            let dot: f64 = cv.iter().filter_map(|(g, &c)| rv.get(g).map(|&r| c.min(r) * r)).sum();
            let delta = candidate.len() as f64 - r.len() as f64;
            per_n += dot / (cn * rn) * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        }
        total += per_n / references.len() as f64;
    }
    total / CIDER_MAX_N as f64 * 10.0
}

/// Cast members named in `text`: the full character name, or any part of it
/// at least three characters long, as a whole-token sequence.
pub fn ner_match(text: &str, cast: &[CastMember]) -> BTreeSet<String> {
    let tokens = tokenize(text);
    let contains = |needle: &[String]| !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle);
    cast.iter()
        .filter(|c| {
            contains(&tokenize(&c.character_name))
                || c.character_name.split_whitespace().filter(|p| p.chars().count() >= 3).any(|p| contains(&tokenize(p)))
        })
        .map(|c| c.cast_id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrCounts {
    pub fn of(pred: &BTreeSet<String>, truth: &BTreeSet<String>) -> Self {
        let tp = pred.intersection(truth).count();
        Self { tp, fp: pred.len() - tp, fn_: truth.len() - tp }
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged (recall, precision) over clips.
pub fn char_pr(
    predictions: &BTreeMap<String, BTreeSet<String>>,
    annotations: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(f64, f64), MetricsError> {
    let pk: BTreeSet<_> = predictions.keys().collect();
    let ak: BTreeSet<_> = annotations.keys().collect();
    if pk != ak {
        let diff: Vec<&str> = pk.symmetric_difference(&ak).map(|s| s.as_str()).collect();
        return Err(MetricsError::KeyMismatch(diff.join(", ")));
    }
    let mut total = PrCounts::default();
    for (clip, pred) in predictions {
        let c = PrCounts::of(pred, &annotations[clip]);
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok((total.recall(), total.precision()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub word_count: usize,
    pub gt_word_count: usize,
    pub predicted_characters: BTreeSet<String>,
    pub annotated_characters: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_clips: usize,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub char_recall: f64,
    pub char_precision: f64,
    pub per_clip: Vec<ClipScore>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|source| MetricsError::Io { path: path.display().to_string(), source })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let io = |source| MetricsError::Io { path: path.display().to_string(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "clip_id,rouge_l,cider_d,word_count,gt_word_count,predicted_characters,annotated_characters").map_err(io)?;
        for c in &self.per_clip {
            let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(";");
            writeln!(
                f,
                "{},{:.6},{:.6},{},{},{},{}",
                c.clip_id,
                c.rouge_l,
                c.cider_d,
                c.word_count,
                c.gt_word_count,
                join(&c.predicted_characters),
                join(&c.annotated_characters)
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Scores a run. The CIDEr idf corpus is the full set of ground-truth ADs
/// supplied, one document per clip; corpus scores are means of per-clip
/// scores. `cast` maps each clip to the cast list used for name matching.
pub fn evaluate_run(
    outputs: &[ADOutput],
    ground_truth: &BTreeMap<String, GroundTruthAD>,
    cast: &dyn Fn(&str) -> Vec<CastMember>,
) -> Result<EvalReport, MetricsError> {
    if outputs.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let mut seen = HashSet::new();
    for o in outputs {
        if !ground_truth.contains_key(&o.clip_id) {
            return Err(MetricsError::MissingGroundTruth(o.clip_id.clone()));
        }
        if !seen.insert(o.clip_id.as_str()) {
            return Err(MetricsError::DuplicateOutput(o.clip_id.clone()));
        }
    }
    let corpus: Vec<Vec<Vec<String>>> = ground_truth.values().map(|g| vec![tokenize(&g.text)]).collect();
    let idf = CorpusIdf::new(&corpus);
    let mut per_clip = Vec::with_capacity(outputs.len());
    let mut preds = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for o in outputs {
        let gt = &ground_truth[&o.clip_id];
        let cand = tokenize(&o.text);
        let reference = tokenize(&gt.text);
        let members = cast(&o.clip_id);
        let p = ner_match(&o.text, &members);
        let a = ner_match(&gt.text, &members);
        preds.insert(o.clip_id.clone(), p.clone());
        truth.insert(o.clip_id.clone(), a.clone());
        per_clip.push(ClipScore {
            clip_id: o.clip_id.clone(),
            rouge_l: rouge_l(&cand, &reference, ROUGE_BETA),
            cider_d: cider_d(&cand, std::slice::from_ref(&reference), &idf, CIDER_SIGMA),
            word_count: o.word_count,
            gt_word_count: gt.word_count,
            predicted_characters: p,
            annotated_characters: a,
        });
    }
    let (char_recall, char_precision) = char_pr(&preds, &truth)?;
    let n = per_clip.len() as f64;
    Ok(EvalReport {
        num_clips: per_clip.len(),
        rouge_l: per_clip.iter().map(|c| c.rouge_l).sum::<f64>() / n,
        cider_d: per_clip.iter().map(|c| c.cider_d).sum::<f64>() / n,
        char_recall,
        char_precision,
        per_clip,
    })
}
