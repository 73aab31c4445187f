//! Textual story context for a clip: the subtitle window bounded by the
//! `T`-th preceding AD, plus optionally the ADs produced by a first pass.

use crate::ingest::Subtitle;
use serde::{Deserialize, Serialize};

/// A previously generated AD used as context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAd {
    pub timestamp_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextEntry<'a> {
    Subtitle(&'a Subtitle),
    Ad(&'a PriorAd),
}

impl ContextEntry<'_> {
    pub fn timestamp(&self) -> f64 {
        match self {
            Self::Subtitle(s) => s.start_s,
            Self::Ad(a) => a.timestamp_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextWindow {
    pub subtitles: Vec<Subtitle>,
    pub previous_ads: Vec<PriorAd>,
    pub context_len: usize,
}

impl ContextWindow {
    pub fn is_empty(&self) -> bool {
        self.subtitles.is_empty() && self.previous_ads.is_empty()
    }

    /// Both sources interleaved in time order. Subtitles sort before ADs
    /// with the same timestamp.
    pub fn merged(&self) -> Vec<ContextEntry<'_>> {
        let mut out: Vec<ContextEntry<'_>> = self
            .subtitles
            .iter()
            .map(ContextEntry::Subtitle)
            .chain(self.previous_ads.iter().map(ContextEntry::Ad))
            .collect();
        out.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
        out
    }
}

/// Lower time bound of the window: the `t`-th AD timestamp counting back from
/// `current_start_s`, or `-inf` when fewer than `t` ADs precede it.
pub fn window_start(ad_timestamps: &[f64], current_start_s: f64, t: usize) -> f64 {
    let prior = ad_timestamps.partition_point(|&ts| ts < current_start_s);
    if t == 0 || prior < t {
        return f64::NEG_INFINITY;
    }
    ad_timestamps[prior - t]
}

/// Subtitles with `t0 <= start_s < current_start_s`, where `t0` is the
/// `t`-th prior AD timestamp. `ad_timestamps` must be sorted ascending.
/// `t == 0` yields an empty window.
pub fn select_subtitle_window(subtitles: &[Subtitle], ad_timestamps: &[f64], current_start_s: f64, t: usize) -> Vec<Subtitle> {
    if t == 0 {
        return Vec::new();
    }
    let t0 = window_start(ad_timestamps, current_start_s, t);
    let mut out: Vec<Subtitle> =
        subtitles.iter().filter(|s| s.start_s >= t0 && s.start_s < current_start_s).cloned().collect();
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    out
}

/// The `limit` most recent ADs strictly before `current_start_s`, oldest first.
pub fn select_prev_ads(generated: &[PriorAd], current_start_s: f64, limit: usize) -> Vec<PriorAd> {
    let mut prior: Vec<PriorAd> = generated.iter().filter(|a| a.timestamp_s < current_start_s).cloned().collect();
    prior.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    let skip = prior.len().saturating_sub(limit);
    prior.split_off(skip)
}

pub fn build_context(mut subtitles: Vec<Subtitle>, mut previous_ads: Vec<PriorAd>, context_len: usize) -> ContextWindow {
    subtitles.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    previous_ads.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    ContextWindow { subtitles, previous_ads, context_len }
}
