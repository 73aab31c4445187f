//! Prompt-frame sampling and visual prompting: character names and/or green
//! boxes burned into the frames handed to the vision model.

mod font;

pub use crate::frame::FrameBuffer;
use crate::tracker::{BoundingBox, Tracklet};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("label text is empty")]
    EmptyText,
    #[error("frame index list and frame list differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot write {path}: {msg}")]
    Write { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayMode {
    None,
    BboxOnly,
    #[default]
    NameOnly,
    BboxAndName,
}

impl OverlayMode {
    pub fn draws_boxes(self) -> bool {
        matches!(self, Self::BboxOnly | Self::BboxAndName)
    }

    pub fn draws_names(self) -> bool {
        matches!(self, Self::NameOnly | Self::BboxAndName)
    }
}

impl std::str::FromStr for OverlayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "bbox_only" => Ok(Self::BboxOnly),
            "name_only" => Ok(Self::NameOnly),
            "bbox_and_name" => Ok(Self::BboxAndName),
            other => Err(format!("unknown overlay mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayStyle {
    pub mode: OverlayMode,
    pub box_color: [u8; 3],
    pub box_thickness: u32,
    pub label_scale: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self { mode: OverlayMode::NameOnly, box_color: [0, 255, 0], box_thickness: 3, label_scale: 2 }
    }
}

const GLYPH_COLOR: [u8; 3] = [255, 255, 255];

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`; may extend past the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub fn intersects(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }
}

/// Endpoint-inclusive uniform sample of `n` indices out of `num_frames`:
/// `floor(k * (L - 1) / (n - 1))`. Short clips return every index once.
pub fn sample_frames(num_frames: usize, n: usize) -> Vec<usize> {
    if num_frames == 0 || n == 0 {
        return Vec::new();
    }
    if num_frames <= n {
        return (0..num_frames).collect();
    }
    if n == 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..n).map(|k| k * (num_frames - 1) / (n - 1)).collect();
    out.dedup();
    out
}

fn box_rect(b: &BoundingBox) -> Rect {
    Rect { x0: b.x1.round() as i64, y0: b.y1.round() as i64, x1: b.x2.round() as i64, y1: b.y2.round() as i64 }
}

fn clamp_rect(r: Rect, w: u32, h: u32) -> Rect {
    let (w, h) = (w as i64, h as i64);
    Rect { x0: r.x0.clamp(0, w), y0: r.y0.clamp(0, h), x1: r.x1.clamp(0, w), y1: r.y1.clamp(0, h) }
}

/// Pixel rectangle the outline of `b` occupies after clamping to the frame.
pub fn box_outline_rect(frame: &FrameBuffer, b: &BoundingBox) -> Rect {
    clamp_rect(box_rect(b), frame.width(), frame.height())
}

/// Draws the outline of `b` (clamped to the frame) with the style's colour and
/// thickness. The outline grows inward from the box edges.
pub fn draw_box(frame: &mut FrameBuffer, b: &BoundingBox, style: &OverlayStyle) {
    let r = box_outline_rect(frame, b);
    let t = style.box_thickness as i64;
    if t == 0 || r.width() <= 0 || r.height() <= 0 {
        return;
    }
    let c = style.box_color;
    frame.fill_rect(r.x0, r.y0, r.x1, (r.y0 + t).min(r.y1), c);
    frame.fill_rect(r.x0, (r.y1 - t).max(r.y0), r.x1, r.y1, c);
    frame.fill_rect(r.x0, r.y0, (r.x0 + t).min(r.x1), r.y1, c);
    frame.fill_rect((r.x1 - t).max(r.x0), r.y0, r.x1, r.y1, c);
}

/// Background size of a label: `chars * 6 * scale` by `9 * scale` (glyphs
/// plus one pixel of padding above and below, scaled).
pub fn label_size(text: &str, scale: u32) -> (i64, i64) {
    let n = text.chars().count() as i64;
    let s = scale.max(1) as i64;
    (n * font::ADVANCE as i64 * s, (font::GLYPH_H as i64 + 2) * s)
}

/// Where a label anchored at a box's top-left corner goes: directly above the
/// box, moved down inside it when that would cross the top edge, and pulled
/// left when it would cross the right edge.
pub fn place_label(frame: &FrameBuffer, anchor: (i64, i64), text: &str, scale: u32) -> Rect {
    let (w, h) = label_size(text, scale);
    let fw = frame.width() as i64;
    let x0 = anchor.0.min(fw - w).max(0);
    let mut y0 = anchor.1 - h;
    if y0 < 0 {
        y0 = anchor.1.max(0);
    }
    Rect { x0, y0, x1: x0 + w, y1: y0 + h }
}

fn paint_label(frame: &mut FrameBuffer, rect: Rect, text: &str, style: &OverlayStyle) {
    let s = style.label_scale.max(1) as i64;
    frame.fill_rect(rect.x0, rect.y0, rect.x1, rect.y1, style.box_color);
    for (i, c) in text.chars().enumerate() {
        let gx = rect.x0 + i as i64 * font::ADVANCE as i64 * s;
        let gy = rect.y0 + s;
        for (row, bits) in font::glyph(c).iter().enumerate() {
            for col in 0..font::GLYPH_W {
                if bits & (1 << (font::GLYPH_W - 1 - col)) != 0 {
                    let px = gx + col as i64 * s;
                    let py = gy + row as i64 * s;
                    frame.fill_rect(px, py, px + s, py + s, GLYPH_COLOR);
                }
            }
        }
    }
}

/// Renders `text` in white on a filled background of the style's colour,
/// anchored at `anchor` (see [`place_label`]). Returns the background rect.
pub fn draw_label(frame: &mut FrameBuffer, anchor: (i64, i64), text: &str, style: &OverlayStyle) -> Result<Rect, AnnotateError> {
    if text.is_empty() {
        return Err(AnnotateError::EmptyText);
    }
    let rect = place_label(frame, anchor, text, style.label_scale);
    paint_label(frame, rect, text, style);
    Ok(rect)
}

/// Annotates sampled frames. `frame_indices[i]` is the clip frame index of
/// `frames[i]`. Named tracklets covering a frame contribute a box and/or a
/// label according to the style; labels that would overlap an earlier label
/// on the same frame are pushed below it.
pub fn render_overlays(
    frames: &[FrameBuffer],
    frame_indices: &[usize],
    tracklets: &[Tracklet],
    style: &OverlayStyle,
) -> Result<Vec<FrameBuffer>, AnnotateError> {
    if frames.len() != frame_indices.len() {
        return Err(AnnotateError::LengthMismatch(frame_indices.len(), frames.len()));
    }
    let mut named: Vec<&Tracklet> = tracklets.iter().filter(|t| t.name.as_deref().is_some_and(|n| !n.is_empty())).collect();
    named.sort_by_key(|t| t.tracklet_id);

    Ok(frames
        .iter()
        .zip(frame_indices)
        .map(|(frame, &fi)| {
            let mut out = frame.clone();
            if style.mode == OverlayMode::None {
                return out;
            }
            let present: Vec<(&BoundingBox, &str)> = named
                .iter()
                .filter_map(|t| t.boxes.get(&fi).map(|b| (b, t.name.as_deref().unwrap_or_default())))
                .collect();
            if style.mode.draws_boxes() {
                for (b, _) in &present {
                    draw_box(&mut out, b, style);
                }
            }
            if style.mode.draws_names() {
                let mut placed: Vec<Rect> = Vec::new();
                for (b, name) in &present {
                    let rect = stack_label(&out, box_rect(b), name, style.label_scale, &placed);
                    paint_label(&mut out, rect, name, style);
                    placed.push(rect);
                }
            }
            out
        })
        .collect())
}

fn stack_label(frame: &FrameBuffer, anchor_box: Rect, text: &str, scale: u32, placed: &[Rect]) -> Rect {
    let mut rect = place_label(frame, (anchor_box.x0, anchor_box.y0), text, scale);
    // Each step moves strictly down, so this terminates.
    while let Some(hit) = placed.iter().find(|p| p.intersects(&rect)) {
        let dy = hit.y1 - rect.y0;
        rect.y0 += dy;
        rect.y1 += dy;
    }
    rect
}

/// Writes annotated frames as `<dir>/<clip_id>/<k>_<frame_idx>.png`.
pub fn dump_annotated(dir: &Path, clip_id: &str, frames: &[FrameBuffer], frame_indices: &[usize]) -> Result<(), AnnotateError> {
    let clip_dir = dir.join(clip_id);
    let werr = |p: &Path, e: &dyn std::fmt::Display| AnnotateError::Write { path: p.display().to_string(), msg: e.to_string() };
    std::fs::create_dir_all(&clip_dir).map_err(|e| werr(&clip_dir, &e))?;
    for (k, (f, idx)) in frames.iter().zip(frame_indices).enumerate() {
        let p = clip_dir.join(format!("{k:02}_{idx:06}.png"));
        f.save_png(&p).map_err(|e| werr(&p, &e))?;
    }
    Ok(())
}
