//! Audio-description generation for movie clips.

pub mod annotate;
pub mod assignment;
pub mod backend;
pub mod context;
pub mod faceid;
pub mod frame;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod promptgen;
pub mod shotseg;
pub mod synth;
pub mod tracker;
