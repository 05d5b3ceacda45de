//! Evaluation harness for spatial narratives: segment-level scene and camera
//! descriptions produced by a video-language model and consumed by a text-only proxy
//! reasoner to answer spatial questions.

pub mod backends;
pub mod capmetrics;
pub mod config;
pub mod datagen;
pub mod directqa;
pub mod error;
pub mod ingest;
pub mod narrative;
pub mod records;
pub mod report;
pub mod run;
pub mod segmenter;
pub mod sns;

pub use error::{Error, Result};
