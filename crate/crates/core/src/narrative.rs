//! Tagged spatial narratives.
//!
//! A narrative has a scene part and a camera part. Both the open-tag form
//! `<scene> S <camera> C` and the closed-tag form
//! `<scene>S</scene><camera>C</camera>` are accepted on input; output is always the
//! open-tag form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capmetrics::tokenize;
use crate::error::{Error, Result};

pub const SCENE_OPEN: &str = "<scene>";
pub const SCENE_CLOSE: &str = "</scene>";
pub const CAMERA_OPEN: &str = "<camera>";
pub const CAMERA_CLOSE: &str = "</camera>";

const TAG_TOKENS: [&str; 4] = [SCENE_OPEN, SCENE_CLOSE, CAMERA_OPEN, CAMERA_CLOSE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseErrorKind {
    MissingScene,
    MissingCamera,
    EmptySpan,
    OrderViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub detail: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

fn contains_tag(s: &str) -> bool {
    TAG_TOKENS.iter().any(|t| s.contains(t))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNarrative")]
pub struct SpatialNarrative {
    scene: String,
    camera: String,
}

#[derive(Deserialize)]
struct RawNarrative {
    scene: String,
    camera: String,
}

impl TryFrom<RawNarrative> for SpatialNarrative {
    type Error = ParseError;

    fn try_from(raw: RawNarrative) -> Result<Self, ParseError> {
        SpatialNarrative::new(raw.scene, raw.camera)
    }
}

impl SpatialNarrative {
    /// Builds a narrative from its two parts. Surrounding whitespace is trimmed;
    /// empty parts and parts containing a tag token are rejected.
    pub fn new(scene: impl AsRef<str>, camera: impl AsRef<str>) -> Result<Self, ParseError> {
        let scene = scene.as_ref().trim();
        let camera = camera.as_ref().trim();
        if scene.is_empty() || camera.is_empty() {
            return Err(ParseError::new(ParseErrorKind::EmptySpan, "scene and camera must be nonempty"));
        }
        if contains_tag(scene) || contains_tag(camera) {
            return Err(ParseError::new(ParseErrorKind::OrderViolation, "tag token inside a narrative field"));
        }
        Ok(Self {
            scene: scene.to_owned(),
            camera: camera.to_owned(),
        })
    }

    /// Placeholder recorded for segments whose reply could not be parsed.
    pub fn unparseable() -> Self {
        Self {
            scene: "[unparseable]".into(),
            camera: "[unparseable]".into(),
        }
    }

    pub fn scene(&self) -> &str {
        &self.scene
    }

    pub fn camera(&self) -> &str {
        &self.camera
    }
}

impl fmt::Display for SpatialNarrative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCENE_OPEN} {} {CAMERA_OPEN} {}", self.scene, self.camera)
    }
}

pub fn parse_narrative(text: &str) -> Result<SpatialNarrative, ParseError> {
    use ParseErrorKind::*;

    let scene_at = text
        .find(SCENE_OPEN)
        .ok_or_else(|| ParseError::new(MissingScene, "no <scene> tag"))?;
    let camera_at = text
        .find(CAMERA_OPEN)
        .ok_or_else(|| ParseError::new(MissingCamera, "no <camera> tag"))?;
    if camera_at < scene_at {
        return Err(ParseError::new(OrderViolation, "<camera> precedes <scene>"));
    }

    let scene_region = &text[scene_at + SCENE_OPEN.len()..camera_at];
    let scene = match scene_region.find(SCENE_CLOSE) {
        Some(close) => {
            let trailing = &scene_region[close + SCENE_CLOSE.len()..];
            if !trailing.trim().is_empty() {
                return Err(ParseError::new(OrderViolation, "text between </scene> and <camera>"));
            }
            &scene_region[..close]
        }
        None => scene_region,
    };

    let camera_region = &text[camera_at + CAMERA_OPEN.len()..];
    let camera = match camera_region.find(CAMERA_CLOSE) {
        Some(close) => &camera_region[..close],
        None => camera_region,
    };

    let (scene, camera) = (scene.trim(), camera.trim());
    if scene.is_empty() || camera.is_empty() {
        return Err(ParseError::new(EmptySpan, "empty scene or camera span"));
    }
    if contains_tag(scene) || contains_tag(camera) {
        return Err(ParseError::new(OrderViolation, "repeated or misplaced tag"));
    }
    SpatialNarrative::new(scene, camera)
}

pub fn serialize_narrative(n: &SpatialNarrative) -> String {
    n.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoNarrative {
    pub video_id: String,
    pub entries: Vec<(usize, SpatialNarrative)>,
    pub rendered: String,
}

/// Renders `Segment {i+1}: <scene> ... <camera> ...` blocks joined by newlines.
pub fn render_blocks<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = &'a (usize, SpatialNarrative)>,
{
    entries
        .into_iter()
        .map(|(i, n)| format!("Segment {}: {}", i + 1, n))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn concat_narratives(
    video_id: impl Into<String>,
    mut entries: Vec<(usize, SpatialNarrative)>,
) -> Result<VideoNarrative> {
    let video_id = video_id.into();
    if entries.is_empty() {
        return Err(Error::Invalid(format!("video `{video_id}` has no segment narratives")));
    }
    entries.sort_by_key(|(i, _)| *i);
    for (expected, (i, _)) in entries.iter().enumerate() {
        if *i != expected {
            return Err(Error::Invalid(format!(
                "video `{video_id}`: segment indices must be contiguous from 0, found {i} at position {expected}"
            )));
        }
    }
    let rendered = render_blocks(&entries);
    Ok(VideoNarrative {
        video_id,
        entries,
        rendered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Span {
    Scene,
    Camera,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconReport {
    pub counts: BTreeMap<String, u64>,
    pub total_tokens: u64,
}

/// Directional and egomotion vocabulary used for lexicon statistics and for flagging
/// camera language in scene captions.
pub const CAMERA_LEXICON: &[&str] = &[
    "left", "right", "up", "down", "forward", "backward", "clockwise", "counterclockwise",
    "pan", "pans", "panning", "tilt", "tilts", "tilting", "dolly", "dollies", "dollying",
    "zoom", "zooms", "zooming", "roll", "rolls", "rolling", "truck", "trucks", "trucking",
    "pedestal", "pedestals", "arc", "arcs", "arcing", "track", "tracks", "tracking",
    "static", "steady", "shaking", "unsteady",
];

/// Counts exact (lowercased, unstemmed) occurrences of each lexicon term.
pub fn lexicon_stats(narratives: &[SpatialNarrative], lexicon: &BTreeSet<String>, span: Span) -> LexiconReport {
    let mut counts: BTreeMap<String, u64> = lexicon.iter().map(|t| (t.to_lowercase(), 0)).collect();
    let mut total_tokens = 0u64;
    for n in narratives {
        let parts: &[&str] = match span {
            Span::Scene => &[n.scene()],
            Span::Camera => &[n.camera()],
            Span::Both => &[n.scene(), n.camera()],
        };
        for part in parts {
            for tok in tokenize(part).tokens() {
                total_tokens += 1;
                if let Some(c) = counts.get_mut(tok.as_str()) {
                    *c += 1;
                }
            }
        }
    }
    LexiconReport { counts, total_tokens }
}
