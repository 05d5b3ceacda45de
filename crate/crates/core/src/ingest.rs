//! Loading of benchmark question sets, video manifests and reference caption
//! corpora from line-delimited record files.
//!
//! Record layouts (one JSON object per line):
//!
//! * questions: `question_id`, `video_id`, `kind` (`"mcq"` | `"nq"`), `text`,
//!   `options` (list of `{"letter", "text"}`, empty for NQ), `gold` (letter string for
//!   MCQ, number for NQ), `category`
//! * manifest: `video_id`, `path`, `duration_s`, `native_fps`, `scene_id`
//! * captions: `video_id`, `reference_camera_caption`, `candidate_caption` (optional)

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::records::{read_records, write_records};

/// A multiple-choice option letter, `A` through `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLetter(u8);

impl OptionLetter {
    pub const ALL: [OptionLetter; 6] = [
        OptionLetter(0),
        OptionLetter(1),
        OptionLetter(2),
        OptionLetter(3),
        OptionLetter(4),
        OptionLetter(5),
    ];

    pub fn from_char(c: char) -> Option<Self> {
        let upper = c.to_ascii_uppercase();
        ('A'..='F')
            .contains(&upper)
            .then(|| OptionLetter(upper as u8 - b'A'))
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for OptionLetter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => OptionLetter::from_char(c).ok_or_else(|| format!("`{s}` is not a letter in A..F")),
            _ => Err(format!("`{s}` is not a single option letter")),
        }
    }
}

impl Serialize for OptionLetter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OptionLetter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Question category. The four named variants are the VSI-Bench multiple-choice
/// categories; anything else is carried through verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    RelDir,
    RelDist,
    ApprOrder,
    RoutePlan,
    Other(String),
}

impl Category {
    pub const STANDARD_ORDER: [Category; 4] = [
        Category::RelDir,
        Category::RelDist,
        Category::ApprOrder,
        Category::RoutePlan,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            Category::RelDir => "rel_dir",
            Category::RelDist => "rel_dist",
            Category::ApprOrder => "appr_order",
            Category::RoutePlan => "route_plan",
            Category::Other(s) => s,
        }
    }

    /// Column heading used in rendered tables.
    pub fn label(&self) -> &str {
        match self {
            Category::RelDir => "Rel. Dir.",
            Category::RelDist => "Rel. Dist.",
            Category::ApprOrder => "Appr. Order",
            Category::RoutePlan => "Route Plan.",
            Category::Other(s) => s,
        }
    }
}

impl From<&str> for Category {
    fn from(s: &str) -> Self {
        match s.trim() {
            "rel_dir" | "object_rel_direction" | "object_rel_direction_easy"
            | "object_rel_direction_medium" | "object_rel_direction_hard" => Category::RelDir,
            "rel_dist" | "object_rel_distance" => Category::RelDist,
            "appr_order" | "obj_appearance_order" => Category::ApprOrder,
            "route_plan" | "route_planning" => Category::RoutePlan,
            other => Category::Other(other.to_owned()),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Category::from(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub letter: OptionLetter,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Mcq,
    Nq,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Mcq {
        options: Vec<AnswerOption>,
        gold: OptionLetter,
    },
    Nq {
        gold: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub question_id: String,
    pub video_id: String,
    pub text: String,
    pub category: Category,
    pub answer: Answer,
}

impl Question {
    pub fn kind(&self) -> QuestionKind {
        match self.answer {
            Answer::Mcq { .. } => QuestionKind::Mcq,
            Answer::Nq { .. } => QuestionKind::Nq,
        }
    }

    pub fn options(&self) -> &[AnswerOption] {
        match &self.answer {
            Answer::Mcq { options, .. } => options,
            Answer::Nq { .. } => &[],
        }
    }

    pub fn gold_letter(&self) -> Option<OptionLetter> {
        match self.answer {
            Answer::Mcq { gold, .. } => Some(gold),
            Answer::Nq { .. } => None,
        }
    }

    pub fn to_record(&self) -> QuestionRecord {
        let (options, gold) = match &self.answer {
            Answer::Mcq { options, gold } => (options.clone(), serde_json::Value::from(gold.to_string())),
            Answer::Nq { gold } => (Vec::new(), serde_json::Value::from(*gold)),
        };
        QuestionRecord {
            question_id: self.question_id.clone(),
            video_id: self.video_id.clone(),
            kind: self.kind(),
            text: self.text.clone(),
            options,
            gold,
            category: self.category.clone(),
        }
    }
}

/// On-disk layout of one question line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub video_id: String,
    pub kind: QuestionKind,
    pub text: String,
    #[serde(default)]
    pub options: Vec<AnswerOption>,
    pub gold: serde_json::Value,
    pub category: Category,
}

impl QuestionRecord {
    /// Validates the record; on failure returns the offending field name and reason.
    pub fn validate(self) -> std::result::Result<Question, (&'static str, String)> {
        if self.question_id.trim().is_empty() {
            return Err(("question_id", "must be nonempty".into()));
        }
        if self.video_id.trim().is_empty() {
            return Err(("video_id", "must be nonempty".into()));
        }
        let answer = match self.kind {
            QuestionKind::Mcq => {
                if self.options.len() < 2 {
                    return Err(("options", format!("MCQ needs at least 2 options, got {}", self.options.len())));
                }
                let mut seen = HashSet::new();
                for opt in &self.options {
                    if !seen.insert(opt.letter) {
                        return Err(("options", format!("duplicate option letter {}", opt.letter)));
                    }
                }
                let gold: OptionLetter = match &self.gold {
                    serde_json::Value::String(s) => s.parse().map_err(|e| ("gold", e))?,
                    other => return Err(("gold", format!("MCQ gold must be a letter, got {other}"))),
                };
                if !seen.contains(&gold) {
                    return Err(("gold", format!("gold letter {gold} is not among the options")));
                }
                Answer::Mcq {
                    options: self.options,
                    gold,
                }
            }
            QuestionKind::Nq => {
                if !self.options.is_empty() {
                    return Err(("options", "NQ questions carry no options".into()));
                }
                let gold = self
                    .gold
                    .as_f64()
                    .ok_or_else(|| ("gold", format!("NQ gold must be a number, got {}", self.gold)))?;
                if !gold.is_finite() {
                    return Err(("gold", "NQ gold must be finite".into()));
                }
                Answer::Nq { gold }
            }
        };
        Ok(Question {
            question_id: self.question_id,
            video_id: self.video_id,
            text: self.text,
            category: self.category,
            answer,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
    pub native_fps: f64,
    pub scene_id: String,
}

impl VideoManifestEntry {
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.video_id.trim().is_empty() {
            return Err(("video_id", "must be nonempty".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(("duration_s", format!("must be positive, got {}", self.duration_s)));
        }
        if !(self.native_fps.is_finite() && self.native_fps > 0.0) {
            return Err(("native_fps", format!("must be positive, got {}", self.native_fps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub video_id: String,
    pub reference_camera_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_caption: Option<String>,
}

fn record_error(path: &Path, line: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        field: field.to_owned(),
        reason: reason.into(),
    }
}

pub fn load_question_set(path: &Path) -> Result<Vec<Question>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, record) in read_records::<QuestionRecord>(path)? {
        let q = record
            .validate()
            .map_err(|(field, reason)| record_error(path, line, field, reason))?;
        if !seen.insert(q.question_id.clone()) {
            return Err(record_error(
                path,
                line,
                "question_id",
                format!("duplicate question_id `{}`", q.question_id),
            ));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn save_question_set(path: &Path, questions: &[Question]) -> Result<()> {
    let records: Vec<_> = questions.iter().map(Question::to_record).collect();
    write_records(path, &records)
}

pub fn load_video_manifest(path: &Path) -> Result<Vec<VideoManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, entry) in read_records::<VideoManifestEntry>(path)? {
        entry
            .check()
            .map_err(|(field, reason)| record_error(path, line, field, reason))?;
        if !seen.insert(entry.video_id.clone()) {
            return Err(record_error(
                path,
                line,
                "video_id",
                format!("duplicate video_id `{}`", entry.video_id),
            ));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn save_video_manifest(path: &Path, entries: &[VideoManifestEntry]) -> Result<()> {
    write_records(path, entries)
}

pub fn load_caption_corpus(path: &Path) -> Result<Vec<CaptionPair>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, pair) in read_records::<CaptionPair>(path)? {
        if pair.reference_camera_caption.trim().is_empty() {
            return Err(record_error(path, line, "reference_camera_caption", "must be nonempty"));
        }
        if !seen.insert(pair.video_id.clone()) {
            return Err(record_error(
                path,
                line,
                "video_id",
                format!("duplicate video_id `{}`", pair.video_id),
            ));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn save_caption_corpus(path: &Path, pairs: &[CaptionPair]) -> Result<()> {
    write_records(path, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn mcq_line(id: &str, gold: &str) -> String {
        format!(
            r#"{{"question_id":"{id}","video_id":"v1","kind":"mcq","text":"Where is the sofa?","options":[{{"letter":"A","text":"left"}},{{"letter":"B","text":"right"}},{{"letter":"C","text":"front"}},{{"letter":"D","text":"back"}}],"gold":"{gold}","category":"rel_dir"}}"#
        )
    }

    #[test]
    fn loads_many_mcq_lines_in_order() {
        let lines: Vec<String> = (0..198).map(|i| mcq_line(&format!("q{i}"), "B")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = file_with(&refs);
        let qs = load_question_set(f.path()).unwrap();
        assert_eq!(qs.len(), 198);
        assert_eq!(qs[0].question_id, "q0");
        assert_eq!(qs[197].question_id, "q197");
        assert_eq!(qs[5].gold_letter(), Some(OptionLetter::from_char('B').unwrap()));
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = file_with(&[]);
        assert!(load_question_set(f.path()).unwrap().is_empty());
    }

    #[test]
    fn gold_outside_options_names_line_and_field() {
        let good = mcq_line("q0", "A");
        let bad = mcq_line("q1", "E");
        let f = file_with(&[&good, &bad]);
        match load_question_set(f.path()).unwrap_err() {
            Error::Record { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "gold");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_question_id_rejected() {
        let a = mcq_line("q0", "A");
        let f = file_with(&[&a, &a]);
        assert!(matches!(
            load_question_set(f.path()).unwrap_err(),
            Error::Record { line: 2, .. }
        ));
    }

    #[test]
    fn malformed_line_is_reported() {
        let f = file_with(&[r#"{"question_id":"q0","video_id":"v1","kind":"mcq""#]);
        assert!(matches!(
            load_question_set(f.path()).unwrap_err(),
            Error::Record { line: 1, .. }
        ));
    }

    #[test]
    fn nq_and_unknown_categories() {
        let f = file_with(&[
            r#"{"question_id":"n1","video_id":"v1","kind":"nq","text":"How big?","gold":3.1,"category":"object_size_estimation"}"#,
            r#"{"question_id":"n2","video_id":"v1","kind":"mcq","text":"?","options":[{"letter":"A","text":"x"},{"letter":"B","text":"y"}],"gold":"a","category":"route_planning"}"#,
        ]);
        let qs = load_question_set(f.path()).unwrap();
        assert_eq!(qs[0].answer, Answer::Nq { gold: 3.1 });
        assert_eq!(qs[0].category, Category::Other("object_size_estimation".into()));
        assert_eq!(qs[1].category, Category::RoutePlan);
        assert_eq!(qs[1].gold_letter().unwrap().as_char(), 'A');
    }

    #[test]
    fn single_option_mcq_rejected() {
        let f = file_with(&[
            r#"{"question_id":"q","video_id":"v1","kind":"mcq","text":"?","options":[{"letter":"A","text":"x"}],"gold":"A","category":"rel_dir"}"#,
        ]);
        assert!(matches!(load_question_set(f.path()).unwrap_err(), Error::Record { ref field, .. } if field == "options"));
    }

    #[test]
    fn manifest_validation() {
        let ok = file_with(&[r#"{"video_id":"v1","path":"v1.mp4","duration_s":30,"native_fps":30,"scene_id":"scene0001"}"#]);
        assert_eq!(load_video_manifest(ok.path()).unwrap().len(), 1);

        let dup = file_with(&[
            r#"{"video_id":"v1","path":"a.mp4","duration_s":30,"native_fps":30,"scene_id":"s"}"#,
            r#"{"video_id":"v1","path":"b.mp4","duration_s":10,"native_fps":30,"scene_id":"s"}"#,
        ]);
        assert!(load_video_manifest(dup.path()).is_err());

        let zero = file_with(&[r#"{"video_id":"v1","path":"a.mp4","duration_s":0,"native_fps":30,"scene_id":"s"}"#]);
        match load_video_manifest(zero.path()).unwrap_err() {
            Error::Record { field, .. } => assert_eq!(field, "duration_s"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn caption_corpus_order_and_empty_reference() {
        let f = file_with(&[
            r#"{"video_id":"c","reference_camera_caption":"The camera pans left."}"#,
            r#"{"video_id":"a","reference_camera_caption":"The camera tilts up."}"#,
            r#"{"video_id":"b","reference_camera_caption":"Static shot.","candidate_caption":"static"}"#,
        ]);
        let pairs = load_caption_corpus(f.path()).unwrap();
        let ids: Vec<_> = pairs.iter().map(|p| p.video_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(pairs[2].candidate_caption.as_deref(), Some("static"));

        let bad = file_with(&[r#"{"video_id":"a","reference_camera_caption":"  "}"#]);
        assert!(load_caption_corpus(bad.path()).is_err());
    }
}
