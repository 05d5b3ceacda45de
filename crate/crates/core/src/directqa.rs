//! Conventional question answering where the VLM sees the frames and the question, and
//! the comparison of its accuracy against the narrative score.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{Client, Message};
use crate::error::{Error, Result};
use crate::ingest::{Answer, Category, Question, VideoManifestEntry};
use crate::segmenter::{extract_at, uniform_timestamps, DecoderConfig};
use crate::sns::{extract_answer, render_options, score_mcq, CategoryAccuracy, EvalOutcome, Pct};

pub const MCQ_SUFFIX: &str = "Please answer with the option's letter from the given choices (e.g., A, B, etc.) directly.";
pub const NQ_SUFFIX: &str = "Please answer the question using a numerical value (e.g., 42 or 3.1) directly.";

const BOUNDARY_EPS: f64 = 1e-9;

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    pub mcq_prompt_suffix: String,
    pub nq_prompt_suffix: String,
    pub frames_per_video: usize,
    pub thresholds: Vec<f64>,
    #[serde(skip)]
    pub decoder: DecoderConfig,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            mcq_prompt_suffix: MCQ_SUFFIX.into(),
            nq_prompt_suffix: NQ_SUFFIX.into(),
            frames_per_video: 32,
            thresholds: default_thresholds(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl DirectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mcq_prompt_suffix.trim().is_empty() || self.nq_prompt_suffix.trim().is_empty() {
            return Err(Error::Config("prompt suffixes must be nonempty".into()));
        }
        if self.frames_per_video == 0 {
            return Err(Error::Config("frames_per_video must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("thresholds must be a nonempty list inside (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn direct_prompt(q: &Question, cfg: &DirectConfig) -> String {
    match &q.answer {
        Answer::Mcq { options, .. } => format!("{}\n{}\n{}", q.text, render_options(options), cfg.mcq_prompt_suffix),
        Answer::Nq { .. } => format!("{}\n{}", q.text, cfg.nq_prompt_suffix),
    }
}

/// First numeric literal in `text`.
pub fn parse_number(text: &str) -> Option<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap());
    re.find(text).and_then(|m| m.as_str().parse().ok())
}

/// Mean over thresholds `t` of `[|pred - gold| / |gold| < 1 - t]`. The comparison
/// is strict with a small margin so that exact boundaries such as pred 7, gold 10 at
/// t = 0.7 fail regardless of how `1 - t` rounds.
pub fn score_nq(pred: f64, gold: f64, thresholds: &[f64]) -> Result<f64> {
    if gold == 0.0 || !gold.is_finite() {
        return Err(Error::Invalid(format!("gold value {gold} cannot anchor a relative error")));
    }
    if thresholds.is_empty() {
        return Err(Error::Invalid("no thresholds".into()));
    }
    if !pred.is_finite() {
        return Ok(0.0);
    }
    let rel = (pred - gold).abs() / gold.abs();
    let hits = thresholds.iter().filter(|&&t| rel < 1.0 - t - BOUNDARY_EPS).count();
    Ok(hits as f64 / thresholds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NqOutcome {
    pub question_id: String,
    pub category: Category,
    pub predicted: Option<f64>,
    pub gold: f64,
    pub score: f64,
    /// Set when the reply held no number, the call failed, or the gold value is zero.
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum DirectAudit {
    Direct {
        question_id: String,
        video_id: String,
        prompt: String,
        images: usize,
        reply: Option<String>,
    },
}

#[derive(Debug, Clone)]
pub struct DirectRun {
    pub mcq: Vec<EvalOutcome>,
    pub nq: Vec<NqOutcome>,
    pub accuracy: Option<CategoryAccuracy>,
    /// Mean NQ score per category and overall, as percentages.
    pub nq_scores: BTreeMap<Category, f64>,
    pub nq_overall: Option<f64>,
    pub audit: Vec<DirectAudit>,
}

enum Reply {
    Text(String),
    Failed(String),
}

pub fn run_direct(
    manifest: &[VideoManifestEntry],
    questions: &[Question],
    cfg: &DirectConfig,
    vlm: &Client,
    workdir: &Path,
) -> Result<DirectRun> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(Error::Invalid("no questions to evaluate".into()));
    }
    let by_id: BTreeMap<&str, &VideoManifestEntry> = manifest.iter().map(|e| (e.video_id.as_str(), e)).collect();
    let mut videos = BTreeSet::new();
    for q in questions {
        if !by_id.contains_key(q.video_id.as_str()) {
            return Err(Error::Invalid(format!(
                "question `{}` references video `{}` missing from the manifest",
                q.question_id, q.video_id
            )));
        }
        videos.insert(q.video_id.as_str());
    }
    let frame_dir = workdir.join("frames");
    let frames: BTreeMap<&str, Vec<PathBuf>> = videos
        .par_iter()
        .map(|v| {
            let entry = by_id[v];
            let ts = uniform_timestamps(entry, cfg.frames_per_video);
            let batch = extract_at(entry, &ts, "direct", &cfg.decoder, &frame_dir.join(v))?;
            Ok((*v, batch.frames))
        })
        .collect::<Result<_>>()?;

    let replies: Vec<(Reply, DirectAudit)> = questions
        .par_iter()
        .map(|q| {
            let prompt = direct_prompt(q, cfg);
            let images = frames[q.video_id.as_str()].clone();
            let n_images = images.len();
            let req = vlm.request(vec![Message::user_with_images(prompt.clone(), images)], 0);
            let reply = match vlm.chat(&req) {
                Ok(r) => Reply::Text(r.text),
                Err(e @ Error::ReplayMiss { .. }) => return Err(e),
                Err(e) if e.is_backend() => Reply::Failed(e.to_string()),
                Err(e) => return Err(e),
            };
            let audit = DirectAudit::Direct {
                question_id: q.question_id.clone(),
                video_id: q.video_id.clone(),
                prompt,
                images: n_images,
                reply: match &reply {
                    Reply::Text(t) => Some(t.clone()),
                    Reply::Failed(_) => None,
                },
            };
            Ok((reply, audit))
        })
        .collect::<Result<_>>()?;

    let mut mcq = Vec::new();
    let mut nq = Vec::new();
    let mut audit = Vec::with_capacity(replies.len());
    for (q, (reply, a)) in questions.iter().zip(replies) {
        audit.push(a);
        match (&q.answer, reply) {
            (Answer::Mcq { .. }, Reply::Text(t)) => mcq.push(EvalOutcome::judge(q, extract_answer(&t))),
            (Answer::Mcq { .. }, Reply::Failed(e)) => mcq.push(EvalOutcome::failed(q, e)),
            (Answer::Nq { gold }, reply) => nq.push(judge_nq(q, *gold, reply, &cfg.thresholds)),
        }
    }

    let accuracy = if mcq.is_empty() { None } else { Some(score_mcq(&mcq)?) };
    let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
    for o in &nq {
        let e = sums.entry(o.category.clone()).or_default();
        e.0 += o.score;
        e.1 += 1;
    }
    let nq_overall = (!nq.is_empty()).then(|| 100.0 * nq.iter().map(|o| o.score).sum::<f64>() / nq.len() as f64);
    let nq_scores = sums.into_iter().map(|(k, (s, n))| (k, 100.0 * s / n as f64)).collect();
    Ok(DirectRun {
        mcq,
        nq,
        accuracy,
        nq_scores,
        nq_overall,
        audit,
    })
}

fn judge_nq(q: &Question, gold: f64, reply: Reply, thresholds: &[f64]) -> NqOutcome {
    let mut out = NqOutcome {
        question_id: q.question_id.clone(),
        category: q.category.clone(),
        predicted: None,
        gold,
        score: 0.0,
        flagged: true,
        error: None,
    };
    match reply {
        Reply::Failed(e) => out.error = Some(e),
        Reply::Text(t) => match parse_number(&t) {
            None => out.error = Some("reply contains no number".into()),
            Some(p) => {
                out.predicted = Some(p);
                match score_nq(p, gold, thresholds) {
                    Ok(s) => {
                        out.score = s;
                        out.flagged = false;
                    }
                    Err(e) => out.error = Some(e.to_string()),
                }
            }
        },
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRow {
    /// `None` for the overall row.
    pub category: Option<Category>,
    pub direct: Pct,
    pub sns: Pct,
    pub gap: Pct,
}

impl GapRow {
    pub fn new(category: Option<Category>, direct: Pct, sns: Pct) -> Self {
        Self {
            category,
            direct,
            sns,
            gap: sns - direct,
        }
    }

    /// `direct / sns (±gap)`, e.g. `46.0 / 32.8 (-13.2)`.
    pub fn cell(&self) -> String {
        format!("{} / {} ({})", self.direct, self.sns, self.gap.signed())
    }
}

pub fn gap_report(direct: &CategoryAccuracy, sns: &CategoryAccuracy) -> Result<Vec<GapRow>> {
    let dk: Vec<_> = direct.per_category.keys().collect();
    let sk: Vec<_> = sns.per_category.keys().collect();
    if dk != sk {
        return Err(Error::Invalid(format!(
            "category sets differ: direct {:?} vs narrative {:?}",
            dk.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            sk.iter().map(|c| c.as_str()).collect::<Vec<_>>()
        )));
    }
    let mut rows: Vec<GapRow> = direct
        .per_category
        .iter()
        .map(|(cat, d)| GapRow::new(Some(cat.clone()), d.pct, sns.per_category[cat].pct))
        .collect();
    rows.push(GapRow::new(None, direct.overall.pct, sns.overall.pct));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnswerOption, OptionLetter};

    #[test]
    fn nq_worked_examples() {
        let th = default_thresholds();
        assert_eq!(score_nq(4.0, 5.0, &th).unwrap(), 0.6);
        assert_eq!(score_nq(5.0, 5.0, &th).unwrap(), 1.0);
        assert_eq!(score_nq(10.0, 1.0, &th).unwrap(), 0.0);
        assert!(score_nq(1.0, 0.0, &th).is_err());
        // 0.3 is not below 1 - 0.7
        assert_eq!(score_nq(7.0, 10.0, &th).unwrap(), 0.4);
    }

    #[test]
    fn thresholds_are_exact_twentieths() {
        let th = default_thresholds();
        assert_eq!(th.len(), 10);
        assert_eq!(th[0], 0.5);
        assert_eq!(th[9], 0.95);
    }

    #[test]
    fn numbers_are_parsed_from_free_text() {
        assert_eq!(parse_number("about 3.1 meters"), Some(3.1));
        assert_eq!(parse_number("42"), Some(42.0));
        assert_eq!(parse_number("-2.5e1 units"), Some(-25.0));
        assert_eq!(parse_number("unknown"), None);
    }

    #[test]
    fn prompts_carry_the_matching_suffix() {
        let l = |c| OptionLetter::from_char(c).unwrap();
        let q = Question {
            question_id: "q".into(),
            video_id: "v".into(),
            text: "Which is closer?".into(),
            category: Category::RelDist,
            answer: Answer::Mcq {
                options: vec![
                    AnswerOption { letter: l('A'), text: "chair".into() },
                    AnswerOption { letter: l('B'), text: "table".into() },
                ],
                gold: l('A'),
            },
        };
        let cfg = DirectConfig::default();
        assert_eq!(direct_prompt(&q, &cfg), format!("Which is closer?\nA. chair\nB. table\n{MCQ_SUFFIX}"));
        let nq = Question {
            answer: Answer::Nq { gold: 2.0 },
            ..q
        };
        assert_eq!(direct_prompt(&nq, &cfg), format!("Which is closer?\n{NQ_SUFFIX}"));
    }

    #[test]
    fn gap_cells_and_mismatch() {
        assert_eq!(GapRow::new(None, Pct(460), Pct(328)).cell(), "46.0 / 32.8 (-13.2)");
        assert_eq!(GapRow::new(None, Pct(418), Pct(510)).cell(), "41.8 / 51.0 (+9.2)");
        let a = CategoryAccuracy::from_counts(&[(Category::RelDir, 1, 2)]).unwrap();
        let b = CategoryAccuracy::from_counts(&[(Category::RelDist, 1, 2)]).unwrap();
        assert!(gap_report(&a, &b).is_err());
        let rows = gap_report(&a, &a).unwrap();
        assert!(rows.iter().all(|r| r.gap == Pct(0)));
        assert_eq!(rows.len(), 2);
    }
}
