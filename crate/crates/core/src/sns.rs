//! Spatial narrative scoring: the VLM narrates each segment without seeing any
//! question, and a text-only proxy answers the multiple-choice questions from the
//! assembled narrative alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{Client, Message};
use crate::error::{Error, Result};
use crate::ingest::{AnswerOption, Category, OptionLetter, Question, QuestionKind, VideoManifestEntry};
use crate::narrative::{concat_narratives, parse_narrative, SpatialNarrative, VideoNarrative};
use crate::records::read_records;
use crate::segmenter::{extract_frames, plan_segments, DecoderConfig, SegmentConfig};

pub const NARRATIVE_PROMPT: &str = "Describe what is happening in the video and how the camera moves.\nUse <scene> for the content and <camera> for the camera motion.";

/// Appended to the narrative prompt when the first reply could not be parsed.
pub const FORMAT_REMINDER: &str = "\n\nFormat your reply exactly as: <scene> what is in the video </scene> <camera> how the camera moves </camera>";

pub const PH_NARRATIVE: &str = "{video spatial narrative}";
pub const PH_QUESTION: &str = "{question}";
pub const PH_OPTIONS: &str = "{options}";

pub const PROXY_TEMPLATE: &str = "Instruction: You are provided with multiple segments of dense 3D scene captions from a continuous video. Note that there may be multiple objects of the same category in the scene. Use the described camera motion to infer the spatial layout and answer the given question. You must base your answer on explicit reasoning and your best judgment.

Video Captions:
{video spatial narrative}

Question: {question}

Options:
{options}

Final Instruction: You must provide the final answer using the exact format: <answer>LETTER</answer>. Example: <think>your reasoning</think> <answer>A</answer>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnsConfig {
    pub segment: SegmentConfig,
    pub narrative_prompt: String,
    pub proxy_prompt_template: String,
    pub proxy_thinking_budget: u32,
    #[serde(skip)]
    pub decoder: DecoderConfig,
}

impl Default for SnsConfig {
    fn default() -> Self {
        Self {
            segment: SegmentConfig::default(),
            narrative_prompt: NARRATIVE_PROMPT.into(),
            proxy_prompt_template: PROXY_TEMPLATE.into(),
            proxy_thinking_budget: 1024,
            decoder: DecoderConfig::default(),
        }
    }
}

impl SnsConfig {
    pub fn validate(&self) -> Result<()> {
        self.segment.validate()?;
        if self.narrative_prompt.trim().is_empty() {
            return Err(Error::Config("narrative prompt is empty".into()));
        }
        for ph in [PH_NARRATIVE, PH_QUESTION, PH_OPTIONS] {
            let n = self.proxy_prompt_template.matches(ph).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "proxy template must contain {ph} exactly once, found {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-segment narration result kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentNarration {
    pub segment: usize,
    pub narrative: SpatialNarrative,
    /// Raw VLM replies, one per attempt.
    pub replies: Vec<String>,
    pub flagged: bool,
}

/// One line of a narratives file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeRecord {
    pub video_id: String,
    #[serde(default)]
    pub flagged_segments: Vec<usize>,
    pub narrative: VideoNarrative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum AuditRecord {
    Vlm {
        video_id: String,
        segment: usize,
        attempt: usize,
        prompt: String,
        images: usize,
        reply: String,
    },
    Proxy {
        question_id: String,
        video_id: String,
        prompt: String,
        reply: Option<String>,
        predicted: Option<OptionLetter>,
    },
}

/// Narrates every segment of `entry`, decoding frames under `workdir`.
pub fn generate_video_narrative(
    entry: &VideoManifestEntry,
    cfg: &SnsConfig,
    vlm: &Client,
    workdir: &Path,
) -> Result<(NarrativeRecord, Vec<AuditRecord>)> {
    let plan = plan_segments(entry, &cfg.segment)?;
    let frame_dir = workdir.join("frames").join(&entry.video_id);
    let narrations: Vec<(SegmentNarration, usize)> = plan
        .segments
        .par_iter()
        .map(|segment| {
            let batch = extract_frames(entry, segment, plan.sample_fps, &cfg.decoder, &frame_dir)?;
            let images = batch.frames.len();
            narrate_segment(segment.index, batch.frames, cfg, vlm).map(|n| (n, images))
        })
        .collect::<Result<_>>()?;

    let mut audit = Vec::new();
    let mut entries = Vec::with_capacity(narrations.len());
    let mut flagged_segments = Vec::new();
    for (n, images) in narrations {
        for (attempt, reply) in n.replies.iter().enumerate() {
            let prompt = if attempt == 0 {
                cfg.narrative_prompt.clone()
            } else {
                format!("{}{FORMAT_REMINDER}", cfg.narrative_prompt)
            };
            audit.push(AuditRecord::Vlm {
                video_id: entry.video_id.clone(),
                segment: n.segment,
                attempt,
                prompt,
                images,
                reply: reply.clone(),
            });
        }
        if n.flagged {
            log::warn!("video {} segment {}: narrative unparseable after repair", entry.video_id, n.segment);
            flagged_segments.push(n.segment);
        }
        entries.push((n.segment, n.narrative));
    }
    let narrative = concat_narratives(entry.video_id.clone(), entries)?;
    Ok((
        NarrativeRecord {
            video_id: entry.video_id.clone(),
            flagged_segments,
            narrative,
        },
        audit,
    ))
}

/// Narrates one batch of frames, re-prompting once with a format reminder when the
/// reply does not parse. Requests are keyed by segment length so runs at different
/// lengths never share cassette entries.
pub fn narrate_segment(index: usize, frames: Vec<std::path::PathBuf>, cfg: &SnsConfig, vlm: &Client) -> Result<SegmentNarration> {
    let mut replies = Vec::with_capacity(2);
    let prompts = [cfg.narrative_prompt.clone(), format!("{}{FORMAT_REMINDER}", cfg.narrative_prompt)];
    for prompt in prompts {
        let mut req = vlm.request(vec![Message::user_with_images(prompt, frames.clone())], 0);
        req.context = Some(format!("seg_len={}", cfg.segment.frames_per_segment));
        let reply = vlm.chat(&req)?;
        let parsed = parse_narrative(&reply.text);
        replies.push(reply.text);
        match parsed {
            Ok(narrative) => {
                return Ok(SegmentNarration {
                    segment: index,
                    narrative,
                    replies,
                    flagged: false,
                })
            }
            Err(e) => log::info!("segment {index}: narrative parse failed ({e}), attempt {}", replies.len()),
        }
    }
    Ok(SegmentNarration {
        segment: index,
        narrative: SpatialNarrative::unparseable(),
        replies,
        flagged: true,
    })
}

pub fn render_options(options: &[AnswerOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}. {}", o.letter, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Substitutes the three placeholders of `template` in a single left-to-right pass, so
/// placeholder-like text inside the substituted values is left untouched.
pub fn fill_template(template: &str, narrative: &str, question: &str, options: &str) -> Result<String> {
    let mut slots = Vec::with_capacity(3);
    for (ph, value) in [(PH_NARRATIVE, narrative), (PH_QUESTION, question), (PH_OPTIONS, options)] {
        let mut found = template.match_indices(ph);
        match (found.next(), found.next()) {
            (Some((pos, _)), None) => slots.push((pos, ph.len(), value)),
            _ => return Err(Error::Config(format!("template must contain {ph} exactly once"))),
        }
    }
    slots.sort_by_key(|s| s.0);
    let mut out = String::with_capacity(template.len() + narrative.len() + question.len() + options.len());
    let mut cursor = 0;
    for (pos, len, value) in slots {
        out.push_str(&template[cursor..pos]);
        out.push_str(value);
        cursor = pos + len;
    }
    out.push_str(&template[cursor..]);
    Ok(out)
}

pub fn build_proxy_prompt(narrative: &VideoNarrative, q: &Question, template: &str) -> Result<String> {
    if q.kind() != QuestionKind::Mcq {
        return Err(Error::Invalid(format!(
            "question `{}` is numerical; narrative scoring covers multiple-choice only",
            q.question_id
        )));
    }
    if q.options().is_empty() {
        return Err(Error::Invalid(format!("question `{}` has no options", q.question_id)));
    }
    fill_template(template, &narrative.rendered, &q.text, &render_options(q.options()))
}

pub fn extract_answer(reply: &str) -> Option<OptionLetter> {
    static TAGGED: OnceLock<Regex> = OnceLock::new();
    static BARE: OnceLock<Regex> = OnceLock::new();
    let tagged = TAGGED.get_or_init(|| Regex::new(r"(?i)<answer>\s*([a-f])\s*</answer>").unwrap());
    if let Some(c) = tagged.captures(reply) {
        return OptionLetter::from_char(c[1].chars().next()?);
    }
    let bare = BARE.get_or_init(|| Regex::new(r"\b([A-F])\b").unwrap());
    bare.captures_iter(reply)
        .last()
        .and_then(|c| OptionLetter::from_char(c[1].chars().next()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub question_id: String,
    pub category: Category,
    pub predicted: Option<OptionLetter>,
    pub valid: bool,
    pub correct: bool,
    /// Video whose narrative (or frames) the answer was based on.
    pub narrative_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalOutcome {
    pub fn judge(q: &Question, predicted: Option<OptionLetter>) -> Self {
        let correct = predicted.is_some() && predicted == q.gold_letter();
        Self {
            question_id: q.question_id.clone(),
            category: q.category.clone(),
            predicted,
            valid: predicted.is_some(),
            correct,
            narrative_ref: q.video_id.clone(),
            error: None,
        }
    }

    pub fn failed(q: &Question, error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::judge(q, None)
        }
    }
}

/// A percentage held as integer tenths, so one-decimal values and their differences
/// are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pct(pub i64);

impl Pct {
    /// `100 * correct / total` rounded half-up to one decimal.
    pub fn from_counts(correct: u64, total: u64) -> Self {
        assert!(total > 0, "percentage of an empty total");
        let (c, t) = (correct as i128, total as i128);
        Pct(((2000 * c + t) / (2 * t)) as i64)
    }

    /// Half-up rounding of a real percentage to tenths.
    pub fn from_f64(pct: f64) -> Self {
        Pct((pct * 10.0 + 0.5 + 1e-9).floor() as i64)
    }

    pub fn tenths(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Renders with an explicit sign, e.g. `+9.2`, `-13.2`, `0.0`.
    pub fn signed(self) -> String {
        match self.0.signum() {
            1 => format!("+{self}"),
            _ => self.to_string(),
        }
    }
}

impl fmt::Display for Pct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        write!(f, "{sign}{}.{}", self.0.abs() / 10, self.0.abs() % 10)
    }
}

impl std::ops::Sub for Pct {
    type Output = Pct;
    fn sub(self, rhs: Pct) -> Pct {
        Pct(self.0 - rhs.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
    pub pct: Pct,
}

impl Tally {
    pub fn new(correct: u64, total: u64) -> Self {
        Self {
            correct,
            total,
            pct: Pct::from_counts(correct, total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub per_category: BTreeMap<Category, Tally>,
    pub overall: Tally,
}

impl CategoryAccuracy {
    pub fn from_counts(counts: &[(Category, u64, u64)]) -> Result<Self> {
        let mut per_category = BTreeMap::new();
        let (mut c, mut t) = (0, 0);
        for (cat, correct, total) in counts {
            if *total == 0 || correct > total {
                return Err(Error::Invalid(format!("bad counts {correct}/{total} for {cat}")));
            }
            per_category.insert(cat.clone(), Tally::new(*correct, *total));
            c += correct;
            t += total;
        }
        if t == 0 {
            return Err(Error::Invalid("no outcomes to score".into()));
        }
        Ok(Self {
            per_category,
            overall: Tally::new(c, t),
        })
    }
}

pub fn score_mcq(outcomes: &[EvalOutcome]) -> Result<CategoryAccuracy> {
    if outcomes.is_empty() {
        return Err(Error::Invalid("cannot score an empty outcome list".into()));
    }
    let mut counts: BTreeMap<Category, (u64, u64)> = BTreeMap::new();
    for o in outcomes {
        let e = counts.entry(o.category.clone()).or_default();
        e.0 += u64::from(o.valid && o.correct);
        e.1 += 1;
    }
    let flat: Vec<_> = counts.into_iter().map(|(k, (c, t))| (k, c, t)).collect();
    CategoryAccuracy::from_counts(&flat)
}

/// Asks the proxy every question against the stored narrative of its video.
pub fn proxy_pass(
    questions: &[Question],
    narratives: &BTreeMap<String, VideoNarrative>,
    cfg: &SnsConfig,
    proxy: &Client,
) -> Result<(Vec<EvalOutcome>, Vec<AuditRecord>)> {
    let results: Vec<(EvalOutcome, AuditRecord)> = questions
        .par_iter()
        .map(|q| {
            let narrative = narratives.get(&q.video_id).ok_or_else(|| {
                Error::Invalid(format!("no narrative for video `{}` (question `{}`)", q.video_id, q.question_id))
            })?;
            let prompt = build_proxy_prompt(narrative, q, &cfg.proxy_prompt_template)?;
            let req = proxy.request(vec![Message::user(prompt.clone())], cfg.proxy_thinking_budget);
            let (outcome, reply) = match proxy.chat(&req) {
                Ok(reply) => (EvalOutcome::judge(q, extract_answer(&reply.text)), Some(reply.text)),
                Err(e @ Error::ReplayMiss { .. }) => return Err(e),
                Err(e) if e.is_backend() => {
                    log::warn!("question {}: proxy failed: {e}", q.question_id);
                    (EvalOutcome::failed(q, e.to_string()), None)
                }
                Err(e) => return Err(e),
            };
            let audit = AuditRecord::Proxy {
                question_id: q.question_id.clone(),
                video_id: q.video_id.clone(),
                prompt,
                reply,
                predicted: outcome.predicted,
            };
            Ok((outcome, audit))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

#[derive(Debug, Clone)]
pub struct SnsRun {
    pub narratives: Vec<NarrativeRecord>,
    pub outcomes: Vec<EvalOutcome>,
    pub accuracy: CategoryAccuracy,
    pub audit: Vec<AuditRecord>,
}

fn mcq_only(questions: &[Question]) -> Vec<Question> {
    let (mcq, nq): (Vec<_>, Vec<_>) = questions.iter().cloned().partition(|q| q.kind() == QuestionKind::Mcq);
    if !nq.is_empty() {
        log::warn!("skipping {} numerical question(s): narrative scoring is multiple-choice only", nq.len());
    }
    mcq
}

/// Generates one narrative per referenced video, then runs the proxy over every
/// multiple-choice question.
pub fn run_sns(
    manifest: &[VideoManifestEntry],
    questions: &[Question],
    cfg: &SnsConfig,
    vlm: &Client,
    proxy: &Client,
    workdir: &Path,
) -> Result<SnsRun> {
    cfg.validate()?;
    let questions = mcq_only(questions);
    let by_id: BTreeMap<&str, &VideoManifestEntry> = manifest.iter().map(|e| (e.video_id.as_str(), e)).collect();
    let mut videos = BTreeSet::new();
    for q in &questions {
        if !by_id.contains_key(q.video_id.as_str()) {
            return Err(Error::Invalid(format!(
                "question `{}` references video `{}` missing from the manifest",
                q.question_id, q.video_id
            )));
        }
        videos.insert(q.video_id.as_str());
    }
    let generated: Vec<(NarrativeRecord, Vec<AuditRecord>)> = videos
        .par_iter()
        .map(|v| generate_video_narrative(by_id[v], cfg, vlm, workdir))
        .collect::<Result<_>>()?;

    let mut narratives = Vec::with_capacity(generated.len());
    let mut audit = Vec::new();
    for (record, segment_audit) in generated {
        narratives.push(record);
        audit.extend(segment_audit);
    }
    let store: BTreeMap<String, VideoNarrative> =
        narratives.iter().map(|r| (r.video_id.clone(), r.narrative.clone())).collect();
    let (outcomes, proxy_audit) = proxy_pass(&questions, &store, cfg, proxy)?;
    audit.extend(proxy_audit);
    let accuracy = score_mcq(&outcomes)?;
    Ok(SnsRun {
        narratives,
        outcomes,
        accuracy,
        audit,
    })
}

/// Scores questions against externally supplied narratives (for example written by
/// a person) without any VLM involvement.
pub fn substitute_narratives(
    questions: &[Question],
    narratives: &BTreeMap<String, VideoNarrative>,
    cfg: &SnsConfig,
    proxy: &Client,
) -> Result<(Vec<EvalOutcome>, Vec<AuditRecord>, CategoryAccuracy)> {
    cfg.validate()?;
    let questions = mcq_only(questions);
    if questions.is_empty() {
        return Err(Error::Invalid("no multiple-choice questions to score".into()));
    }
    if let Some(q) = questions.iter().find(|q| !narratives.contains_key(&q.video_id)) {
        return Err(Error::Invalid(format!(
            "no narrative supplied for video `{}` (question `{}`)",
            q.video_id, q.question_id
        )));
    }
    let (outcomes, audit) = proxy_pass(&questions, narratives, cfg, proxy)?;
    let accuracy = score_mcq(&outcomes)?;
    Ok((outcomes, audit, accuracy))
}

/// Loads a narratives file into a video-keyed store.
pub fn load_narratives(path: &Path) -> Result<BTreeMap<String, VideoNarrative>> {
    let mut store = BTreeMap::new();
    for (line, rec) in read_records::<NarrativeRecord>(path)? {
        if rec.video_id != rec.narrative.video_id {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                field: "video_id".into(),
                reason: "does not match the narrative's video".into(),
            });
        }
        if store.insert(rec.video_id.clone(), rec.narrative).is_some() {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                field: "video_id".into(),
                reason: format!("duplicate video `{}`", rec.video_id),
            });
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{completion_body, wire_user_text, BackendConfig, FnTransport};
    use crate::ingest::Answer;
    use serde_json::Value;
    use std::sync::Arc;

    fn letter(c: char) -> OptionLetter {
        OptionLetter::from_char(c).unwrap()
    }

    fn mcq(id: &str, video: &str, cat: Category, gold: char) -> Question {
        Question {
            question_id: id.into(),
            video_id: video.into(),
            text: format!("Question {id}?"),
            category: cat,
            answer: Answer::Mcq {
                options: "ABCD"
                    .chars()
                    .map(|c| AnswerOption {
                        letter: letter(c),
                        text: format!("option {c}"),
                    })
                    .collect(),
                gold: letter(gold),
            },
        }
    }

    fn narrative() -> VideoNarrative {
        concat_narratives(
            "v1",
            vec![
                (0, SpatialNarrative::new("a sofa", "pan left").unwrap()),
                (1, SpatialNarrative::new("a lamp", "dolly in").unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn default_template_is_valid() {
        SnsConfig::default().validate().unwrap();
        let bad = SnsConfig {
            proxy_prompt_template: "{question} {options}".into(),
            ..SnsConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn proxy_prompt_contains_options_and_format_instruction() {
        let q = mcq("q1", "v1", Category::RelDir, 'B');
        let p = build_proxy_prompt(&narrative(), &q, PROXY_TEMPLATE).unwrap();
        for c in "ABCD".chars() {
            assert!(p.contains(&format!("\n{c}. option {c}")));
        }
        assert!(p.contains("Segment 1: <scene> a sofa <camera> pan left\nSegment 2:"));
        assert!(p.contains("Question: Question q1?"));
        assert!(p.ends_with("<think>your reasoning</think> <answer>A</answer>"));
        assert_eq!(p, build_proxy_prompt(&narrative(), &q, PROXY_TEMPLATE).unwrap());
    }

    #[test]
    fn proxy_prompt_rejects_nq_and_empty_options() {
        let mut q = mcq("q1", "v1", Category::RelDir, 'A');
        q.answer = Answer::Mcq {
            options: vec![],
            gold: letter('A'),
        };
        assert!(build_proxy_prompt(&narrative(), &q, PROXY_TEMPLATE).is_err());
        q.answer = Answer::Nq { gold: 3.0 };
        assert!(build_proxy_prompt(&narrative(), &q, PROXY_TEMPLATE).is_err());
    }

    #[test]
    fn substitution_is_single_pass() {
        let out = fill_template("[{question}|{options}|{video spatial narrative}]", "N {question}", "Q {options}", "O").unwrap();
        assert_eq!(out, "[Q {options}|O|N {question}]");
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_answer("<think>...</think> <answer>A</answer>"), Some(letter('A')));
        assert_eq!(extract_answer("I believe the answer is C"), Some(letter('C')));
        assert_eq!(extract_answer("no letters here"), None);
        assert_eq!(extract_answer("<answer> d </answer> <answer>B</answer>"), Some(letter('D')));
        assert_eq!(extract_answer("<answer>G</answer>"), None);
    }

    #[test]
    fn pct_rounding_and_signs() {
        assert_eq!(Pct::from_counts(101, 198).to_string(), "51.0");
        assert_eq!(Pct::from_counts(34, 49).to_string(), "69.4");
        assert_eq!(Pct::from_counts(28, 49).to_string(), "57.1");
        assert_eq!(Pct::from_counts(1, 8).to_string(), "12.5");
        assert_eq!(Pct::from_counts(1, 16).to_string(), "6.3");
        assert_eq!((Pct(328) - Pct(460)).signed(), "-13.2");
        assert_eq!((Pct(510) - Pct(418)).signed(), "+9.2");
        assert_eq!(Pct(0).signed(), "0.0");
        assert_eq!(Pct(-5).to_string(), "-0.5");
    }

    #[test]
    fn score_counts_invalid_as_incorrect() {
        let q = mcq("q", "v", Category::RelDist, 'A');
        let outcomes = vec![
            EvalOutcome::judge(&q, Some(letter('A'))),
            EvalOutcome::judge(&q, None),
            EvalOutcome::failed(&q, "boom".into()),
            EvalOutcome::judge(&q, Some(letter('B'))),
        ];
        let acc = score_mcq(&outcomes).unwrap();
        assert_eq!(acc.overall, Tally::new(1, 4));
        assert!(score_mcq(&[]).is_err());
    }

    fn scripted_proxy(answer: char) -> Client {
        let t = FnTransport(move |_: &Value| Ok((200, completion_body(&format!("<answer>{answer}</answer>")))));
        Client::with_transport(BackendConfig::default(), Arc::new(t), None)
    }

    #[test]
    fn substitution_mode_uses_no_vlm_and_checks_coverage() {
        let store: BTreeMap<_, _> = [("v1".to_string(), narrative())].into_iter().collect();
        let qs = vec![mcq("q1", "v1", Category::RelDir, 'B'), mcq("q2", "v1", Category::RoutePlan, 'C')];
        let proxy = scripted_proxy('B');
        let (outcomes, audit, acc) = substitute_narratives(&qs, &store, &SnsConfig::default(), &proxy).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert_eq!(audit.len(), 2);
        assert_eq!(acc.overall, Tally::new(1, 2));
        assert_eq!(proxy.chat_calls(), 2);

        let missing = vec![mcq("q3", "v9", Category::RelDir, 'A')];
        assert!(substitute_narratives(&missing, &store, &SnsConfig::default(), &proxy).is_err());
        assert!(substitute_narratives(&[], &store, &SnsConfig::default(), &proxy).is_err());
    }

    #[test]
    fn proxy_backend_failure_marks_outcome_invalid() {
        let t = FnTransport(|body: &Value| {
            if wire_user_text(body).contains("q2") {
                Ok((400, "rejected".to_string()))
            } else {
                Ok((200, completion_body("<answer>B</answer>")))
            }
        });
        let proxy = Client::with_transport(BackendConfig::default(), Arc::new(t), None);
        let store: BTreeMap<_, _> = [("v1".to_string(), narrative())].into_iter().collect();
        let qs = vec![mcq("q1", "v1", Category::RelDir, 'B'), mcq("q2", "v1", Category::RelDir, 'B')];
        let (outcomes, _, acc) = substitute_narratives(&qs, &store, &SnsConfig::default(), &proxy).unwrap();
        assert!(outcomes[0].correct);
        assert!(!outcomes[1].valid && outcomes[1].error.is_some());
        assert_eq!(acc.overall, Tally::new(1, 2));
    }
}
