//! Run orchestration shared by the command-line tool: backend construction per
//! mode, run manifests, output files and the two ablation drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendConfig, Cassette, CassetteMode, Client};
use crate::error::{Error, Result};
use crate::ingest::{load_video_manifest, CaptionPair, Question, QuestionKind, VideoManifestEntry};
use crate::narrative::VideoNarrative;
use crate::records::{write_records, write_text};
use crate::report::{accuracy_csv, accuracy_markdown, AblationRow, AblationTable, Knob};
use crate::segmenter::{extract_at, segment_count, uniform_timestamps, SegmentConfig};
use crate::sns::{narrate_segment, run_sns, substitute_narratives, EvalOutcome, SnsConfig, SnsRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Serve every call from cassettes; no network.
    Replay,
    /// Call endpoints and append every exchange to the cassettes.
    Record,
    /// Call endpoints without cassettes.
    Live,
}

pub fn client_for(b: &BackendConfig, mode: Mode, role: &str) -> Result<Client> {
    let cassette_path = || {
        b.cassette
            .clone()
            .ok_or_else(|| Error::Config(format!("{role}: no cassette path configured")))
    };
    match mode {
        Mode::Replay => {
            let c = Cassette::open(&cassette_path()?, CassetteMode::Replay)?;
            Ok(Client::offline(b.clone(), Arc::new(c)))
        }
        Mode::Record => {
            let c = Cassette::open(&cassette_path()?, CassetteMode::Record)?;
            Client::http(b.clone(), Some(Arc::new(c)))
        }
        Mode::Live => Client::http(b.clone(), None),
    }
}

/// Everything needed to re-execute a run in replay mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub mode: Mode,
    pub seed: u64,
    /// Configuration as written, before path resolution.
    pub config: serde_json::Value,
    /// Content hash of each backend's cassette file by role.
    pub cassettes: BTreeMap<String, Option<String>>,
}

impl RunManifest {
    pub fn new(command: &str, mode: Mode, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            mode,
            seed,
            config,
            cassettes: BTreeMap::new(),
        }
    }

    pub fn with_cassette(mut self, role: &str, client: &Client) -> Result<Self> {
        let id = match client.cassette() {
            Some(c) => c.content_id()?,
            None => None,
        };
        self.cassettes.insert(role.into(), id);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        write_text(&dir.join("manifest.json"), &text)
    }
}

/// Loads a video manifest, resolving relative video paths against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(load_video_manifest(path)?
        .into_iter()
        .map(|mut e| {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            e
        })
        .collect())
}

pub fn write_outcomes(dir: &Path, label: &str, outcomes: &[EvalOutcome]) -> Result<()> {
    write_records(&dir.join("outcomes.jsonl"), outcomes)?;
    let acc = crate::sns::score_mcq(outcomes)?;
    write_text(&dir.join("accuracy.md"), &accuracy_markdown(&[(label.to_owned(), &acc)]))?;
    write_text(&dir.join("accuracy.csv"), &accuracy_csv(&[(label.to_owned(), &acc)]))
}

pub fn write_sns_outputs(dir: &Path, label: &str, run: &SnsRun) -> Result<()> {
    write_records(&dir.join("narratives.jsonl"), &run.narratives)?;
    write_records(&dir.join("audit.jsonl"), &run.audit)?;
    write_outcomes(dir, label, &run.outcomes)
}

fn narrated_videos(questions: &[Question]) -> BTreeSet<&str> {
    questions
        .iter()
        .filter(|q| q.kind() == QuestionKind::Mcq)
        .map(|q| q.video_id.as_str())
        .collect()
}

/// Mean number of planned segments over the videos a run narrates.
pub fn mean_segments(manifest: &[VideoManifestEntry], questions: &[Question], seg: &SegmentConfig) -> Result<f64> {
    let videos = narrated_videos(questions);
    if videos.is_empty() {
        return Err(Error::Invalid("no videos to segment".into()));
    }
    let mut total = 0usize;
    for v in &videos {
        let entry = manifest
            .iter()
            .find(|e| e.video_id == *v)
            .ok_or_else(|| Error::Invalid(format!("video `{v}` missing from the manifest")))?;
        total += segment_count(entry, seg)?;
    }
    Ok(total as f64 / videos.len() as f64)
}

/// One complete narrative run per segment length, executed in order. Each sub-run
/// writes its outputs under `out/seglen-{L}`. Failed sub-runs become failed rows; the
/// first failure is returned alongside the table.
pub fn ablate_seglen(
    manifest: &[VideoManifestEntry],
    questions: &[Question],
    base: &SnsConfig,
    lengths: &[usize],
    vlm: &Client,
    proxy: &Client,
    out: &Path,
) -> (AblationTable, Option<Error>) {
    let mut rows = Vec::with_capacity(lengths.len());
    let mut first_err = None;
    for &len in lengths {
        let cfg = SnsConfig {
            segment: SegmentConfig {
                sample_fps: base.segment.sample_fps,
                ..SegmentConfig::with_length(len)
            },
            ..base.clone()
        };
        let dir = out.join(format!("seglen-{len}"));
        let result = mean_segments(manifest, questions, &cfg.segment).and_then(|mean| {
            let run = run_sns(manifest, questions, &cfg, vlm, proxy, &dir)?;
            write_sns_outputs(&dir, &format!("L={len}"), &run)?;
            Ok((mean, run.accuracy.overall.pct))
        });
        rows.push(match result {
            Ok((mean, pct)) => AblationRow {
                value: len.to_string(),
                mean_segments: Some(mean),
                score: Some(pct),
                error: None,
            },
            Err(e) => {
                log::error!("segment length {len}: {e}");
                let row = AblationRow {
                    value: len.to_string(),
                    mean_segments: mean_segments(manifest, questions, &cfg.segment).ok(),
                    score: None,
                    error: Some(e.to_string()),
                };
                first_err.get_or_insert(e);
                row
            }
        });
    }
    (
        AblationTable {
            knob: Knob::SegmentLength,
            rows,
        },
        first_err,
    )
}

/// One proxy pass per named proxy over the same stored narratives. No VLM is
/// involved. Outcomes go to `out/proxy-{name}`.
pub fn ablate_proxy(
    questions: &[Question],
    narratives: &BTreeMap<String, VideoNarrative>,
    cfg: &SnsConfig,
    proxies: &[(String, Client)],
    out: &Path,
) -> (AblationTable, Option<Error>) {
    let mut rows = Vec::with_capacity(proxies.len());
    let mut first_err = None;
    for (name, proxy) in proxies {
        let dir = out.join(format!("proxy-{name}"));
        let result = substitute_narratives(questions, narratives, cfg, proxy).and_then(|(outcomes, audit, acc)| {
            write_records(&dir.join("audit.jsonl"), &audit)?;
            write_outcomes(&dir, name, &outcomes)?;
            Ok(acc.overall.pct)
        });
        rows.push(match result {
            Ok(pct) => AblationRow {
                value: name.clone(),
                mean_segments: None,
                score: Some(pct),
                error: None,
            },
            Err(e) => {
                log::error!("proxy {name}: {e}");
                let row = AblationRow {
                    value: name.clone(),
                    mean_segments: None,
                    score: None,
                    error: Some(e.to_string()),
                };
                first_err.get_or_insert(e);
                row
            }
        });
    }
    (
        AblationTable {
            knob: Knob::ProxyModel,
            rows,
        },
        first_err,
    )
}

/// Fills missing candidate captions with the camera part of a narrative generated
/// from `frames_per_segment` frames spread over the whole clip.
pub fn fill_caption_candidates(
    corpus: &[CaptionPair],
    manifest: &[VideoManifestEntry],
    cfg: &SnsConfig,
    vlm: &Client,
    workdir: &Path,
) -> Result<Vec<CaptionPair>> {
    use rayon::prelude::*;
    corpus
        .par_iter()
        .map(|pair| {
            if pair.candidate_caption.is_some() {
                return Ok(pair.clone());
            }
            let entry = manifest
                .iter()
                .find(|e| e.video_id == pair.video_id)
                .ok_or_else(|| Error::Invalid(format!("caption video `{}` missing from the manifest", pair.video_id)))?;
            let ts = uniform_timestamps(entry, cfg.segment.frames_per_segment);
            let frame_dir: PathBuf = workdir.join("frames").join(&entry.video_id);
            let batch = extract_at(entry, &ts, "caption", &cfg.decoder, &frame_dir)?;
            let n = narrate_segment(0, batch.frames, cfg, vlm)?;
            if n.flagged {
                log::warn!("caption for `{}` unparseable; scored as the placeholder", pair.video_id);
            }
            Ok(CaptionPair {
                candidate_caption: Some(n.narrative.camera().to_owned()),
                ..pair.clone()
            })
        })
        .collect()
}
