//! Training-corpus construction: tagged narrative targets expanded over prompt
//! templates, mixed with QA sources, filtered, balanced, and sampled for quality
//! checks. All randomness is derived from one seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{Client, Message};
use crate::error::{Error, Result};
use crate::ingest::{OptionLetter, VideoManifestEntry};
use crate::narrative::{parse_narrative, serialize_narrative, SpatialNarrative, CAMERA_OPEN, SCENE_OPEN};
use crate::segmenter::{extract_at, uniform_timestamps, DecoderConfig};
use crate::sns::Pct;

pub const CAPTION_PROMPT: &str = "Provide a concise description of the scene and objects visible in this video. Focus strictly on the environment and static/dynamic objects.\nDo NOT describe the camera motion (ignore zooming, panning, or shakiness).";

/// Shipped narrative prompt templates (versioned text resource).
pub const TEMPLATES_RESOURCE: &str = include_str!("../resources/narrative_templates.txt");

// Motion verbs that should not appear in a camera-free scene caption.
const CORE_MOTION_VERBS: &[&str] = &[
    "pan", "pans", "panning", "tilt", "tilts", "tilting", "dolly", "dollies", "dollying", "zoom",
    "zooms", "zooming", "trucking", "pedestal", "arcing",
];

/// Deterministic generator for the stream named `label` under `seed`.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub scene_id: String,
    pub scene_caption: String,
    pub camera_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
}

impl VideoAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.scene_caption.trim().is_empty() || self.camera_caption.trim().is_empty() {
            return Err(Error::Invalid(format!("annotation `{}` has an empty caption", self.video_id)));
        }
        let words = crate::capmetrics::tokenize(&self.scene_caption);
        if let Some(w) = words.tokens().iter().find(|w| CORE_MOTION_VERBS.contains(&w.as_str())) {
            log::warn!("scene caption of `{}` mentions camera motion (`{w}`)", self.video_id);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Narrative,
    QaImage,
    QaMultiView,
    QaVideo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub sample_id: String,
    pub kind: SampleKind,
    #[serde(default)]
    pub media: Vec<String>,
    pub prompt: String,
    pub target: String,
    pub scene_id: String,
    /// Gold letter of multiple-choice QA samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<OptionLetter>,
}

impl DatasetSample {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SampleKind::Narrative => parse_narrative(&self.target).map(|_| ()).map_err(|e| {
                Error::Invalid(format!("sample `{}`: narrative target does not parse: {e}", self.sample_id))
            }),
            _ if self.target.trim().is_empty() => {
                Err(Error::Invalid(format!("sample `{}` has an empty target", self.sample_id)))
            }
            _ => Ok(()),
        }
    }
}

pub fn compose_narrative_target(scene_caption: &str, camera_caption: &str) -> Result<String> {
    let n = SpatialNarrative::new(scene_caption, camera_caption).map_err(|e| {
        Error::Invalid(format!("cannot compose narrative target: {e}"))
    })?;
    Ok(serialize_narrative(&n))
}

/// Parses a template resource: one template per line, `#` comments and blank lines
/// skipped. Every template must mention both tags.
pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let templates: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    if templates.is_empty() {
        return Err(Error::Invalid("template file contains no templates".into()));
    }
    if let Some(t) = templates.iter().find(|t| !t.contains(SCENE_OPEN) || !t.contains(CAMERA_OPEN)) {
        return Err(Error::Invalid(format!("template does not mention both tags: {t}")));
    }
    Ok(templates)
}

pub fn shipped_templates() -> Vec<String> {
    parse_templates(TEMPLATES_RESOURCE).expect("shipped templates are valid")
}

pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&text)
}

/// Expands annotations into `target_count` narrative samples. Each video gets
/// `floor` or `ceil` of `target_count / n` samples; the videos receiving the extra
/// sample and each video's template order come from seeded shuffles.
pub fn expand_templates(
    annotations: &[VideoAnnotation],
    templates: &[String],
    target_count: usize,
    seed: u64,
) -> Result<Vec<DatasetSample>> {
    if templates.is_empty() {
        return Err(Error::Invalid("no templates".into()));
    }
    let n = annotations.len();
    if n == 0 || target_count < n {
        return Err(Error::Invalid(format!(
            "target count {target_count} is smaller than the {n} annotations"
        )));
    }
    let mut seen = HashSet::new();
    for a in annotations {
        a.validate()?;
        if !seen.insert(a.video_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate annotation for video `{}`", a.video_id)));
        }
    }

    let base = target_count / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "expand/extra"));
    let mut counts = vec![base; n];
    for &i in &order[..target_count % n] {
        counts[i] += 1;
    }

    let mut out = Vec::with_capacity(target_count);
    for (a, &count) in annotations.iter().zip(&counts) {
        let target = compose_narrative_target(&a.scene_caption, &a.camera_caption)?;
        let mut tmpl: Vec<usize> = (0..templates.len()).collect();
        tmpl.shuffle(&mut derive_rng(seed, &format!("expand/templates/{}", a.video_id)));
        for k in 0..count {
            out.push(DatasetSample {
                sample_id: format!("{}-nar-{k}", a.video_id),
                kind: SampleKind::Narrative,
                media: vec![a.media.clone().unwrap_or_else(|| a.video_id.clone())],
                prompt: templates[tmpl[k % tmpl.len()]].clone(),
                target: target.clone(),
                scene_id: a.scene_id.clone(),
                gold: None,
            });
        }
    }
    Ok(out)
}

/// Concatenates the narrative samples with each QA source (relabelled to its kind)
/// and shuffles the result.
pub fn mix_dataset(
    narrative: Vec<DatasetSample>,
    qa_sources: Vec<(Vec<DatasetSample>, SampleKind)>,
    shuffle_seed: u64,
) -> Vec<DatasetSample> {
    let mut all = narrative;
    for (samples, kind) in qa_sources {
        all.extend(samples.into_iter().map(|s| DatasetSample { kind, ..s }));
    }
    all.shuffle(&mut derive_rng(shuffle_seed, "mix"));
    all
}

pub fn filter_scene_overlap(
    samples: Vec<DatasetSample>,
    benchmark_scene_ids: &BTreeSet<String>,
) -> (Vec<DatasetSample>, Vec<DatasetSample>) {
    samples
        .into_iter()
        .partition(|s| !benchmark_scene_ids.contains(&s.scene_id))
}

/// Drops samples from the most frequent gold letter (ties broken alphabetically,
/// victim chosen by the seeded generator) until every letter's share is at most
/// `max_share` or all letters are equally frequent. Samples without a gold letter are
/// never dropped and are not counted.
pub fn balance_answers(samples: Vec<DatasetSample>, max_share: f64, seed: u64) -> Vec<DatasetSample> {
    let mut by_letter: BTreeMap<OptionLetter, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(g) = s.gold {
            by_letter.entry(g).or_default().push(i);
        }
    }
    if by_letter.len() < 2 {
        if !by_letter.is_empty() {
            log::warn!("all gold answers share one letter; nothing to rebalance");
        }
        return samples;
    }
    let mut rng = derive_rng(seed, "balance");
    let mut dropped = vec![false; samples.len()];
    loop {
        let total: usize = by_letter.values().map(Vec::len).sum();
        let max = by_letter.values().map(Vec::len).max().unwrap_or(0);
        let min = by_letter.values().map(Vec::len).min().unwrap_or(0);
        if within_share(max, total, max_share) || max == min {
            break;
        }
        let pool = by_letter.values_mut().find(|v| v.len() == max).expect("max exists");
        let victim = pool.remove(rng.random_range(0..pool.len()));
        dropped[victim] = true;
    }
    samples
        .into_iter()
        .zip(dropped)
        .filter_map(|(s, d)| (!d).then_some(s))
        .collect()
}

pub fn within_share(count: usize, total: usize, max_share: f64) -> bool {
    count as f64 <= max_share * total as f64 + 1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcMark {
    pub semantic_fidelity: bool,
    pub motion_consistency: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcManifest {
    pub sampled_ids: Vec<String>,
    pub seed: u64,
    pub criteria: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<BTreeMap<String, QcMark>>,
}

pub fn qc_sample(samples: &[DatasetSample], n: usize, seed: u64) -> Result<QcManifest> {
    if n > samples.len() {
        return Err(Error::Invalid(format!("cannot sample {n} of {} samples", samples.len())));
    }
    let mut rng = derive_rng(seed, "qc");
    let sampled_ids = rand::seq::index::sample(&mut rng, samples.len(), n)
        .into_iter()
        .map(|i| samples[i].sample_id.clone())
        .collect();
    Ok(QcManifest {
        sampled_ids,
        seed,
        criteria: vec!["semantic_fidelity".into(), "motion_consistency".into()],
        marks: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcReport {
    pub n: usize,
    pub semantic_fidelity: Pct,
    pub motion_consistency: Pct,
    pub both: Pct,
}

pub fn qc_aggregate(manifest: &QcManifest) -> Result<QcReport> {
    let marks = manifest
        .marks
        .as_ref()
        .ok_or_else(|| Error::Invalid("QC manifest carries no marks".into()))?;
    let n = manifest.sampled_ids.len();
    if n == 0 {
        return Err(Error::Invalid("QC manifest has no sampled ids".into()));
    }
    let (mut sem, mut mot, mut both) = (0u64, 0u64, 0u64);
    for id in &manifest.sampled_ids {
        let m = marks
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("no QC mark for sample `{id}`")))?;
        sem += u64::from(m.semantic_fidelity);
        mot += u64::from(m.motion_consistency);
        both += u64::from(m.semantic_fidelity && m.motion_consistency);
    }
    let n64 = n as u64;
    Ok(QcReport {
        n,
        semantic_fidelity: Pct::from_counts(sem, n64),
        motion_consistency: Pct::from_counts(mot, n64),
        both: Pct::from_counts(both, n64),
    })
}

/// Camera-free scene captions for each video, produced by the VLM from `frames`
/// uniformly sampled frames.
pub fn generate_scene_captions(
    entries: &[VideoManifestEntry],
    frames: usize,
    decoder: &DecoderConfig,
    vlm: &Client,
    workdir: &Path,
) -> Result<Vec<(String, String)>> {
    entries
        .par_iter()
        .map(|e| {
            let ts = uniform_timestamps(e, frames);
            let batch = extract_at(e, &ts, "caption", decoder, &workdir.join("frames").join(&e.video_id))?;
            let req = vlm.request(vec![Message::user_with_images(CAPTION_PROMPT, batch.frames)], 0);
            let reply = vlm.chat(&req)?;
            Ok((e.video_id.clone(), reply.text.trim().to_owned()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(i: usize, scene: &str) -> VideoAnnotation {
        VideoAnnotation {
            video_id: format!("v{i:03}"),
            scene_id: scene.into(),
            scene_caption: format!("A room with object {i}."),
            camera_caption: "The camera pans right.".into(),
            media: None,
        }
    }

    fn qa(id: &str, gold: char) -> DatasetSample {
        DatasetSample {
            sample_id: id.into(),
            kind: SampleKind::QaVideo,
            media: vec![],
            prompt: "q".into(),
            target: gold.to_string(),
            scene_id: "s".into(),
            gold: OptionLetter::from_char(gold),
        }
    }

    #[test]
    fn compose_examples() {
        assert_eq!(
            compose_narrative_target("A bed.", "The camera pans right.").unwrap(),
            "<scene> A bed. <camera> The camera pans right."
        );
        assert!(compose_narrative_target("a <camera> b", "c").is_err());
        assert!(compose_narrative_target("", "c").is_err());
    }

    #[test]
    fn shipped_templates_are_twenty_five() {
        let t = shipped_templates();
        assert_eq!(t.len(), 25);
        assert_eq!(t.iter().collect::<BTreeSet<_>>().len(), 25);
        assert!(TEMPLATES_RESOURCE.starts_with("# narrative-templates v1"));
    }

    #[test]
    fn expansion_counts_and_determinism() {
        let anns: Vec<_> = (0..30).map(|i| ann(i, "s")).collect();
        let t = shipped_templates();
        let a = expand_templates(&anns, &t, 100, 7).unwrap();
        assert_eq!(a, expand_templates(&anns, &t, 100, 7).unwrap());
        assert_eq!(a.len(), 100);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &a {
            *per.entry(s.media[0].as_str()).or_default() += 1;
            assert!(t.contains(&s.prompt));
            s.validate().unwrap();
        }
        assert!(per.values().all(|&c| c == 3 || c == 4));
        assert_eq!(per.values().filter(|&&c| c == 4).count(), 10);
        assert!(expand_templates(&anns, &t, 29, 7).is_err());
        let one = expand_templates(&anns[..1], &t[..1], 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].sample_id, "v000-nar-0");
    }

    #[test]
    fn templates_within_a_video_are_distinct_until_exhausted() {
        let t = shipped_templates();
        let s = expand_templates(&[ann(0, "s")], &t, 25, 3).unwrap();
        assert_eq!(s.iter().map(|x| &x.prompt).collect::<BTreeSet<_>>().len(), 25);
    }

    #[test]
    fn mix_preserves_kind_counts() {
        let nar = expand_templates(&[ann(0, "s")], &shipped_templates(), 4, 1).unwrap();
        let mixed = mix_dataset(nar, vec![(vec![qa("a", 'A'), qa("b", 'B')], SampleKind::QaImage)], 5);
        assert_eq!(mixed.len(), 6);
        assert_eq!(mixed.iter().filter(|s| s.kind == SampleKind::QaImage).count(), 2);
        assert!(mix_dataset(vec![], vec![], 1).is_empty());
    }

    #[test]
    fn scene_filter_partitions() {
        let samples: Vec<_> = ["s1", "s2", "s3", "s1", "s4"]
            .iter()
            .enumerate()
            .map(|(i, sc)| DatasetSample {
                scene_id: sc.to_string(),
                ..qa(&i.to_string(), 'A')
            })
            .collect();
        let bench: BTreeSet<String> = ["s1".to_string()].into();
        let (kept, removed) = filter_scene_overlap(samples.clone(), &bench);
        assert_eq!((kept.len(), removed.len()), (3, 2));
        let (kept, removed) = filter_scene_overlap(samples, &BTreeSet::new());
        assert_eq!((kept.len(), removed.len()), (5, 0));
    }

    #[test]
    fn balance_reaches_share_cap() {
        let mut s: Vec<_> = (0..90).map(|i| qa(&format!("a{i}"), 'A')).collect();
        s.extend((0..10).map(|i| qa(&format!("b{i}"), 'B')));
        let out = balance_answers(s.clone(), 0.35, 1);
        // two letters can never get below a 50% share, so the loop levels them
        let a = out.iter().filter(|x| x.gold == OptionLetter::from_char('A')).count();
        assert_eq!(a, 10);
        assert_eq!(out.len(), 20);
        assert_eq!(balance_answers(s.clone(), 0.35, 1), out);

        let single: Vec<_> = (0..5).map(|i| qa(&i.to_string(), 'C')).collect();
        assert_eq!(balance_answers(single.clone(), 0.35, 1), single);
        let balanced: Vec<_> = "ABCD".chars().map(|c| qa(&c.to_string(), c)).collect();
        assert_eq!(balance_answers(balanced.clone(), 0.35, 1), balanced);
    }

    #[test]
    fn qc_arithmetic() {
        let samples: Vec<_> = (0..600).map(|i| qa(&format!("s{i}"), 'A')).collect();
        let mut m = qc_sample(&samples, 500, 9).unwrap();
        assert_eq!(m, qc_sample(&samples, 500, 9).unwrap());
        assert_eq!(m.sampled_ids.iter().collect::<BTreeSet<_>>().len(), 500);
        let mut marks: BTreeMap<String, QcMark> = m
            .sampled_ids
            .iter()
            .map(|id| (id.clone(), QcMark { semantic_fidelity: true, motion_consistency: true }))
            .collect();
        m.marks = Some(marks.clone());
        assert_eq!(qc_aggregate(&m).unwrap().both.to_string(), "100.0");
        marks.get_mut(&m.sampled_ids[3]).unwrap().motion_consistency = false;
        m.marks = Some(marks.clone());
        let r = qc_aggregate(&m).unwrap();
        assert_eq!(r.both.to_string(), "99.8");
        assert_eq!(r.semantic_fidelity.to_string(), "100.0");
        marks.remove(&m.sampled_ids[0]);
        m.marks = Some(marks);
        assert!(qc_aggregate(&m).is_err());
        assert!(qc_sample(&samples, 601, 9).is_err());
    }
}
