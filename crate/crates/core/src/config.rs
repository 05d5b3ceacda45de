//! TOML run configuration. Relative paths are resolved against the directory of the
//! configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::BackendConfig;
use crate::capmetrics::MetricConfig;
use crate::datagen::SampleKind;
use crate::directqa::DirectConfig;
use crate::error::{Error, Result};
use crate::segmenter::DecoderConfig;
use crate::sns::SnsConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    /// Existing narratives file, for proxy ablation and narrative substitution.
    pub narratives: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBackend {
    pub name: String,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub segment_lengths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            segment_lengths: vec![16, 24, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSource {
    pub path: PathBuf,
    pub kind: SampleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub annotations: Option<PathBuf>,
    /// Template file; the shipped templates are used when unset.
    pub templates: Option<PathBuf>,
    pub target_count: usize,
    pub qa_sources: Vec<QaSource>,
    /// Text file with one benchmark scene id per line.
    pub benchmark_scenes: Option<PathBuf>,
    pub max_share: f64,
    pub qc_samples: usize,
    /// Frames per video for scene-caption generation.
    pub caption_frames: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            templates: None,
            target_count: 10_000,
            qa_sources: Vec::new(),
            benchmark_scenes: None,
            max_share: 0.35,
            qc_samples: 500,
            caption_frames: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub parallel: usize,
    pub paths: Paths,
    pub sns: SnsConfig,
    pub direct: DirectConfig,
    pub metrics: MetricConfig,
    pub decoder: DecoderConfig,
    pub vlm: BackendConfig,
    pub proxy: BackendConfig,
    /// Proxy models compared by the proxy ablation.
    pub proxies: Vec<NamedBackend>,
    pub ablation: AblationConfig,
    pub datagen: DatagenConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads `path`, returning the configuration with resolved paths together with
    /// the unresolved snapshot recorded in run manifests.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw = Self::parse(&text)?;
        let snapshot = serde_json::to_value(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = raw.resolved(base);
        cfg.validate()?;
        cfg.sns.decoder = cfg.decoder.clone();
        cfg.direct.decoder = cfg.decoder.clone();
        Ok((cfg, snapshot))
    }

    fn resolved(mut self, base: &Path) -> Self {
        let p = &mut self.paths;
        for slot in [&mut p.manifest, &mut p.questions, &mut p.captions, &mut p.narratives, &mut p.workdir] {
            resolve(base, slot);
        }
        resolve(base, &mut self.vlm.cassette);
        resolve(base, &mut self.proxy.cassette);
        for b in &mut self.proxies {
            resolve(base, &mut b.backend.cassette);
        }
        let d = &mut self.datagen;
        resolve(base, &mut d.annotations);
        resolve(base, &mut d.templates);
        resolve(base, &mut d.benchmark_scenes);
        for s in &mut d.qa_sources {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        // a decoder given as a relative path (rather than a bare program name) is local
        if self.decoder.program.contains('/') && Path::new(&self.decoder.program).is_relative() {
            self.decoder.program = base.join(&self.decoder.program).to_string_lossy().into_owned();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sns.validate()?;
        self.direct.validate()?;
        if self.metrics.rouge_beta <= 0.0 {
            return Err(Error::Config("metrics.rouge_beta must be positive".into()));
        }
        if !(self.datagen.max_share > 0.0 && self.datagen.max_share <= 1.0) {
            return Err(Error::Config("datagen.max_share must lie in (0, 1]".into()));
        }
        if self.ablation.segment_lengths.contains(&0) {
            return Err(Error::Config("segment lengths must be positive".into()));
        }
        let mut names = std::collections::HashSet::new();
        for p in &self.proxies {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Config(format!("duplicate proxy name `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Sns settings with the shared decoder applied.
    pub fn sns_config(&self) -> SnsConfig {
        SnsConfig {
            decoder: self.decoder.clone(),
            ..self.sns.clone()
        }
    }

    pub fn direct_config(&self) -> DirectConfig {
        DirectConfig {
            decoder: self.decoder.clone(),
            ..self.direct.clone()
        }
    }
}

/// The path configured under `name`, which must be set and exist.
pub fn require_path(name: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
    let p = value
        .clone()
        .ok_or_else(|| Error::Config(format!("`{name}` is not set in the configuration")))?;
    if !p.exists() {
        return Err(Error::Config(format!("`{name}` path {} does not exist", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
seed = 7
parallel = 2

[paths]
manifest = "data/manifest.jsonl"
questions = "/abs/questions.jsonl"

[sns]
proxy_thinking_budget = 512

[sns.segment]
sample_fps = 8.0
frames_per_segment = 24
keep_tail_min = 12

[decoder]
program = "./bin/decode.sh"
args = ["{input}", "{output}", "{frame_numbers}"]

[vlm]
model = "camo-3b"
cassette = "cassettes/vlm.jsonl"

[proxy]
model = "gemini"
endpoint = "https://example.invalid/v1/chat/completions"
credential_env = "PROXY_KEY"
thinking_field = "thinking_budget"

[[proxies]]
name = "gpt"
model = "gpt-4o"
cassette = "cassettes/gpt.jsonl"

[datagen]
target_count = 100
qa_sources = [{ path = "qa.jsonl", kind = "qa_video" }]
"#,
        )
        .unwrap();
        let (cfg, snapshot) = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.paths.manifest.clone().unwrap(), dir.path().join("data/manifest.jsonl"));
        assert_eq!(cfg.paths.questions.clone().unwrap(), PathBuf::from("/abs/questions.jsonl"));
        assert_eq!(cfg.sns.segment.frames_per_segment, 24);
        assert_eq!(cfg.sns.proxy_thinking_budget, 512);
        assert_eq!(cfg.proxies[0].backend.cassette.as_ref().unwrap(), &dir.path().join("cassettes/gpt.jsonl"));
        assert!(cfg.sns_config().decoder.program.ends_with("bin/decode.sh"));
        assert_eq!(cfg.datagen.qa_sources[0].kind, SampleKind::QaVideo);
        assert_eq!(snapshot["paths"]["manifest"], "data/manifest.jsonl");
    }

    #[test]
    fn rejects_unknown_fields_and_bad_templates() {
        assert!(RunConfig::parse("sed = 1").is_err());
        let cfg = RunConfig::parse("[sns]\nproxy_prompt_template = \"{question}\"").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
