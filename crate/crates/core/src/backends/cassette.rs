use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ChatReply, ChatRequest, Role};
use crate::error::{Error, Result};
use crate::records::read_records;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Call the endpoint and append every exchange.
    Record,
    /// Serve only from stored exchanges; a miss is an error.
    Replay,
    /// Call the endpoint without storing anything.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSummary {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub images: usize,
}

/// Human-readable digest of a request kept beside each stored reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub model: String,
    pub messages: Vec<MessageSummary>,
    pub max_output_tokens: u32,
    pub thinking_budget: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

const PREVIEW_CHARS: usize = 160;

impl RequestSummary {
    pub fn of(req: &ChatRequest, _fingerprint: &str) -> Self {
        Self {
            model: req.model_name.clone(),
            messages: req
                .messages
                .iter()
                .map(|m| MessageSummary {
                    role: m.role,
                    text: m.text.chars().take(PREVIEW_CHARS).collect(),
                    images: m.images.len(),
                })
                .collect(),
            max_output_tokens: req.max_output_tokens,
            thinking_budget: req.thinking_budget,
            temperature: req.temperature,
            context: req.context.clone(),
        }
    }

    pub fn short(&self) -> String {
        let first = self
            .messages
            .last()
            .map(|m| m.text.chars().take(60).collect::<String>())
            .unwrap_or_default();
        let images: usize = self.messages.iter().map(|m| m.images).sum();
        format!(
            "model={} images={images} context={} text={first:?}",
            self.model,
            self.context.as_deref().unwrap_or("-")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: RequestSummary,
    pub reply: ChatReply,
}

struct State {
    entries: HashMap<String, ChatReply>,
    order: Vec<String>,
}

/// Fingerprint-keyed store of backend exchanges, persisted as JSON lines.
pub struct Cassette {
    mode: CassetteMode,
    path: Option<PathBuf>,
    state: Mutex<State>,
}

impl Cassette {
    /// Opens the cassette at `path`. Replay requires the file to exist; record appends to
    /// it, creating it when absent.
    pub fn open(path: &Path, mode: CassetteMode) -> Result<Self> {
        let entries = match (mode, path.exists()) {
            (CassetteMode::Replay, false) => {
                return Err(Error::Config(format!("cassette {} does not exist", path.display())))
            }
            (_, true) => read_records::<CassetteEntry>(path)?
                .into_iter()
                .map(|(_, e)| e)
                .collect(),
            (_, false) => Vec::new(),
        };
        let cassette = Self::from_entries(mode, entries);
        Ok(Self {
            path: Some(path.to_path_buf()),
            ..cassette
        })
    }

    pub fn in_memory(mode: CassetteMode) -> Self {
        Self::from_entries(mode, Vec::new())
    }

    pub fn from_entries(mode: CassetteMode, entries: Vec<CassetteEntry>) -> Self {
        let mut state = State {
            entries: HashMap::new(),
            order: Vec::new(),
        };
        for e in entries {
            if state.entries.insert(e.fingerprint.clone(), e.reply).is_none() {
                state.order.push(e.fingerprint);
            }
        }
        Self {
            mode,
            path: None,
            state: Mutex::new(state),
        }
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lock().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, fingerprint: &str) -> Option<ChatReply> {
        self.lock().entries.get(fingerprint).cloned()
    }

    /// Stores an exchange, appending it to the backing file. A fingerprint that is
    /// already present is overwritten in memory and appended again; the last line wins
    /// on reload.
    pub fn record(&self, entry: CassetteEntry) -> Result<()> {
        let mut state = self.lock();
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| Error::io(path, e))?;
        }
        if state.entries.insert(entry.fingerprint.clone(), entry.reply).is_none() {
            state.order.push(entry.fingerprint);
        }
        Ok(())
    }

    /// Content hash of the backing file, used to identify the cassette in run manifests.
    pub fn content_id(&self) -> Result<Option<String>> {
        match &self.path {
            Some(p) if p.exists() => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(Some(sha256_hex(&bytes)))
            }
            _ => Ok(None),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Summary lines for `sns cassette inspect`.
pub fn inspect(path: &Path) -> Result<Vec<String>> {
    Ok(read_records::<CassetteEntry>(path)?
        .into_iter()
        .map(|(_, e)| format!("{}  {}", &e.fingerprint[..12.min(e.fingerprint.len())], e.request.short()))
        .collect())
}
