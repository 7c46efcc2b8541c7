//! Record/replay store for chat exchanges.
//!
//! Every exchange is keyed by a SHA-256 of `(model_id, stage, request)`; the
//! request carries the temperature, so a change of decoding settings is a
//! different key. Failed exchanges are recorded too (with a `null` response)
//! so a replayed run reproduces the same stage failures.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::client::{ChatClient, ChatRequest};
use super::template::ChainStage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    Record,
    Replay,
    Passthrough,
}

impl std::str::FromStr for TranscriptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "record" => Ok(TranscriptMode::Record),
            "replay" => Ok(TranscriptMode::Replay),
            "passthrough" => Ok(TranscriptMode::Passthrough),
            other => Err(Error::invalid(format!("unknown transcript mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key_hash: String,
    pub model_id: String,
    pub stage: ChainStage,
    pub request: ChatRequest,
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn key_hash(model_id: &str, stage: ChainStage, request: &ChatRequest) -> String {
    let canonical = serde_json::to_string(&(model_id, stage, request)).expect("request serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub struct TranscriptStore {
    mode: TranscriptMode,
    path: Option<PathBuf>,
    entries: HashMap<String, TranscriptEntry>,
    writer: Option<Mutex<File>>,
}

impl TranscriptStore {
    /// No recording; every call goes to the client.
    pub fn passthrough() -> Self {
        TranscriptStore {
            mode: TranscriptMode::Passthrough,
            path: None,
            entries: HashMap::new(),
            writer: None,
        }
    }

    /// Replay reads the whole file up front; record appends to it.
    pub fn open(mode: TranscriptMode, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        match mode {
            TranscriptMode::Passthrough => Ok(Self::passthrough()),
            TranscriptMode::Replay => {
                let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
                let mut entries = HashMap::new();
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(&path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    // Later lines win, as they would have when recording.
                    entries.insert(entry.key_hash.clone(), entry);
                }
                Ok(TranscriptStore {
                    mode,
                    path: Some(path),
                    entries,
                    writer: None,
                })
            }
            TranscriptMode::Record => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Ok(TranscriptStore {
                    mode,
                    path: Some(path),
                    entries: HashMap::new(),
                    writer: Some(Mutex::new(file)),
                })
            }
        }
    }

    pub fn mode(&self) -> TranscriptMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Response text for one exchange. In replay mode the client is never
    /// touched and a missing key is [`Error::ReplayMiss`]; a recorded
    /// failure comes back as [`Error::Http`].
    pub fn exchange(
        &self,
        client: Option<&dyn ChatClient>,
        model_id: &str,
        stage: ChainStage,
        request: &ChatRequest,
    ) -> Result<String> {
        let key = key_hash(model_id, stage, request);
        if self.mode == TranscriptMode::Replay {
            let entry = self.entries.get(&key).ok_or_else(|| Error::ReplayMiss {
                model_id: model_id.to_string(),
                stage: stage.to_string(),
                key_hash: key.clone(),
            })?;
            return match &entry.response {
                Some(text) => Ok(text.clone()),
                None => Err(Error::Http(
                    entry.error.clone().unwrap_or_else(|| "recorded failure".into()),
                )),
            };
        }
        let client = client.ok_or_else(|| Error::invalid(format!("no chat client configured for {:?} mode", self.mode)))?;
        let result = client.complete(request);
        if let Some(writer) = &self.writer {
            let entry = TranscriptEntry {
                key_hash: key,
                model_id: model_id.to_string(),
                stage,
                request: request.clone(),
                response: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e| e.to_string()),
            };
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<transcript>"));
            let mut file = writer.lock().expect("transcript writer poisoned");
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        result
    }
}
