//! Append-only response log with an in-memory index rebuilt on open.
//!
//! One JSON object per line. A trailing partial line (interrupted write) is
//! ignored on open; any other malformed line is an error.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache record at {path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

/// What a stored response parsed to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    Choice(u8),
    Correlation(f64),
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub prompt_digest: String,
    pub replicate_index: usize,
    pub raw_response: String,
    pub parsed: ParsedAnswer,
    pub timestamp: DateTime<Utc>,
}

/// Deterministic key over everything that identifies one sampled response.
pub fn cache_key(model_name: &str, temperature: f64, prompt: &str, replicate_index: usize) -> String {
    let mut h = Sha256::new();
    h.update(b"tripcorr-cache-v1\0");
    h.update((model_name.len() as u64).to_le_bytes());
    h.update(model_name.as_bytes());
    h.update(temperature.to_bits().to_le_bytes());
    h.update((replicate_index as u64).to_le_bytes());
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<String, CacheRecord>>,
    writer: Option<Mutex<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { path: None, index: RwLock::new(HashMap::new()), writer: None }
    }

    /// Opens (creating if needed) the log at `path` and indexes its records.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut index = HashMap::new();
        let mut valid_len: u64 = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            let mut lines = reader.split(b'\n').enumerate().peekable();
            while let Some((n, line)) = lines.next() {
                let line = line.map_err(io)?;
                let is_last = lines.peek().is_none();
                if line.iter().all(u8::is_ascii_whitespace) {
                    valid_len += line.len() as u64 + u64::from(!is_last);
                    continue;
                }
                match serde_json::from_slice::<CacheRecord>(&line) {
                    Ok(rec) => {
                        valid_len += line.len() as u64 + 1;
                        index.entry(rec.key.clone()).or_insert(rec);
                    }
                    Err(_) if is_last => break,
                    Err(e) => {
                        return Err(CacheError::Corrupt {
                            path: path.to_path_buf(),
                            line: n + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        // drop a torn final record so the next append starts on a fresh line
        if file.metadata().map_err(io)?.len() > valid_len {
            file.set_len(valid_len).map_err(io)?;
        }
        Ok(Self { path: Some(path.to_path_buf()), index: RwLock::new(index), writer: Some(Mutex::new(file)) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        self.index.read().expect("cache index poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `record` unless its key is already present; returns the record
    /// that is in the cache afterwards.
    pub fn insert(&self, record: CacheRecord) -> Result<CacheRecord, CacheError> {
        let mut index = self.index.write().expect("cache index poisoned");
        if let Some(existing) = index.get(&record.key) {
            return Ok(existing.clone());
        }
        if let Some(writer) = &self.writer {
            let path = self.path.clone().unwrap_or_default();
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            let mut file = writer.lock().expect("cache writer poisoned");
            file.write_all(&line).and_then(|_| file.flush()).map_err(|source| CacheError::Io { path, source })?;
        }
        index.insert(record.key.clone(), record.clone());
        Ok(record)
    }
}
