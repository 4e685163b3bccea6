//! Append-only log of backend exchanges, one JSON object per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ExchangeKey;
use crate::promptgen::ChatMessage;

pub const LEDGER_SCHEMA: &str = "stancevote.ledger/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExchangeStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub schema: String,
    pub key: ExchangeKey,
    /// Messages exactly as sent, system prompt included.
    pub request: Vec<ChatMessage>,
    /// Empty when `status` is failed.
    pub response: String,
    pub attempts: u32,
    pub latency_ms: u64,
    pub timestamp_ms: u64,
    pub status: ExchangeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Exchange {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("exchange serializes")
    }

    /// Decodes one ledger line and checks its schema tag.
    pub fn from_line(line: &str) -> Result<Exchange, String> {
        let exchange: Exchange = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if exchange.schema != LEDGER_SCHEMA {
            return Err(format!("unsupported schema `{}`", exchange.schema));
        }
        Ok(exchange)
    }

    pub fn ok(&self) -> bool {
        self.status == ExchangeStatus::Ok
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

/// In-memory view of a ledger file.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    exchanges: Vec<Exchange>,
    index: HashMap<ExchangeKey, usize>,
}

impl Ledger {
    /// Loads `path`; a missing file is an empty ledger. A final line without
    /// a newline is a torn write from an interrupted run and is ignored.
    pub fn load(path: &Path) -> Result<Ledger, LedgerError> {
        let io_err = |source| LedgerError::Io { path: path.to_path_buf(), source };
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Ledger::default()),
            Err(e) => return Err(io_err(e)),
        };
        let mut ledger = Ledger::default();
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut number = 0;
        loop {
            line.clear();
            if reader.read_line(&mut line).map_err(io_err)? == 0 {
                break;
            }
            number += 1;
            if !line.ends_with('\n') {
                break;
            }
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if trimmed.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| LedgerError::Corrupt { path: path.to_path_buf(), line: number, message };
            let exchange = Exchange::from_line(trimmed).map_err(corrupt)?;
            if ledger.index.contains_key(&exchange.key) {
                return Err(corrupt(format!("duplicate key {}", exchange.key)));
            }
            ledger.insert(exchange);
        }
        Ok(ledger)
    }

    pub fn insert(&mut self, exchange: Exchange) {
        self.index.insert(exchange.key.clone(), self.exchanges.len());
        self.exchanges.push(exchange);
    }

    pub fn get(&self, key: &ExchangeKey) -> Option<&Exchange> {
        self.index.get(key).map(|&i| &self.exchanges[i])
    }

    pub fn contains(&self, key: &ExchangeKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }

    pub fn len(&self) -> usize {
        self.exchanges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exchanges.is_empty()
    }
}

/// Appends exchanges to a ledger file, one flushed line each.
pub struct LedgerWriter {
    file: File,
    path: PathBuf,
}

impl LedgerWriter {
    /// Opens `path` for appending, creating it if needed. A torn final line
    /// (no trailing newline) is cut off; complete lines are never touched.
    pub fn open(path: &Path) -> Result<LedgerWriter, LedgerError> {
        let io_err = |source| LedgerError::Io { path: path.to_path_buf(), source };
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io_err)?;
        let len = file.metadata().map_err(io_err)?.len();
        if len > 0 {
            let mut bytes = Vec::with_capacity(len as usize);
            file.seek(SeekFrom::Start(0)).map_err(io_err)?;
            file.read_to_end(&mut bytes).map_err(io_err)?;
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                file.set_len(keep as u64).map_err(io_err)?;
            }
        }
        Ok(LedgerWriter { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, exchange: &Exchange) -> Result<(), LedgerError> {
        let mut line = exchange.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| LedgerError::Io { path: self.path.clone(), source })
    }
}
