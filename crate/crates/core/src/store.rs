//! Append-only JSONL event logs shared by the robot mission log and the
//! station store. Each line is one record; a torn final line left by a crash is
//! truncated on reopen.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{DeltaHeader, ParamDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record<E> {
    pub seq: u64,
    /// Mission time in milliseconds.
    pub t: u64,
    #[serde(flatten)]
    pub event: E,
}

/// A parameter delta in log form: the wire header plus the blob as base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDelta {
    #[serde(flatten)]
    pub header: DeltaHeader,
    pub blob: String,
}

impl From<&ParamDelta> for StoredDelta {
    fn from(d: &ParamDelta) -> Self {
        Self {
            header: d.header(),
            blob: STANDARD.encode(d.blob_bytes()),
        }
    }
}

impl StoredDelta {
    pub fn to_delta(&self) -> Result<ParamDelta> {
        let bytes = STANDARD
            .decode(&self.blob)
            .map_err(|e| Error::Sync(format!("stored delta blob: {e}")))?;
        ParamDelta::from_parts(self.header.clone(), &bytes)
    }
}

#[derive(Debug)]
pub struct EventLog<E> {
    path: PathBuf,
    file: File,
    next_seq: u64,
    last_t: u64,
    _event: PhantomData<E>,
}

impl<E: Serialize + DeserializeOwned> EventLog<E> {
    /// Starts an empty log, replacing any existing file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = File::create(&path)?;
        Ok(Self {
            path,
            file,
            next_seq: 0,
            last_t: 0,
            _event: PhantomData,
        })
    }

    /// Reopens an existing log for appending and returns its records.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<Record<E>>)> {
        let path = path.as_ref().to_path_buf();
        let (records, good_len) = scan(&path)?;
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        if file.metadata()?.len() > good_len {
            log::warn!("{}: truncating corrupt tail at byte {good_len}", path.display());
            file.set_len(good_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        let log = Self {
            path,
            file,
            next_seq: records.last().map_or(0, |r| r.seq + 1),
            last_t: records.last().map_or(0, |r| r.t),
            _event: PhantomData,
        };
        Ok((log, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.next_seq == 0
    }

    /// Appends one record and flushes it. Times must not go backwards.
    pub fn append(&mut self, t: u64, event: E) -> Result<u64> {
        if t < self.last_t {
            return Err(Error::Validation(format!(
                "event time {t} precedes last logged time {}",
                self.last_t
            )));
        }
        let rec = Record {
            seq: self.next_seq,
            t,
            event,
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.last_t = t;
        self.next_seq += 1;
        Ok(rec.seq)
    }
}

/// Reads every record. A malformed final line is skipped with a warning; a
/// malformed line anywhere else is an error.
pub fn read_log<E: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<Record<E>>> {
    Ok(scan(path.as_ref())?.0)
}

fn scan<E: DeserializeOwned>(path: &Path) -> Result<(Vec<Record<E>>, u64)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut line = Vec::new();
    let mut bad: Option<(usize, String)> = None;
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if let Some((at, err)) = &bad {
            return Err(Error::Validation(format!("{}:{at}: {err}", path.display())));
        }
        let complete = line.ends_with(b"\n");
        match serde_json::from_slice::<Record<E>>(&line) {
            Ok(r) if complete => {
                records.push(r);
                good_len += n as u64;
            }
            Ok(_) => bad = Some((lineno, "unterminated line".into())),
            Err(e) => bad = Some((lineno, e.to_string())),
        }
    }
    if let Some((at, err)) = bad {
        log::warn!("{}:{at}: ignoring corrupt trailing record: {err}", path.display());
    }
    Ok((records, good_len))
}
