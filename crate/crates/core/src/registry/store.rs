//! On-disk layout: `<root>/<model>/events.ndjson` plus
//! `<root>/<model>/blobs/<sha256-hex>`.
//!
//! A blob is fsynced and renamed into place before any event referencing it
//! is appended; an event is durable once its line (with trailing newline) is
//! fsynced. A trailing line without a newline is a torn write and is cut off
//! when the log is opened.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::types::{validate_name, ContentHash, ModelEvent};
use crate::error::{Error, Result};

pub(crate) const EVENTS_FILE: &str = "events.ndjson";
pub(crate) const BLOBS_DIR: &str = "blobs";

#[derive(Debug, Clone)]
pub(crate) struct DiskStore {
    root: PathBuf,
}

impl DiskStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn model_dir(&self, model: &str) -> PathBuf {
        self.root.join(model)
    }

    fn blob_path(&self, model: &str, hash: &ContentHash) -> PathBuf {
        self.model_dir(model).join(BLOBS_DIR).join(hash.as_str())
    }

    pub fn blob_exists(&self, model: &str, hash: &ContentHash) -> bool {
        self.blob_path(model, hash).is_file()
    }

    pub fn write_blob(&self, model: &str, hash: &ContentHash, bytes: &[u8]) -> Result<()> {
        let dir = self.model_dir(model).join(BLOBS_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(hash.as_str());
        if path.is_file() {
            return Ok(());
        }
        let tmp = dir.join(format!(".{}.tmp", hash.as_str()));
        {
            let mut file = File::create(&tmp)?;
            file.write_all(bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        File::open(&dir)?.sync_all()?;
        Ok(())
    }

    pub fn read_blob(&self, model: &str, hash: &ContentHash) -> Result<Vec<u8>> {
        let bytes = fs::read(self.blob_path(model, hash))?;
        if &ContentHash::of(&bytes) != hash {
            return Err(Error::CorruptLog(format!(
                "blob {hash} of model `{model}` fails its checksum"
            )));
        }
        Ok(bytes)
    }

    pub fn open_log(&self, model: &str) -> Result<EventLog> {
        let dir = self.model_dir(model);
        fs::create_dir_all(dir.join(BLOBS_DIR))?;
        let path = dir.join(EVENTS_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        File::open(&dir)?.sync_all()?;
        Ok(EventLog { file, len })
    }

    /// Reads every model's log, truncating torn trailing lines.
    pub fn load_all(&self) -> Result<BTreeMap<String, Vec<ModelEvent>>> {
        let mut logs = BTreeMap::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
                continue;
            };
            if validate_name("model", &name).is_err() {
                continue;
            }
            let path = entry.path().join(EVENTS_FILE);
            if !path.is_file() {
                continue;
            }
            let events = read_log(&path)?;
            if !events.is_empty() {
                logs.insert(name, events);
            }
        }
        Ok(logs)
    }
}

fn read_log(path: &Path) -> Result<Vec<ModelEvent>> {
    let bytes = fs::read(path)?;
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < bytes.len() {
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(complete as u64)?;
        file.sync_all()?;
    }
    let text = std::str::from_utf8(&bytes[..complete])
        .map_err(|e| Error::CorruptLog(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(ModelEvent::from_line)
        .collect()
}

/// Append handle on one model's `events.ndjson`.
#[derive(Debug)]
pub(crate) struct EventLog {
    file: File,
    len: u64,
}

impl EventLog {
    pub fn append(&mut self, event: &ModelEvent) -> Result<()> {
        let mut line = event.to_line();
        line.push('\n');
        let written = self
            .file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data());
        if let Err(err) = written {
            // roll back a torn line so the next append starts clean
            let _ = self.file.set_len(self.len);
            return Err(Error::Io(err));
        }
        self.len += line.len() as u64;
        Ok(())
    }
}
