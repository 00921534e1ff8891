use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, Phase, TriageRecord};
use crate::jsonl::{self, JsonlError};

/// One line of the append-only workflow log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// 1-based, gap-free.
    pub seq: u64,
    pub recorded_at: DateTime<Utc>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Annotation { record: AnnotationRecord },
    Triage { record: TriageRecord },
    RefinementAssigned { slices: BTreeMap<String, Vec<String>> },
    StageTransition { from: Phase, to: Phase },
}

/// Durable destination for accepted events. An event is applied in memory
/// only after `append` returns `Ok`.
pub trait EventSink: Send {
    fn append(&mut self, event: &Event) -> io::Result<()>;
}

/// Line-delimited event log on disk.
pub struct FileEventLog {
    path: PathBuf,
    file: File,
}

impl FileEventLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileEventLog {
            path: path.to_owned(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for FileEventLog {
    fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        // One write call per event keeps a crash from interleaving records.
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Reads a log written by [`FileEventLog`]; a missing file is an empty log.
pub fn read_event_log(path: &Path) -> Result<Vec<Event>, JsonlError> {
    match File::open(path) {
        Ok(f) => Ok(jsonl::parse(BufReader::new(f))?.into_iter().map(|(_, e)| e).collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(source) => Err(JsonlError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}
