//! On-disk archive: `manifest.json` plus one headerless little-endian `f32`
//! file per event under `events/`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EventTensor, ModalitySchema, SynthProvenance};
use crate::error::{arg_err, Error, Result};

pub const ARCHIVE_DTYPE: &str = "f32le";
const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    /// Path relative to the archive root.
    pub file: String,
    pub shape: [usize; 4],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

impl EventRecord {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub schema: ModalitySchema,
    pub events: Vec<EventRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_labels: Option<BTreeMap<String, SplitLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthProvenance>,
}

impl ArchiveManifest {
    pub fn event_ids(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.event_id.as_str())
    }

    pub fn ids_with_label(&self, label: SplitLabel) -> Vec<String> {
        match &self.split_labels {
            Some(labels) => {
                self.events.iter().filter(|e| labels.get(&e.event_id) == Some(&label)).map(|e| e.event_id.clone()).collect()
            }
            None => Vec::new(),
        }
    }

    fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::archive(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::archive(&path, e))
    }
}

fn event_file(event_id: &str) -> String {
    format!("events/{event_id}.f32")
}

fn check_event_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        arg_err(format!("event id {id:?} is not usable as a file name"))
    }
}

/// Writes `events` under `dir` and returns the manifest that was saved.
pub fn write_archive(
    events: &[EventTensor],
    schema: &ModalitySchema,
    dir: &Path,
    generator: Option<SynthProvenance>,
) -> Result<ArchiveManifest> {
    if events.is_empty() {
        return arg_err("cannot write an archive with no events");
    }
    schema.validate()?;
    let mut seen = HashSet::new();
    for ev in events {
        check_event_id(&ev.event_id)?;
        if !seen.insert(ev.event_id.as_str()) {
            return arg_err(format!("duplicate event id {}", ev.event_id));
        }
        if ev.channels() != schema.channels() {
            return Err(Error::Schema(format!(
                "event {} has {} channels, schema has {}",
                ev.event_id,
                ev.channels(),
                schema.channels()
            )));
        }
    }
    let events_dir = dir.join("events");
    fs::create_dir_all(&events_dir).map_err(|e| Error::archive(&events_dir, e))?;

    let mut records = Vec::with_capacity(events.len());
    for ev in events {
        let rel = event_file(&ev.event_id);
        let path = dir.join(&rel);
        let mut bytes = Vec::with_capacity(ev.data().len() * 4);
        for v in ev.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::archive(&path, e))?;
        records.push(EventRecord {
            event_id: ev.event_id.clone(),
            file: rel,
            shape: ev.shape(),
            dtype: ARCHIVE_DTYPE.to_string(),
            timestamps: ev.timestamps.clone(),
        });
    }
    let manifest = ArchiveManifest {
        format_version: FORMAT_VERSION,
        schema: schema.clone(),
        events: records,
        split_labels: None,
        generator,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// An opened, validated archive. Events are read from disk on request.
#[derive(Clone, Debug)]
pub struct Archive {
    root: PathBuf,
    manifest: ArchiveManifest,
}

/// Opens and validates the archive under `dir`.
pub fn read_archive(dir: &Path) -> Result<Archive> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::archive(&path, e))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| Error::archive(&path, format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::archive(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    manifest.schema.validate()?;
    let mut seen = HashSet::new();
    for rec in &manifest.events {
        if !seen.insert(rec.event_id.as_str()) {
            return Err(Error::integrity(&rec.event_id, "event id listed twice"));
        }
        if rec.dtype != ARCHIVE_DTYPE {
            return Err(Error::integrity(&rec.event_id, format!("unsupported dtype {}", rec.dtype)));
        }
        if rec.shape[1] != manifest.schema.channels() {
            return Err(Error::integrity(
                &rec.event_id,
                format!("{} channels but schema has {}", rec.shape[1], manifest.schema.channels()),
            ));
        }
        let file = dir.join(&rec.file);
        let meta = fs::metadata(&file)
            .map_err(|e| Error::integrity(&rec.event_id, format!("cannot stat {}: {e}", file.display())))?;
        if meta.len() != rec.byte_len() {
            return Err(Error::integrity(
                &rec.event_id,
                format!("{} is {} bytes, expected {}", file.display(), meta.len(), rec.byte_len()),
            ));
        }
    }
    Ok(Archive { root: dir.to_path_buf(), manifest })
}

impl Archive {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    pub fn schema(&self) -> &ModalitySchema {
        &self.manifest.schema
    }

    pub fn len(&self) -> usize {
        self.manifest.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.events.is_empty()
    }

    pub fn event_ids(&self) -> Vec<String> {
        self.manifest.event_ids().map(String::from).collect()
    }

    pub fn load(&self, event_id: &str) -> Result<EventTensor> {
        let rec = self
            .manifest
            .events
            .iter()
            .find(|r| r.event_id == event_id)
            .ok_or_else(|| Error::Lookup(event_id.to_string()))?;
        let path = self.root.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::archive(&path, e))?;
        if bytes.len() as u64 != rec.byte_len() {
            return Err(Error::integrity(event_id, format!("file is {} bytes, expected {}", bytes.len(), rec.byte_len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut ev = EventTensor::new(event_id, rec.shape, data)?;
        ev.timestamps = rec.timestamps.clone();
        Ok(ev)
    }

    /// Records split membership in the manifest and rewrites it on disk.
    pub fn set_split_labels(&mut self, labels: BTreeMap<String, SplitLabel>) -> Result<()> {
        if let Some(unknown) = labels.keys().find(|id| !self.manifest.events.iter().any(|e| &e.event_id == *id)) {
            return Err(Error::Lookup(unknown.clone()));
        }
        self.manifest.split_labels = Some(labels);
        self.manifest.save(&self.root)
    }
}
