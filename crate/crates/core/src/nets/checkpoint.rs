//! Checkpoint directory: `checkpoint.json` describing named sections of
//! parameters plus one headerless little-endian `f64` blob, `tensors.bin`.

use std::fs;
use std::path::Path;

use autograd::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_DTYPE: &str = "f64le";
const MANIFEST: &str = "checkpoint.json";
const BLOB: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

/// Named parameter sections (e.g. `generator`, `adam.m.generator`) plus
/// free-form metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub sections: IndexMap<String, ParamSet>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { sections: IndexMap::new(), meta }
    }

    pub fn with(mut self, name: impl Into<String>, params: ParamSet) -> Self {
        self.sections.insert(name.into(), params);
        self
    }

    pub fn section(&self, name: &str) -> Result<&ParamSet> {
        self.sections.get(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no section {name:?}")))
    }

    pub fn take(&mut self, name: &str) -> Result<ParamSet> {
        self.sections.shift_remove(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no section {name:?}")))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    arch: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    sections: Vec<SectionEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut sections = Vec::with_capacity(ckpt.sections.len());
    for (name, params) in &ckpt.sections {
        let mut tensors = Vec::with_capacity(params.len());
        for (tname, t) in params.iter() {
            tensors.push(TensorEntry { name: tname.to_string(), shape: t.shape().to_vec(), offset });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        sections.push(SectionEntry { name: name.clone(), arch: params.arch.clone(), tensors });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: CHECKPOINT_DTYPE.into(),
        sections,
        meta: ckpt.meta.clone(),
    };
    fs::write(dir.join(BLOB), blob).map_err(io)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n").map_err(io)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| fail(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| fail(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != CHECKPOINT_DTYPE {
        return Err(fail(format!("unsupported format {} / {}", manifest.format_version, manifest.dtype)));
    }
    let bytes = fs::read(dir.join(BLOB)).map_err(|e| fail(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(fail(format!("blob length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut ckpt = Checkpoint::new(manifest.meta);
    for section in manifest.sections {
        let mut params = ParamSet::new(section.arch);
        for t in section.tensors {
            let n: usize = t.shape.iter().product();
            let data = values
                .get(t.offset..t.offset + n)
                .ok_or_else(|| fail(format!("{}.{} runs past the end of the blob", section.name, t.name)))?;
            params.insert(t.name, Tensor::new(t.shape, data.to_vec()))?;
        }
        if ckpt.sections.insert(section.name.clone(), params).is_some() {
            return Err(fail(format!("section {} listed twice", section.name)));
        }
    }
    Ok(ckpt)
}

impl ParamSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &Checkpoint::default().with("params", self.clone()))
    }

    pub fn load(dir: &Path) -> Result<ParamSet> {
        load_checkpoint(dir)?.take("params")
    }
}
