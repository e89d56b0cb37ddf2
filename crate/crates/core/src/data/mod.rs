//! Storm events as raster stacks, the on-disk archive, and event sources.

mod archive;
#[cfg(feature = "sevir")]
mod sevir;
mod synth;

pub use archive::{read_archive, write_archive, Archive, ArchiveManifest, EventRecord, SplitLabel, ARCHIVE_DTYPE};
#[cfg(feature = "sevir")]
pub use sevir::{ingest_sevir, SEVIR_FRAMES};
pub use synth::{derive_seed, synth_archive, synth_event, synth_event_with, SynthParams, SynthProvenance};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel layout of an event: which channels feed the translator and which one it predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub names: Vec<String>,
    pub input_indices: Vec<usize>,
    pub target_index: usize,
    /// Inclusive physical range per channel, where one is defined.
    pub value_ranges: Vec<Option<(f64, f64)>>,
}

impl Default for ModalitySchema {
    fn default() -> Self {
        Self {
            names: ["ir069", "ir107", "lightning", "vil"].map(String::from).to_vec(),
            input_indices: vec![0, 1, 2],
            target_index: 3,
            value_ranges: vec![None, None, None, Some((0.0, 255.0))],
        }
    }
}

impl ModalitySchema {
    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn in_channels(&self) -> usize {
        self.input_indices.len()
    }

    pub fn target_range(&self) -> Option<(f64, f64)> {
        self.value_ranges.get(self.target_index).copied().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.names.len();
        if self.value_ranges.len() != c {
            return Err(Error::Schema(format!("{} value ranges for {c} channels", self.value_ranges.len())));
        }
        let mut seen = vec![false; c];
        for &i in self.input_indices.iter().chain(std::iter::once(&self.target_index)) {
            if i >= c {
                return Err(Error::Schema(format!("channel index {i} out of range for {c} channels")));
            }
            if seen[i] {
                return Err(Error::Schema(format!("channel {i} used twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("input and target channels must cover every channel".into()));
        }
        Ok(())
    }
}

/// One storm event: `frames x channels x height x width`, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub event_id: String,
    shape: [usize; 4],
    data: Vec<f32>,
    pub timestamps: Option<Vec<i64>>,
}

impl EventTensor {
    pub fn new(event_id: impl Into<String>, shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let event_id = event_id.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("event {event_id}: shape {shape:?} but {} values", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::integrity(event_id, format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { event_id, shape, data, timestamps: None })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `height x width` plane of one channel in one frame.
    pub fn plane(&self, frame: usize, channel: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (frame * self.shape[1] + channel) * hw;
        &self.data[start..start + hw]
    }
}
