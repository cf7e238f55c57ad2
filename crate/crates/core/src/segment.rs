//! Non-overlapping fixed-length segmentation; the trailing remainder is
//! discarded.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, EcgRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub segment_len: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { segment_len: 5000 }
    }
}

impl SegmentationConfig {
    pub fn new(segment_len: usize) -> Self {
        Self { segment_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(Error::Config("segment.segment_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record_id: String,
    pub label: ClassLabel,
    /// Index of the first sample in the trimmed record.
    pub offset: usize,
    pub samples: Vec<f64>,
}

/// Number of whole segments in a record of `len` samples.
pub fn segment_count(len: usize, segment_len: usize) -> usize {
    if segment_len == 0 {
        0
    } else {
        len / segment_len
    }
}

/// Offsets of the whole segments, in order.
pub fn segment_offsets(len: usize, segment_len: usize) -> impl Iterator<Item = usize> {
    (0..segment_count(len, segment_len)).map(move |k| k * segment_len)
}

pub fn segment_record(record: &EcgRecord, config: &SegmentationConfig) -> Vec<Segment> {
    segment_samples(&record.id, record.label, &record.samples, config.segment_len)
}

pub fn segment_samples(
    record_id: &str,
    label: ClassLabel,
    samples: &[f64],
    segment_len: usize,
) -> Vec<Segment> {
    if segment_len == 0 {
        return Vec::new();
    }
    samples
        .chunks_exact(segment_len)
        .enumerate()
        .map(|(k, chunk)| Segment {
            record_id: record_id.to_string(),
            label,
            offset: k * segment_len,
            samples: chunk.to_vec(),
        })
        .collect()
}
