//! Loading manifest splits and turning streams into network inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::events_io::{read_event_file, reverse_time, EventStream, Manifest, Split};
use crate::representation::{build_est, resize_tensor, EventTensor};

/// Streams of one split with their category names, in manifest order.
#[derive(Debug, Clone)]
pub struct LabelledStreams {
    pub streams: Vec<EventStream>,
    pub labels: Vec<String>,
}

pub fn load_split(
    manifest: &Manifest,
    split: Split,
    width: u32,
    height: u32,
) -> Result<LabelledStreams> {
    let mut streams = Vec::new();
    let mut labels = Vec::new();
    for entry in manifest.split(split) {
        streams.push(read_event_file(&manifest.resolve(entry), width, height)?);
        labels.push(entry.category_name.clone());
    }
    Ok(LabelledStreams { streams, labels })
}

pub fn load_manifest_split(
    path: &Path,
    split: Split,
    width: u32,
    height: u32,
) -> Result<LabelledStreams> {
    load_split(&Manifest::load(path)?, split, width, height)
}

/// Network input for one stream: its tensor and the tensor of the
/// time-reversed stream, both resized to `resize x resize`.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub forward: EventTensor,
    pub reversed: EventTensor,
}

pub fn to_tensor(stream: &EventStream, t_bins: usize, resize: usize) -> Result<EventTensor> {
    let est = build_est(
        stream,
        t_bins,
        stream.height() as usize,
        stream.width() as usize,
    )?;
    resize_tensor(&est, resize, resize)
}

impl PreparedSample {
    pub fn new(stream: &EventStream, t_bins: usize, resize: usize) -> Result<Self> {
        Ok(Self {
            forward: to_tensor(stream, t_bins, resize)?,
            reversed: to_tensor(&reverse_time(stream), t_bins, resize)?,
        })
    }
}

pub fn prepare_all(
    streams: &[EventStream],
    t_bins: usize,
    resize: usize,
) -> Result<Vec<PreparedSample>> {
    streams
        .iter()
        .map(|s| PreparedSample::new(s, t_bins, resize))
        .collect()
}

/// Maps category names to indices in `categories`, listing every unknown
/// name in the error.
pub fn label_indices(labels: &[String], categories: &[String]) -> Result<Vec<usize>> {
    let mut unknown: Vec<&str> = Vec::new();
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        match categories.iter().position(|c| c == l) {
            Some(i) => out.push(i),
            None => {
                if !unknown.contains(&l.as_str()) {
                    unknown.push(l);
                }
            }
        }
    }
    if unknown.is_empty() {
        Ok(out)
    } else {
        Err(Error::UnknownCategory(unknown.join(", ")))
    }
}
