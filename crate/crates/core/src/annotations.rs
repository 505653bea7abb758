//! Annotation records, per-face tracks and class-balance statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Face box in pixels: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Whether the box lies inside a `width × height` image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width as f64 && self.y + self.h <= height as f64
    }
}

/// One labeled face in one frame. `label` is 1 when the face looks at the
/// camera-wearer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub frame_index: u32,
    pub face_id: String,
    pub bbox: BBox,
    pub label: u8,
}

impl AnnotationRecord {
    pub fn key(&self) -> (&str, u32, &str) {
        (&self.clip_id, self.frame_index, &self.face_id)
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRecord("bbox has non-finite values".into()));
        }
        if b.w <= 0.0 {
            return Err(Error::InvalidRecord(alloc::format!("w must be > 0, got {}", b.w)));
        }
        if b.h <= 0.0 {
            return Err(Error::InvalidRecord(alloc::format!("h must be > 0, got {}", b.h)));
        }
        if self.label > 1 {
            return Err(Error::InvalidRecord(alloc::format!("label must be 0 or 1, got {}", self.label)));
        }
        Ok(())
    }
}

/// Validates every record and rejects duplicate `(clip_id, frame_index, face_id)` keys.
pub fn validate_records(records: &[AnnotationRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.key()) {
            return Err(Error::DuplicateKey {
                clip_id: r.clip_id.clone(),
                frame_index: r.frame_index,
                face_id: r.face_id.clone(),
            });
        }
    }
    Ok(())
}

/// All records of one face in one clip, ordered by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    pub clip_id: String,
    pub face_id: String,
    pub records: Vec<AnnotationRecord>,
}

impl FaceTrack {
    /// Position of `frame_index` in `records`, if annotated.
    pub fn position(&self, frame_index: u32) -> Option<usize> {
        self.records
            .binary_search_by_key(&frame_index, |r| r.frame_index)
            .ok()
    }

    pub fn record(&self, frame_index: u32) -> Option<&AnnotationRecord> {
        self.position(frame_index).map(|i| &self.records[i])
    }
}

/// Partitions records into one track per `(clip_id, face_id)`.
///
/// Tracks come out ordered by `(clip_id, face_id)`, records within a track
/// by frame index.
pub fn group_tracks(records: Vec<AnnotationRecord>) -> Vec<FaceTrack> {
    let mut groups: BTreeMap<(String, String), Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.clip_id.clone(), r.face_id.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((clip_id, face_id), mut records)| {
            records.sort_by_key(|r| r.frame_index);
            FaceTrack {
                clip_id,
                face_id,
                records,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBalanceReport {
    pub n_positive: usize,
    pub n_negative: usize,
    /// `n_negative / n_positive`; `None` when there are no positives.
    pub ratio_neg_to_pos: Option<f64>,
    pub n_clips: usize,
    pub n_tracks: usize,
}

pub fn dataset_stats(tracks: &[FaceTrack]) -> Result<ClassBalanceReport> {
    if tracks.is_empty() {
        return Err(Error::InvalidRecord("no tracks to summarize".into()));
    }
    let mut n_positive = 0;
    let mut n_negative = 0;
    let mut clips = BTreeSet::new();
    for t in tracks {
        clips.insert(t.clip_id.as_str());
        for r in &t.records {
            if r.label == 1 {
                n_positive += 1;
            } else {
                n_negative += 1;
            }
        }
    }
    let ratio_neg_to_pos = (n_positive > 0).then(|| n_negative as f64 / n_positive as f64);
    Ok(ClassBalanceReport {
        n_positive,
        n_negative,
        ratio_neg_to_pos,
        n_clips: clips.len(),
        n_tracks: tracks.len(),
    })
}
