//! Prediction files and scoring against annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use lam_core::annotations::{dataset_stats, group_tracks, AnnotationRecord, ClassBalanceReport};
use lam_core::metrics::{score, ApVariant, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub frame_index: u32,
    pub face_id: String,
    /// `p(looking)`.
    pub score: f64,
}

type Key = (String, u32, String);

impl PredictionRecord {
    fn key(&self) -> Key {
        (self.clip_id.clone(), self.frame_index, self.face_id.clone())
    }
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for p in preds {
        w.serialize(p).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["clip_id", "frame_index", "face_id", "score"] {
        return Err(Error::invalid(format!(
            "{}: header must be clip_id,frame_index,face_id,score",
            path.display()
        )));
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in r.deserialize::<PredictionRecord>().enumerate() {
        let line = i + 2;
        let p = row.map_err(|e| Error::invalid(format!("{} line {line}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::invalid(format!(
                "{} line {line}: score {} outside [0, 1]",
                path.display(),
                p.score
            )));
        }
        if !seen.insert(p.key()) {
            return Err(Error::invalid(format!(
                "{} line {line}: duplicate prediction for ({}, {}, {})",
                path.display(),
                p.clip_id,
                p.frame_index,
                p.face_id
            )));
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub metrics: MetricsReport,
    pub balance: ClassBalanceReport,
}

const MAX_OFFENDERS: usize = 10;

fn offenders(keys: &[&Key]) -> String {
    let mut s = String::new();
    for (clip, frame, face) in keys.iter().take(MAX_OFFENDERS) {
        write!(s, "\n  ({clip}, {frame}, {face})").unwrap();
    }
    if keys.len() > MAX_OFFENDERS {
        write!(s, "\n  ... and {} more", keys.len() - MAX_OFFENDERS).unwrap();
    }
    s
}

/// Joins predictions with annotations on `(clip_id, frame_index, face_id)`
/// and scores them. Every annotated frame needs exactly one prediction.
pub fn evaluate(
    split: &str,
    preds: &[PredictionRecord],
    annotations: &[AnnotationRecord],
    threshold: f64,
    variant: ApVariant,
) -> Result<EvalReport> {
    let truth: BTreeMap<Key, u8> = annotations
        .iter()
        .map(|r| ((r.clip_id.clone(), r.frame_index, r.face_id.clone()), r.label))
        .collect();
    let predicted: BTreeMap<Key, f64> = preds.iter().map(|p| (p.key(), p.score)).collect();
    let extra: Vec<&Key> = predicted.keys().filter(|k| !truth.contains_key(*k)).collect();
    if !extra.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions have no annotation:{}",
            extra.len(),
            offenders(&extra)
        )));
    }
    let missing: Vec<&Key> = truth.keys().filter(|k| !predicted.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "{} annotated frames have no prediction:{}",
            missing.len(),
            offenders(&missing)
        )));
    }
    // annotation order keeps tie-breaking independent of the prediction file's order
    let scores: Vec<f64> = annotations
        .iter()
        .map(|r| predicted[&(r.clip_id.clone(), r.frame_index, r.face_id.clone())])
        .collect();
    let labels: Vec<u8> = annotations.iter().map(|r| r.label).collect();
    Ok(EvalReport {
        split: split.into(),
        metrics: score(&scores, &labels, threshold, variant)?,
        balance: dataset_stats(&group_tracks(annotations.to_vec()))?,
    })
}

fn variant_name(v: ApVariant) -> &'static str {
    match v {
        ApVariant::Positive => "positive",
        ApVariant::Macro => "macro",
    }
}

pub fn balance_line(b: &ClassBalanceReport) -> String {
    let ratio = b
        .ratio_neg_to_pos
        .map_or_else(|| "undefined (no positives)".into(), |r| format!("{r:.3}"));
    format!(
        "{} positive / {} negative frames, neg:pos ratio {ratio}, {} clips, {} tracks",
        b.n_positive, b.n_negative, b.n_clips, b.n_tracks
    )
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let ap = m.map.map_or_else(|| "undefined (no positives)".into(), |v| format!("{v:.4}"));
        let ap_label = match m.variant {
            ApVariant::Positive => "mAP (AP of the looking class)",
            ApVariant::Macro => "mAP (mean of per-class AP)",
        };
        format!(
            "split: {}\n{ap_label}: {ap}\naccuracy (score >= {}): {:.4}\nsamples: {}\n{} balance: {}\n",
            self.split,
            m.threshold,
            m.accuracy,
            m.n_samples,
            self.split,
            balance_line(&self.balance)
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let m = &self.metrics;
        let b = &self.balance;
        serde_json::json!({
            "split": self.split,
            "variant": variant_name(m.variant),
            "mAP": m.map,
            "accuracy": m.accuracy,
            "n_samples": m.n_samples,
            "threshold": m.threshold,
            "balance": {
                "n_positive": b.n_positive,
                "n_negative": b.n_negative,
                "ratio_neg_to_pos": b.ratio_neg_to_pos,
                "n_clips": b.n_clips,
                "n_tracks": b.n_tracks,
            },
        })
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        let b = &self.balance;
        format!(
            "split,variant,mAP,accuracy,n_samples,threshold,n_positive,n_negative\n{},{},{},{},{},{},{},{}\n",
            self.split,
            variant_name(m.variant),
            m.map.map_or_else(|| "NA".into(), |v| v.to_string()),
            m.accuracy,
            m.n_samples,
            m.threshold,
            b.n_positive,
            b.n_negative
        )
    }
}
