//! JSON-lines annotation files.
//!
//! One object per line with the keys `clip_id`, `frame_index`, `face_id`,
//! `x`, `y`, `w`, `h` and `label`. Blank lines are skipped.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lam_core::annotations::{AnnotationRecord, BBox};
use serde_json::{Map, Value};

use crate::error::{Error, IoContext, Result};

const FIELDS: [&str; 8] = ["clip_id", "frame_index", "face_id", "x", "y", "w", "h", "label"];

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::invalid(format!("line {line}: missing field `{name}`")))
}

fn string_field(obj: &Map<String, Value>, line: usize, name: &str) -> Result<String> {
    match field(obj, line, name)? {
        Value::String(s) if !s.is_empty() => Ok(s.clone()),
        v => Err(Error::invalid(format!("line {line}: field `{name}` must be a non-empty string, got {v}"))),
    }
}

fn number_field(obj: &Map<String, Value>, line: usize, name: &str) -> Result<f64> {
    field(obj, line, name)?
        .as_f64()
        .ok_or_else(|| Error::invalid(format!("line {line}: field `{name}` must be a number")))
}

fn uint_field(obj: &Map<String, Value>, line: usize, name: &str, max: u64) -> Result<u64> {
    field(obj, line, name)?
        .as_u64()
        .filter(|&v| v <= max)
        .ok_or_else(|| Error::invalid(format!("line {line}: field `{name}` must be an integer in [0, {max}]")))
}

fn parse_line(text: &str, line: usize) -> Result<AnnotationRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("line {line}: not valid JSON ({e})")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::invalid(format!("line {line}: expected a JSON object")))?;
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(Error::invalid(format!("line {line}: unknown field `{extra}`")));
    }
    let bbox = BBox::new(
        number_field(obj, line, "x")?,
        number_field(obj, line, "y")?,
        number_field(obj, line, "w")?,
        number_field(obj, line, "h")?,
    );
    for (name, v) in [("w", bbox.w), ("h", bbox.h)] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("line {line}: field `{name}` must be > 0, got {v}")));
        }
    }
    let record = AnnotationRecord {
        clip_id: string_field(obj, line, "clip_id")?,
        frame_index: uint_field(obj, line, "frame_index", u32::MAX as u64)? as u32,
        face_id: string_field(obj, line, "face_id")?,
        bbox,
        label: uint_field(obj, line, "label", 1)? as u8,
    };
    record
        .validate()
        .map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
    Ok(record)
}

/// Parses and validates an annotation file's contents, preserving order.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    let mut seen: HashMap<(String, u32, String), usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let r = parse_line(raw, line)?;
        let key = (r.clip_id.clone(), r.frame_index, r.face_id.clone());
        if let Some(first) = seen.insert(key, line) {
            return Err(Error::invalid(format!(
                "line {line}: duplicate key (clip_id={}, frame_index={}, face_id={}), first seen on line {first}",
                r.clip_id, r.frame_index, r.face_id
            )));
        }
        records.push(r);
    }
    Ok(records)
}

pub fn serialize_record(r: &AnnotationRecord) -> String {
    let mut obj = Map::new();
    obj.insert("clip_id".into(), r.clip_id.clone().into());
    obj.insert("frame_index".into(), r.frame_index.into());
    obj.insert("face_id".into(), r.face_id.clone().into());
    obj.insert("x".into(), r.bbox.x.into());
    obj.insert("y".into(), r.bbox.y.into());
    obj.insert("w".into(), r.bbox.w.into());
    obj.insert("h".into(), r.bbox.h.into());
    obj.insert("label".into(), r.label.into());
    Value::Object(obj).to_string()
}

pub fn serialize_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serialize_record(r));
        out.push('\n');
    }
    out
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Invalid(msg) => Error::invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(serialize_annotations(records).as_bytes()).at(path)
}
