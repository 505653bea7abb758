//! Synthetic dataset generation and on-disk dataset access.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lam_core::annotations::{group_tracks, AnnotationRecord, FaceTrack};
use lam_core::synth::{generate_clip, plan_clips, Split, SynthSpec};
use lam_core::windowing::{FrameSlot, WindowSample};
use rayon::prelude::*;

use crate::annotations::{read_annotations, write_annotations};
use crate::error::{Error, IoContext, Result};
use crate::frames::write_png;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub records: Vec<(Split, Vec<AnnotationRecord>)>,
    pub n_frames: usize,
}

/// Renders every clip to `<root>/frames`, then writes one annotation file
/// and one clip list per split.
pub fn generate_dataset(spec: &SynthSpec, root: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let frames_dir = root.join("frames");
    fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let plan = plan_clips(spec);
    let clips: Vec<Result<(Split, Vec<AnnotationRecord>)>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(label, split))| {
            let clip = generate_clip(spec, i, label, split);
            for (frame, rec) in clip.frames.iter().zip(&clip.annotations) {
                write_png(&frames_dir.join(lam_core::windowing::frame_relpath(&clip.clip_id, rec.frame_index)), frame)?;
            }
            Ok((split, clip.annotations))
        })
        .collect();

    let splits_dir = root.join("splits");
    fs::create_dir_all(&splits_dir).at(&splits_dir)?;
    let mut out = Vec::new();
    let mut n_frames = 0;
    let clips = clips.into_iter().collect::<Result<Vec<_>>>()?;
    for split in Split::ALL {
        let mut records = Vec::new();
        let mut list = String::new();
        for (s, recs) in &clips {
            if *s == split {
                writeln!(list, "{}", recs[0].clip_id).unwrap();
                records.extend(recs.iter().cloned());
            }
        }
        n_frames += records.len();
        write_annotations(&root.join(format!("annotations_{}.jsonl", split.name())), &records)?;
        let list_path = splits_dir.join(format!("{}.txt", split.name()));
        fs::write(&list_path, list).at(&list_path)?;
        out.push((split, records));
    }
    Ok(GeneratedDataset { records: out, n_frames })
}

pub fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name).ok_or_else(|| Error::invalid(format!("unknown split `{name}` (expected train, val or test)")))
}

pub fn load_tracks(path: &Path) -> Result<Vec<FaceTrack>> {
    let tracks = group_tracks(read_annotations(path)?);
    if tracks.is_empty() {
        return Err(Error::invalid(format!("{}: no annotations", path.display())));
    }
    Ok(tracks)
}

/// One manifest line: `clip face center label s0 .. s6`, blanks as `-`.
pub fn manifest_line(w: &WindowSample) -> String {
    let mut line = format!("{} {} {} {}", w.clip_id, w.face_id, w.center_frame_index, w.label);
    for s in &w.slots {
        match s {
            FrameSlot::Frame { frame_index, .. } => write!(line, " {frame_index}").unwrap(),
            FrameSlot::Blank => line.push_str(" -"),
        }
    }
    line
}
