//! Face-sequence windows: stride-selected center frames, a fixed number
//! of neighbours on each side, blank fill for frames that do not exist,
//! and face cropping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::annotations::{BBox, FaceTrack};
use crate::error::{Error, Result};
use crate::image::{Image, WindowTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingSpec {
    /// Step between consecutive centers, counted in annotated records.
    pub stride: usize,
    pub half_window: usize,
    /// Side length of the square crops.
    pub resolution: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            half_window: 3,
            resolution: 224,
        }
    }
}

impl SamplingSpec {
    pub fn new(stride: usize, half_window: usize, resolution: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if resolution == 0 {
            return Err(Error::Config("resolution must be >= 1".into()));
        }
        Ok(Self {
            stride,
            half_window,
            resolution,
        })
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameSlot {
    Frame { frame_index: u32, bbox: BBox },
    Blank,
}

impl FrameSlot {
    pub fn frame_index(&self) -> Option<u32> {
        match self {
            FrameSlot::Frame { frame_index, .. } => Some(*frame_index),
            FrameSlot::Blank => None,
        }
    }

    pub fn is_blank(&self) -> bool {
        matches!(self, FrameSlot::Blank)
    }
}

/// One model input: `2·half_window + 1` slots around a labeled center frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub clip_id: String,
    pub face_id: String,
    pub center_frame_index: u32,
    pub slots: Vec<FrameSlot>,
    pub label: u8,
}

/// Center frames at record positions `0, stride, 2·stride, …`.
pub fn select_centers(track: &FaceTrack, spec: &SamplingSpec) -> Vec<u32> {
    track
        .records
        .iter()
        .step_by(spec.stride.max(1))
        .map(|r| r.frame_index)
        .collect()
}

/// Gathers the frames `center - h ..= center + h` by raw frame index.
pub fn build_window(track: &FaceTrack, center: u32, spec: &SamplingSpec) -> Result<WindowSample> {
    let center_rec = track.record(center).ok_or_else(|| Error::CenterNotAnnotated {
        clip_id: track.clip_id.clone(),
        face_id: track.face_id.clone(),
        frame_index: center,
    })?;
    let h = spec.half_window as i64;
    let slots = (-h..=h)
        .map(|off| {
            let idx = i64::from(center) + off;
            u32::try_from(idx)
                .ok()
                .and_then(|i| track.record(i))
                .map_or(FrameSlot::Blank, |r| FrameSlot::Frame {
                    frame_index: r.frame_index,
                    bbox: r.bbox,
                })
        })
        .collect();
    Ok(WindowSample {
        clip_id: track.clip_id.clone(),
        face_id: track.face_id.clone(),
        center_frame_index: center,
        slots,
        label: center_rec.label,
    })
}

/// All windows of a set of tracks at the given stride, in track order.
pub fn windows_for_tracks(tracks: &[FaceTrack], spec: &SamplingSpec) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for t in tracks {
        for c in select_centers(t, spec) {
            // centers come from the track itself
            out.push(build_window(t, c, spec).expect("center is annotated"));
        }
    }
    out
}

/// Crops `bbox` out of `frame` and resamples it to a square of
/// `resolution` pixels. Sample points falling off the frame read as zero.
pub fn crop_and_resize(frame: &Image, bbox: &BBox, resolution: usize) -> Result<Image> {
    if frame.width == 0 || frame.height == 0 {
        return Err(Error::Shape("empty frame".into()));
    }
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::InvalidRecord("bbox needs positive size".into()));
    }
    if bbox.x + bbox.w <= 0.0
        || bbox.y + bbox.h <= 0.0
        || bbox.x >= frame.width as f64
        || bbox.y >= frame.height as f64
    {
        return Err(Error::BoxOutsideImage);
    }
    let mut out = Image::zeros(resolution, resolution);
    let sx = bbox.w / resolution as f64;
    let sy = bbox.h / resolution as f64;
    for i in 0..resolution {
        let y = bbox.y + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..resolution {
            let x = bbox.x + (j as f64 + 0.5) * sx - 0.5;
            if frame.contains(x, y) {
                out.set_pixel(i, j, frame.sample_bilinear(x, y));
            }
        }
    }
    Ok(out)
}

/// Source of decoded frames, addressed by clip and frame index.
pub trait FrameStore {
    fn frame(&self, clip_id: &str, frame_index: u32) -> Result<Image>;
}

/// Relative path of a frame under the frames root.
pub fn frame_relpath(clip_id: &str, frame_index: u32) -> String {
    alloc::format!("{clip_id}/{frame_index:06}.png")
}

/// In-memory frame store, mostly for tests and synthetic pipelines.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrameStore {
    frames: BTreeMap<(String, u32), Image>,
}

impl MemoryFrameStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, clip_id: &str, frame_index: u32, image: Image) {
        self.frames.insert((clip_id.into(), frame_index), image);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl FrameStore for MemoryFrameStore {
    fn frame(&self, clip_id: &str, frame_index: u32) -> Result<Image> {
        self.frames
            .get(&(clip_id.into(), frame_index))
            .cloned()
            .ok_or_else(|| Error::MissingFrame {
                path: frame_relpath(clip_id, frame_index),
            })
    }
}

/// Turns a window into a `(T, R, R, 3)` tensor; blank slots stay zero.
pub fn materialize_window<S: FrameStore + ?Sized>(
    window: &WindowSample,
    store: &S,
    spec: &SamplingSpec,
) -> Result<WindowTensor> {
    let r = spec.resolution;
    let mut out = WindowTensor::zeros(window.slots.len(), r, r);
    for (t, slot) in window.slots.iter().enumerate() {
        if let FrameSlot::Frame { frame_index, bbox } = slot {
            let frame = store.frame(&window.clip_id, *frame_index)?;
            let crop = crop_and_resize(&frame, bbox, r)?;
            out.frame_slice_mut(t).copy_from_slice(&crop.data);
        }
    }
    Ok(out)
}
