//! Procedural gaze clips: a flat-shaded face whose pupil placement encodes
//! whether it looks at the camera.
//!
//! Looking faces have both pupils centered in the eyes; other faces have
//! them pushed towards the eye rim in a per-clip direction. A single frame
//! therefore carries the label, which makes the task learnable at desk
//! scale while still exercising cropping, windowing and blank fill.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::annotations::{AnnotationRecord, BBox};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub const FACE_ID: &str = "face_0";
pub const EYE_WHITE: [f32; 3] = [0.95, 0.95, 0.95];
pub const PUPIL: [f32; 3] = [0.05, 0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub image_size: usize,
    /// Negative clips per positive clip.
    pub imbalance_ratio: f64,
    pub motion_jitter_px: f64,
    /// Probability of flipping an individual frame's label (and its pupils).
    pub label_flip_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 1100,
            frames_per_clip: 16,
            image_size: 64,
            imbalance_ratio: 10.0,
            motion_jitter_px: 1.0,
            label_flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::Config("n_clips must be >= 1".into()));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Config("frames_per_clip must be >= 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be >= 32".into()));
        }
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::Config("imbalance_ratio must be > 0".into()));
        }
        if !(self.motion_jitter_px >= 0.0 && self.motion_jitter_px <= self.image_size as f64 / 16.0) {
            return Err(Error::Config("motion_jitter_px must lie in [0, image_size/16]".into()));
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(Error::Config("label_flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_positive_clips(&self) -> usize {
        let p = 1.0 / (1.0 + self.imbalance_ratio);
        libm::round(self.n_clips as f64 * p) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

pub fn clip_id(index: usize) -> String {
    alloc::format!("clip_{index:05}")
}

/// Per-clip label and split.
///
/// Exactly `n_positive_clips` clips are positive, chosen uniformly at
/// random, so each clip is positive with probability `1/(1+ratio)`. Each
/// class is split 70/15/15 separately, which keeps the class ratio of
/// every split at the target.
pub fn plan_clips(spec: &SynthSpec) -> Vec<(u8, Split)> {
    let mut rng = seed::rng(seed::derive(spec.seed, "plan"));
    let mut order: Vec<usize> = (0..spec.n_clips).collect();
    order.shuffle(&mut rng);
    let n_pos = spec.n_positive_clips().min(spec.n_clips);
    let mut plan = alloc::vec![(0u8, Split::Train); spec.n_clips];
    for (label, members) in [(1u8, &order[..n_pos]), (0u8, &order[n_pos..])] {
        let n = members.len();
        let n_train = libm::round(n as f64 * 0.70) as usize;
        let n_val = libm::round(n as f64 * 0.15) as usize;
        for (k, &clip) in members.iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            plan[clip] = (label, split);
        }
    }
    plan
}

/// Fixed per-clip appearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub eye_radius: f64,
    pub pupil_radius: f64,
    /// Direction of the averted gaze, radians.
    pub gaze_dir: f64,
    /// Averted pupil displacement as a fraction of the eye radius.
    pub gaze_offset: f64,
    pub background: [f32; 3],
    pub skin: [f32; 3],
}

fn quant(v: f64) -> f64 {
    libm::round(v * 16.0) / 16.0
}

impl FaceGeometry {
    pub fn sample<R: Rng>(rng: &mut R, image_size: usize, max_jitter: f64) -> Self {
        let s = image_size as f64;
        let ax = quant(s * rng.gen_range(0.22..0.28));
        let ay = quant(ax * rng.gen_range(1.15..1.3));
        let margin_x = ax + max_jitter + 1.0;
        let margin_y = ay + max_jitter + 1.0;
        let cx = quant(rng.gen_range(margin_x..s - margin_x));
        let cy = quant(rng.gen_range(margin_y..s - margin_y));
        let g = rng.gen_range(0.35f32..0.65);
        let tint = rng.gen_range(-0.05f32..0.05);
        let tone = rng.gen_range(0.7f32..1.1);
        Self {
            cx,
            cy,
            ax,
            ay,
            eye_radius: 0.36 * ax,
            pupil_radius: 0.45 * 0.36 * ax,
            gaze_dir: rng.gen_range(0.0..core::f64::consts::TAU),
            gaze_offset: rng.gen_range(0.45..0.55),
            background: [g + tint, g, g - tint],
            skin: [0.85 * tone, 0.65 * tone, 0.5 * tone],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub bbox: BBox,
    pub eye_centers: [(f64, f64); 2],
    pub pupil_centers: [(f64, f64); 2],
}

/// Renders one frame. Draws exactly two values from `rng` (the frame's
/// positional jitter) regardless of the label.
pub fn render_face_frame<R: Rng>(rng: &mut R, label: u8, face: &FaceGeometry, image_size: usize, max_jitter: f64) -> RenderedFrame {
    let (dx, dy) = if max_jitter > 0.0 {
        (rng.gen_range(-max_jitter..=max_jitter), rng.gen_range(-max_jitter..=max_jitter))
    } else {
        (rng.gen::<f64>() * 0.0, rng.gen::<f64>() * 0.0)
    };
    let cx = face.cx + dx;
    let cy = face.cy + dy;
    let eyes = [
        (cx - 0.4 * face.ax, cy - 0.2 * face.ay),
        (cx + 0.4 * face.ax, cy - 0.2 * face.ay),
    ];
    let (ox, oy) = if label == 1 {
        (0.0, 0.0)
    } else {
        let d = face.gaze_offset * face.eye_radius;
        (d * libm::cos(face.gaze_dir), d * libm::sin(face.gaze_dir))
    };
    let pupils = [(eyes[0].0 + ox, eyes[0].1 + oy), (eyes[1].0 + ox, eyes[1].1 + oy)];

    let mut image = Image::filled(image_size, image_size, face.background);
    let er2 = face.eye_radius * face.eye_radius;
    let pr2 = face.pupil_radius * face.pupil_radius;
    for i in 0..image_size {
        let y = i as f64 + 0.5;
        for j in 0..image_size {
            let x = j as f64 + 0.5;
            let ex = (x - cx) / face.ax;
            let ey = (y - cy) / face.ay;
            if ex * ex + ey * ey > 1.0 {
                continue;
            }
            let mut px = face.skin;
            for (e, p) in eyes.iter().zip(&pupils) {
                if (x - e.0) * (x - e.0) + (y - e.1) * (y - e.1) <= er2 {
                    px = EYE_WHITE;
                    if (x - p.0) * (x - p.0) + (y - p.1) * (y - p.1) <= pr2 {
                        px = PUPIL;
                    }
                }
            }
            image.set_pixel(i, j, px);
        }
    }
    RenderedFrame {
        image,
        bbox: BBox::new(cx - face.ax, cy - face.ay, 2.0 * face.ax, 2.0 * face.ay),
        eye_centers: eyes,
        pupil_centers: pupils,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip_id: String,
    pub label: u8,
    pub split: Split,
    pub frames: Vec<Image>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Renders clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SynthSpec, index: usize, label: u8, split: Split) -> SynthClip {
    let mut rng = seed::rng(seed::derive_index(spec.seed, index as u64));
    let face = FaceGeometry::sample(&mut rng, spec.image_size, spec.motion_jitter_px);
    let id = clip_id(index);
    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut annotations = Vec::with_capacity(spec.frames_per_clip);
    for f in 0..spec.frames_per_clip {
        let flip = spec.label_flip_prob > 0.0 && rng.gen_bool(spec.label_flip_prob);
        let frame_label = if flip { 1 - label } else { label };
        let r = render_face_frame(&mut rng, frame_label, &face, spec.image_size, spec.motion_jitter_px);
        annotations.push(AnnotationRecord {
            clip_id: id.clone(),
            frame_index: f as u32,
            face_id: FACE_ID.into(),
            bbox: r.bbox,
            label: frame_label,
        });
        frames.push(r.image);
    }
    SynthClip {
        clip_id: id,
        label,
        split,
        frames,
        annotations,
    }
}
