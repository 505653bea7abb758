//! Train-time augmentation: random resized crop, color jitter and
//! RandAugment, sampled once per window and applied identically to every
//! frame of it.
//!
//! RandAugment draws `n` ops uniformly from the table and applies each
//! with probability [`OP_PROB`]. Magnitudes live on a 0..=10 level scale. With the
//! increasing-severity mapping, levels translate to parameters as follows
//! (signed ops flip sign with probability 1/2):
//!
//! | op                                   | level 10 means                  |
//! |--------------------------------------|---------------------------------|
//! | rotate                               | ±30°                            |
//! | shear-x / shear-y                    | ±0.3 shear                      |
//! | translate-x / translate-y            | ±45% of the image side          |
//! | color / contrast / brightness / sharpness | factor 1 ± 0.9             |
//! | solarize                             | threshold 0 (invert everything) |
//! | posterize                            | 1 bit per channel (4 at level 0)|
//! | identity / auto-contrast / equalize  | no parameter                    |
//!
//! Without the increasing mapping, enhancement factors are `0.1 + 1.8·l/10`,
//! the solarize threshold is `l/10` and posterize keeps `4 + ⌊4·l/10⌋` bits.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, WindowTensor, CHANNELS};
use crate::seed;

const MAX_LEVEL: f64 = 10.0;
/// Fill value for pixels exposed by geometric ops. Distinct from the
/// black used for blank frames.
pub const GEOMETRIC_FILL: f32 = 0.5;
/// Chance that each of the `n` drawn RandAugment ops is applied.
pub const OP_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandAugmentSpec {
    pub num_ops: usize,
    pub magnitude: f64,
    pub magnitude_std: f64,
    pub increasing: bool,
}

/// Parses policy strings of the form `rand-m7-n4-mstd0.5-inc1`.
///
/// The `m`, `n` and `mstd` sections are required; `inc` defaults to 0.
pub fn decode_randaugment_spec(spec: &str) -> Result<RandAugmentSpec> {
    let bad = |t: &str| Error::RandAugmentSpec { token: String::from(t) };
    let mut parts = spec.split('-');
    match parts.next() {
        Some("rand") => {}
        Some(t) => return Err(bad(t)),
        None => return Err(bad(spec)),
    }
    let (mut m, mut n, mut mstd, mut inc) = (None, None, None, None);
    for tok in parts {
        if let Some(v) = tok.strip_prefix("mstd") {
            mstd = Some(v.parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0).ok_or_else(|| bad(tok))?);
        } else if let Some(v) = tok.strip_prefix("m") {
            m = Some(v.parse::<u32>().map_err(|_| bad(tok))?);
        } else if let Some(v) = tok.strip_prefix("n") {
            n = Some(v.parse::<usize>().map_err(|_| bad(tok))?);
        } else if let Some(v) = tok.strip_prefix("inc") {
            inc = Some(match v {
                "0" => false,
                "1" => true,
                _ => return Err(bad(tok)),
            });
        } else {
            return Err(bad(tok));
        }
    }
    let m = m.ok_or_else(|| bad("m"))?;
    if f64::from(m) > MAX_LEVEL {
        return Err(bad(&alloc::format!("m{m}")));
    }
    Ok(RandAugmentSpec {
        num_ops: n.ok_or_else(|| bad("n"))?,
        magnitude: f64::from(m),
        magnitude_std: mstd.ok_or_else(|| bad("mstd"))?,
        increasing: inc.unwrap_or(false),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub color_jitter: f64,
    pub rand_augment: RandAugmentSpec,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            scale: (0.08, 1.0),
            ratio: (0.75, 1.33),
            color_jitter: 0.4,
            rand_augment: RandAugmentSpec {
                num_ops: 4,
                magnitude: 7.0,
                magnitude_std: 0.5,
                increasing: true,
            },
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config(alloc::format!("scale range [{s0}, {s1}] not within (0, 1]")));
        }
        let (r0, r1) = self.ratio;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::Config(alloc::format!("aspect ratio range [{r0}, {r1}] invalid")));
        }
        if !(self.color_jitter >= 0.0 && self.color_jitter.is_finite()) {
            return Err(Error::Config("color_jitter must be >= 0".into()));
        }
        let ra = &self.rand_augment;
        if !(0.0..=MAX_LEVEL).contains(&ra.magnitude) {
            return Err(Error::Config(alloc::format!("RandAugment magnitude {} outside [0, 10]", ra.magnitude)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const OP_TABLE: [OpKind; 14] = [
    OpKind::Identity,
    OpKind::AutoContrast,
    OpKind::Equalize,
    OpKind::Rotate,
    OpKind::Solarize,
    OpKind::Color,
    OpKind::Posterize,
    OpKind::Contrast,
    OpKind::Brightness,
    OpKind::Sharpness,
    OpKind::ShearX,
    OpKind::ShearY,
    OpKind::TranslateX,
    OpKind::TranslateY,
];

impl OpKind {
    fn is_enhance(self) -> bool {
        matches!(self, OpKind::Color | OpKind::Contrast | OpKind::Brightness | OpKind::Sharpness)
    }

    fn signed(self, increasing: bool) -> bool {
        use OpKind::*;
        matches!(self, Rotate | ShearX | ShearY | TranslateX | TranslateY) || (increasing && self.is_enhance())
    }

    /// Concrete parameter for a level in `[0, 10]`, before sign.
    pub fn parameter(self, level: f64, increasing: bool) -> f64 {
        use OpKind::*;
        let f = level / MAX_LEVEL;
        match self {
            Identity | AutoContrast | Equalize => 0.0,
            Rotate => 30.0 * f,
            ShearX | ShearY => 0.3 * f,
            TranslateX | TranslateY => 0.45 * f,
            Color | Contrast | Brightness | Sharpness => {
                if increasing {
                    0.9 * f
                } else {
                    0.1 + 1.8 * f
                }
            }
            Solarize => {
                if increasing {
                    1.0 - f
                } else {
                    f
                }
            }
            Posterize => {
                let bits = if increasing {
                    4.0 - libm::floor(4.0 * f)
                } else {
                    4.0 + libm::floor(4.0 * f)
                };
                bits.max(1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandOp {
    pub kind: OpKind,
    pub level: f64,
    /// Final parameter: degrees, shear, translate fraction, enhancement
    /// factor, threshold or bit count depending on `kind`.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Everything random about one window's augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentState {
    pub source_height: usize,
    pub source_width: usize,
    pub crop: CropRect,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub ops: Vec<RandOp>,
}

impl AugmentState {
    /// Full-image crop, unit jitter, no RandAugment ops.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            source_height: height,
            source_width: width,
            crop: CropRect {
                x: 0.0,
                y: 0.0,
                w: width as f64,
                h: height as f64,
            },
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            ops: Vec::new(),
        }
    }
}

/// Per-window augmentation seed from the run seed and the window identity.
pub fn window_seed(run_seed: u64, clip_id: &str, face_id: &str, center_frame_index: u32) -> u64 {
    let s = seed::derive(run_seed, clip_id);
    let s = seed::derive(s, face_id);
    seed::derive_index(s, u64::from(center_frame_index))
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn sample_crop<R: Rng>(rng: &mut R, policy: &AugmentPolicy, height: usize, width: usize) -> CropRect {
    let area = (height * width) as f64;
    let (log_r0, log_r1) = (libm::log(policy.ratio.0), libm::log(policy.ratio.1));
    for _ in 0..10 {
        let target = area * uniform(rng, policy.scale.0, policy.scale.1);
        let aspect = libm::exp(uniform(rng, log_r0, log_r1));
        let w = libm::round(libm::sqrt(target * aspect));
        let h = libm::round(libm::sqrt(target / aspect));
        if w > 0.0 && h > 0.0 && w <= width as f64 && h <= height as f64 {
            let y = rng.gen_range(0..=(height - h as usize)) as f64;
            let x = rng.gen_range(0..=(width - w as usize)) as f64;
            return CropRect { x, y, w, h };
        }
    }
    // center crop at the nearest allowed aspect ratio
    let (wf, hf) = (width as f64, height as f64);
    let in_ratio = wf / hf;
    let (w, h) = if in_ratio < policy.ratio.0 {
        (wf, libm::round(wf / policy.ratio.0))
    } else if in_ratio > policy.ratio.1 {
        (libm::round(hf * policy.ratio.1), hf)
    } else {
        (wf, hf)
    };
    CropRect {
        x: libm::floor((wf - w) / 2.0),
        y: libm::floor((hf - h) / 2.0),
        w,
        h,
    }
}

/// Draws the crop, jitter factors and RandAugment ops for one window.
pub fn sample_window_augment(rng_seed: u64, policy: &AugmentPolicy, height: usize, width: usize) -> AugmentState {
    let mut rng = seed::rng(rng_seed);
    let crop = sample_crop(&mut rng, policy, height, width);
    let c = policy.color_jitter;
    let lo = (1.0 - c).max(0.0);
    let brightness = uniform(&mut rng, lo, 1.0 + c);
    let contrast = uniform(&mut rng, lo, 1.0 + c);
    let saturation = uniform(&mut rng, lo, 1.0 + c);

    let ra = &policy.rand_augment;
    let normal = (ra.magnitude_std > 0.0).then(|| Normal::new(ra.magnitude, ra.magnitude_std).expect("std > 0"));
    let ops = (0..ra.num_ops)
        .filter_map(|_| {
            let kind = OP_TABLE[rng.gen_range(0..OP_TABLE.len())];
            let level = match &normal {
                Some(d) => d.sample(&mut rng),
                None => ra.magnitude,
            }
            .clamp(0.0, MAX_LEVEL);
            let mut value = kind.parameter(level, ra.increasing);
            let flip = rng.gen_bool(0.5);
            if kind.signed(ra.increasing) && flip {
                value = -value;
            }
            if ra.increasing && kind.is_enhance() {
                value += 1.0;
            }
            rng.gen_bool(OP_PROB).then_some(RandOp { kind, level, value })
        })
        .collect();
    AugmentState {
        source_height: height,
        source_width: width,
        crop,
        brightness,
        contrast,
        saturation,
        ops,
    }
}

fn clamp01(img: &mut Image) {
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn blend_constant(img: &mut Image, base: f32, factor: f32) {
    for v in img.data.iter_mut() {
        *v = base + factor * (*v - base);
    }
}

fn adjust_brightness(img: &mut Image, factor: f32) {
    for v in img.data.iter_mut() {
        *v *= factor;
    }
}

fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = (img.width * img.height) as f32;
    let mean = img.data.chunks_exact(CHANNELS).map(luma).sum::<f32>() / n;
    blend_constant(img, mean, factor);
}

fn adjust_saturation(img: &mut Image, factor: f32) {
    for px in img.data.chunks_exact_mut(CHANNELS) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = g + factor * (*v - g);
        }
    }
}

fn adjust_sharpness(img: &mut Image, factor: f32) {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return;
    }
    let src = img.clone();
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let mut smooth = [0.0f32; 3];
            for di in 0..3 {
                for dj in 0..3 {
                    let wt = if di == 1 && dj == 1 { 5.0 } else { 1.0 };
                    let p = src.pixel(i + di - 1, j + dj - 1);
                    for c in 0..3 {
                        smooth[c] += wt * p[c];
                    }
                }
            }
            let p = src.pixel(i, j);
            let mut out = [0.0f32; 3];
            for c in 0..3 {
                let s = smooth[c] / 13.0;
                out[c] = s + factor * (p[c] - s);
            }
            img.set_pixel(i, j, out);
        }
    }
}

fn quantize(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as usize
}

fn auto_contrast(img: &mut Image) {
    for c in 0..CHANNELS {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for px in img.data.chunks_exact(CHANNELS) {
            lo = lo.min(px[c]);
            hi = hi.max(px[c]);
        }
        if hi > lo {
            for px in img.data.chunks_exact_mut(CHANNELS) {
                px[c] = (px[c] - lo) / (hi - lo);
            }
        }
    }
}

fn equalize(img: &mut Image) {
    for c in 0..CHANNELS {
        let mut hist = [0usize; 256];
        for px in img.data.chunks_exact(CHANNELS) {
            hist[quantize(px[c])] += 1;
        }
        let total: usize = hist.iter().sum();
        let last = hist.iter().rev().find(|&&h| h > 0).copied().unwrap_or(0);
        let step = (total - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0f32; 256];
        let mut acc = step / 2;
        for (i, &h) in hist.iter().enumerate() {
            lut[i] = (acc / step).min(255) as f32 / 255.0;
            acc += h;
        }
        for px in img.data.chunks_exact_mut(CHANNELS) {
            px[c] = lut[quantize(px[c])];
        }
    }
}

fn solarize(img: &mut Image, threshold: f32) {
    for v in img.data.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn posterize(img: &mut Image, bits: u32) {
    let shift = 8 - bits.min(8);
    for v in img.data.iter_mut() {
        let q = (quantize(*v) >> shift) << shift;
        *v = q as f32 / 255.0;
    }
}

/// Resamples `img` through an inverse affine map given in pixel-center
/// coordinates: output `(x, y)` reads source `(a·x + b·y + c, d·x + e·y + f)`.
fn warp(img: &Image, m: [f64; 6]) -> Image {
    let mut out = Image::zeros(img.height, img.width);
    for i in 0..img.height {
        for j in 0..img.width {
            let (x, y) = (j as f64, i as f64);
            let sx = m[0] * x + m[1] * y + m[2];
            let sy = m[3] * x + m[4] * y + m[5];
            let px = if img.contains(sx, sy) {
                img.sample_bilinear(sx, sy)
            } else {
                [GEOMETRIC_FILL; 3]
            };
            out.set_pixel(i, j, px);
        }
    }
    out
}

/// Inverse map of a geometric op, or `None` for photometric ops.
pub fn geometric_inverse(op: &RandOp, height: usize, width: usize) -> Option<[f64; 6]> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    match op.kind {
        OpKind::Rotate => {
            let t = op.value.to_radians();
            let (s, c) = (libm::sin(t), libm::cos(t));
            // rotate the sampling grid about the image center
            Some([c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy])
        }
        OpKind::ShearX => Some([1.0, op.value, -op.value * cy, 0.0, 1.0, 0.0]),
        OpKind::ShearY => Some([1.0, 0.0, 0.0, op.value, 1.0, -op.value * cx]),
        OpKind::TranslateX => Some([1.0, 0.0, op.value * width as f64, 0.0, 1.0, 0.0]),
        OpKind::TranslateY => Some([1.0, 0.0, 0.0, 0.0, 1.0, op.value * height as f64]),
        _ => None,
    }
}

fn apply_op(img: &mut Image, op: &RandOp) {
    if let Some(m) = geometric_inverse(op, img.height, img.width) {
        *img = warp(img, m);
        return;
    }
    let v = op.value as f32;
    match op.kind {
        OpKind::Identity => {}
        OpKind::AutoContrast => auto_contrast(img),
        OpKind::Equalize => equalize(img),
        OpKind::Solarize => solarize(img, v),
        OpKind::Posterize => posterize(img, op.value as u32),
        OpKind::Color => adjust_saturation(img, v),
        OpKind::Contrast => adjust_contrast(img, v),
        OpKind::Brightness => adjust_brightness(img, v),
        OpKind::Sharpness => adjust_sharpness(img, v),
        _ => unreachable!("geometric ops handled above"),
    }
    clamp01(img);
}

fn crop_resize(src: &Image, crop: &CropRect, size: usize) -> Image {
    let mut out = Image::zeros(size, size);
    let sx = crop.w / size as f64;
    let sy = crop.h / size as f64;
    for i in 0..size {
        let y = crop.y + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..size {
            let x = crop.x + (j as f64 + 0.5) * sx - 0.5;
            out.set_pixel(i, j, src.sample_bilinear(x, y));
        }
    }
    out
}

/// Applies one augmentation state to one frame.
pub fn augment_frame(state: &AugmentState, frame: &Image, out_size: usize) -> Image {
    let mut img = crop_resize(frame, &state.crop, out_size);
    if state.brightness != 1.0 {
        adjust_brightness(&mut img, state.brightness as f32);
        clamp01(&mut img);
    }
    if state.contrast != 1.0 {
        adjust_contrast(&mut img, state.contrast as f32);
        clamp01(&mut img);
    }
    if state.saturation != 1.0 {
        adjust_saturation(&mut img, state.saturation as f32);
        clamp01(&mut img);
    }
    for op in &state.ops {
        apply_op(&mut img, op);
    }
    clamp01(&mut img);
    img
}

/// Applies `state` to every frame of `window`, producing
/// `(T, out_size, out_size, 3)` values in `[0, 1]`.
pub fn apply_augment(state: &AugmentState, window: &WindowTensor, out_size: usize) -> Result<WindowTensor> {
    if window.height != state.source_height || window.width != state.source_width {
        return Err(Error::Shape(alloc::format!(
            "window frames are {}x{}, augmentation was sampled for {}x{}",
            window.height, window.width, state.source_height, state.source_width
        )));
    }
    let frames: Vec<Image> = (0..window.frames)
        .map(|t| augment_frame(state, &window.frame(t), out_size))
        .collect();
    if frames.is_empty() {
        return Err(Error::Shape("empty window".into()));
    }
    WindowTensor::from_frames(&frames)
}
