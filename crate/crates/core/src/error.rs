use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate annotation key (clip_id={clip_id}, frame_index={frame_index}, face_id={face_id})")]
    DuplicateKey {
        clip_id: String,
        frame_index: u32,
        face_id: String,
    },
    #[error("frame {frame_index} is not annotated in track {clip_id}/{face_id}")]
    CenterNotAnnotated {
        clip_id: String,
        face_id: String,
        frame_index: u32,
    },
    #[error("bounding box lies entirely outside the image")]
    BoxOutsideImage,
    #[error("missing frame file: {path}")]
    MissingFrame { path: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed RandAugment spec, bad token `{token}`")]
    RandAugmentSpec { token: String },
    #[error("mask ratio {0} outside (0, 1)")]
    MaskRatio(f64),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid metric input: {0}")]
    Metric(String),
}
