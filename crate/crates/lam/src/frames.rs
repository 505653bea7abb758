//! PNG frame directories laid out as `<root>/<clip_id>/<frame_index:06>.png`.

use std::path::{Path, PathBuf};

use lam_core::image::Image;
use lam_core::windowing::{frame_relpath, FrameStore};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone)]
pub struct DiskFrameStore {
    pub root: PathBuf,
}

impl DiskFrameStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, clip_id: &str, frame_index: u32) -> PathBuf {
        self.root.join(frame_relpath(clip_id, frame_index))
    }
}

impl FrameStore for DiskFrameStore {
    fn frame(&self, clip_id: &str, frame_index: u32) -> lam_core::Result<Image> {
        let path = self.path(clip_id, frame_index);
        read_png(&path).map_err(|_| lam_core::Error::MissingFrame {
            path: path.display().to_string(),
        })
    }
}

/// Loads an 8-bit image as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Image::from_data(h as usize, w as usize, data)?)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(3, 5);
        img.set_pixel(1, 2, [1.0, 0.5, 0.2]);
        let store = DiskFrameStore::new(dir.path());
        write_png(&store.path("c", 7), &img).unwrap();
        assert!(dir.path().join("c/000007.png").exists());
        let back = store.frame("c", 7).unwrap();
        assert_eq!((back.height, back.width), (3, 5));
        assert_eq!(back.pixel(1, 2), [1.0, 128.0 / 255.0, 51.0 / 255.0]);
        assert_eq!(back.pixel(0, 0), [0.0; 3]);
    }

    #[test]
    fn missing_frame_names_path() {
        let store = DiskFrameStore::new("/nonexistent/root");
        let err = store.frame("clip_a", 3).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/root/clip_a/000003.png"), "{err}");
    }
}
