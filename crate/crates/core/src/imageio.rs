//! PNG and binary PPM frames on disk.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::model::{Camera, ImageFrame};

pub fn read_frame(path: &Path, image_id: &str, camera: Camera, timestamp: f64) -> Result<ImageFrame> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    ImageFrame::new(image_id, camera, w as usize, h as usize, timestamp, img.into_raw())
}

/// Format follows the extension: `.png`, or `.ppm` / `.pnm` for binary PPM.
pub fn write_frame(path: &Path, frame: &ImageFrame) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => ImageFormat::Png,
        Some("ppm" | "pnm") => ImageFormat::Pnm,
        other => {
            return Err(Error::Validation(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            )))
        }
    };
    let img = RgbImage::from_raw(frame.width() as u32, frame.height() as u32, frame.pixels().to_vec())
        .expect("frame buffer matches its dimensions");
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}
