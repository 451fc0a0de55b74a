//! Color-and-saliency flower detector.
//!
//! Four stages: HSV color filtering, multi-scale saliency, intersection of the
//! two masks, and blob extraction with size and convexity limits. Each blob
//! becomes one detection scored by its mean saliency.

mod blob;
mod color;
mod raster;
mod saliency;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use blob::{blob_detect, Blob, BlobConfig};
pub use color::{hsv_filter, ColorFilterConfig};
pub use raster::{FloatMap, Mask};
pub use saliency::{downsample, luminance, normalize_in_place, saliency_from_luminance, saliency_map, SaliencyConfig};

use crate::config;
use crate::error::Result;
use crate::model::{BBox, Detection, ImageFrame};

/// All three stage configurations, loadable from a sectioned `key = value` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalConfig {
    pub color: ColorFilterConfig,
    pub saliency: SaliencyConfig,
    pub blob: BlobConfig,
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        self.color.validate()?;
        self.saliency.validate()?;
        self.blob.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = config::parse_toml(text, "detector config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = config::load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `color ∧ (saliency ≥ threshold)`.
pub fn merge_masks(color: &Mask, saliency: &FloatMap, threshold: f32) -> Result<Mask> {
    raster::check_dims(color.dims(), saliency.dims())?;
    let mut out = Mask::zeros(color.width, color.height);
    for ((o, c), s) in out.data.iter_mut().zip(&color.data).zip(&saliency.data) {
        *o = u8::from(*c != 0 && *s >= threshold);
    }
    Ok(out)
}

/// Run all four stages on one frame.
pub fn detect(frame: &ImageFrame, cfg: &ClassicalConfig) -> Vec<Detection> {
    let (color, lum) = color::hsv_filter_with_luminance(frame, &cfg.color);
    if raster::nonzero_positions(&color.data).next().is_none() {
        return Vec::new();
    }
    let sal = saliency::raw_saliency(&lum, &cfg.saliency);
    // same rule as `merge_masks`, evaluating saliency only under the color mask
    let mut merged = Mask::zeros(color.width, color.height);
    for i in raster::nonzero_positions(&color.data) {
        merged.data[i] = u8::from(sal.value(i) >= cfg.blob.merge_threshold);
    }
    let (fw, fh) = frame.bounds();
    blob_detect(&merged, &cfg.blob)
        .into_iter()
        .map(|b| {
            let score = b.pixels.iter().map(|p| f64::from(sal.value(*p as usize))).sum::<f64>() / b.area as f64;
            Detection {
                image_id: frame.image_id.clone(),
                camera: frame.camera,
                bbox: shrink_about_center(&b.bbox, cfg.blob.stigma_fraction, fw, fh),
                score: score.clamp(0.0, 1.0),
                label: crate::model::FLOWER_LABEL.to_string(),
            }
        })
        .collect()
}

fn shrink_about_center(b: &BBox, k: f64, fw: f64, fh: f64) -> BBox {
    if k == 1.0 {
        return *b;
    }
    let (cx, cy) = b.center();
    BBox::from_center(cx, cy, b.w() * k, b.h() * k)
        .ok()
        .and_then(|s| s.clip(fw, fh))
        .unwrap_or(*b)
}
