//! HSV thresholding for white stigma and yellow petal pixels.

use serde::{Deserialize, Serialize};

use super::raster::{FloatMap, Mask};
use super::saliency::luma;
use crate::error::{Error, Result};
use crate::model::ImageFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorFilterConfig {
    pub white_sat_max: f32,
    pub white_val_min: f32,
    /// Inclusive hue interval in degrees.
    pub yellow_hue_range: [f32; 2],
    pub yellow_sat_min: f32,
    pub yellow_val_min: f32,
}

impl Default for ColorFilterConfig {
    fn default() -> Self {
        Self {
            white_sat_max: 0.25,
            white_val_min: 0.70,
            yellow_hue_range: [40.0, 70.0],
            yellow_sat_min: 0.30,
            yellow_val_min: 0.50,
        }
    }
}

impl ColorFilterConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("color.{name} = {v} is outside [0, 1]")))
            }
        };
        unit("white_sat_max", self.white_sat_max)?;
        unit("white_val_min", self.white_val_min)?;
        unit("yellow_sat_min", self.yellow_sat_min)?;
        unit("yellow_val_min", self.yellow_val_min)?;
        let [lo, hi] = self.yellow_hue_range;
        if !(0.0 <= lo && lo <= hi && hi < 360.0) {
            return Err(Error::Config(format!(
                "color.yellow_hue_range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 360"
            )));
        }
        Ok(())
    }
}

/// Per-pixel classifier with thresholds pre-scaled to the 0..255 domain.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelClassifier {
    gate: u8,
    white_sat_max: f32,
    white_val_min: f32,
    hue_lo: f32,
    hue_hi: f32,
    yellow_sat_min: f32,
    yellow_val_min: f32,
}

impl PixelClassifier {
    pub(crate) fn new(cfg: &ColorFilterConfig) -> Self {
        let vmin = cfg.white_val_min.min(cfg.yellow_val_min);
        // Anything darker than the gate fails both value tests.
        let gate = ((vmin * 255.0).floor() - 1.0).clamp(0.0, 255.0) as u8;
        Self {
            gate,
            white_sat_max: cfg.white_sat_max,
            white_val_min: cfg.white_val_min,
            hue_lo: cfg.yellow_hue_range[0],
            hue_hi: cfg.yellow_hue_range[1],
            yellow_sat_min: cfg.yellow_sat_min,
            yellow_val_min: cfg.yellow_val_min,
        }
    }

    #[inline]
    pub(crate) fn classify(&self, r: u8, g: u8, b: u8) -> bool {
        let max = r.max(g).max(b);
        if max < self.gate {
            return false;
        }
        let min = r.min(g).min(b);
        let v = f32::from(max) / 255.0;
        let delta = f32::from(max - min);
        let s = if max == 0 { 0.0 } else { delta / f32::from(max) };
        if s <= self.white_sat_max && v >= self.white_val_min {
            return true;
        }
        if s < self.yellow_sat_min || v < self.yellow_val_min {
            return false;
        }
        let h = hue_degrees(r, g, b, max, delta);
        h >= self.hue_lo && h <= self.hue_hi
    }
}

#[inline]
fn hue_degrees(r: u8, g: u8, b: u8, max: u8, delta: f32) -> f32 {
    if delta == 0.0 {
        return 0.0;
    }
    let (r, g, b) = (f32::from(r), f32::from(g), f32::from(b));
    let h = if max as f32 == r {
        60.0 * ((g - b) / delta)
    } else if max as f32 == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

/// Mask of pixels classified as white or yellow flower material.
pub fn hsv_filter(frame: &ImageFrame, cfg: &ColorFilterConfig) -> Mask {
    let classifier = PixelClassifier::new(cfg);
    let mut mask = Mask::zeros(frame.width(), frame.height());
    for (m, px) in mask.data.iter_mut().zip(frame.pixels().chunks_exact(3)) {
        *m = u8::from(classifier.classify(px[0], px[1], px[2]));
    }
    mask
}

/// `hsv_filter` and luminance in one pass over the pixels.
pub(crate) fn hsv_filter_with_luminance(frame: &ImageFrame, cfg: &ColorFilterConfig) -> (Mask, FloatMap) {
    let classifier = PixelClassifier::new(cfg);
    let mut mask = Mask::zeros(frame.width(), frame.height());
    let mut lum = FloatMap::zeros(frame.width(), frame.height());
    for ((m, l), px) in mask
        .data
        .iter_mut()
        .zip(&mut lum.data)
        .zip(frame.pixels().chunks_exact(3))
    {
        *m = u8::from(classifier.classify(px[0], px[1], px[2]));
        *l = luma(px[0], px[1], px[2]);
    }
    (mask, lum)
}
