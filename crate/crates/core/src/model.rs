//! Shared domain vocabulary: frames, boxes, detections and dataset descriptors.
//!
//! Pixel coordinates are continuous. A box `(x, y, w, h)` covers the half-open
//! rectangle `[x, x + w) × [y, y + h)` with `x` to the right and `y` down, so
//! the pixel at integer position `(i, j)` has its center at `(i + 0.5, j + 0.5)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default capture geometry of the orchard stereo rig.
pub const DEFAULT_WIDTH: usize = 1920;
pub const DEFAULT_HEIGHT: usize = 1080;
/// Capture period at 20 Hz.
pub const FRAME_PERIOD_S: f64 = 0.05;

/// Label carried by every detection; there is a single class.
pub const FLOWER_LABEL: &str = "flower";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Left,
    Right,
}

impl Camera {
    pub fn as_str(self) -> &'static str {
        match self {
            Camera::Left => "left",
            Camera::Right => "right",
        }
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Camera {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Camera::Left),
            "right" => Ok(Camera::Right),
            other => Err(Error::Validation(format!("unknown camera '{other}'"))),
        }
    }
}

/// A row-major 8-bit RGB frame. Pixel storage is shared, so clones are cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub image_id: String,
    pub camera: Camera,
    width: usize,
    height: usize,
    pub timestamp: f64,
    pixels: Arc<[u8]>,
}

impl ImageFrame {
    pub fn new(
        image_id: impl Into<String>,
        camera: Camera,
        width: usize,
        height: usize,
        timestamp: f64,
        pixels: impl Into<Arc<[u8]>>,
    ) -> Result<Self> {
        let pixels = pixels.into();
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            camera,
            width,
            height,
            timestamp,
            pixels,
        })
    }

    /// A frame filled with a single color.
    pub fn filled(
        image_id: impl Into<String>,
        camera: Camera,
        width: usize,
        height: usize,
        rgb: [u8; 3],
    ) -> Result<Self> {
        let mut buf = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            buf.extend_from_slice(&rgb);
        }
        Self::new(image_id, camera, width, height, 0.0, buf)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn shared_pixels(&self) -> Arc<[u8]> {
        Arc::clone(&self.pixels)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn with_id(mut self, image_id: impl Into<String>, camera: Camera) -> Self {
        self.image_id = image_id.into();
        self.camera = camera;
        self
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }
}

/// Axis-aligned pixel box. Width and height are always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Validation("box coordinates must be finite".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Validation(format!("box size must be positive, got w={w} h={h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Scale about the origin; `k` must be positive.
    pub fn scale(&self, k: f64) -> Self {
        assert!(k > 0.0, "scale factor must be positive");
        Self {
            x: self.x * k,
            y: self.y * k,
            w: self.w * k,
            h: self.h * k,
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Intersection with `[0,width]×[0,height]`, or `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (x1 > x0 && y1 > y0).then_some(Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

pub fn bbox_area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // right()/bottom() round, so identical boxes would otherwise land just under 1
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One flower-stigma box in one camera image. Ground truth carries `score = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub camera: Camera,
    pub bbox: BBox,
    pub score: f64,
    pub label: String,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, camera: Camera, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            image_id: image_id.into(),
            camera,
            bbox,
            score,
            label: FLOWER_LABEL.to_string(),
        })
    }

    pub fn ground_truth(image_id: impl Into<String>, camera: Camera, bbox: BBox) -> Self {
        Self {
            image_id: image_id.into(),
            camera,
            bbox,
            score: 1.0,
            label: FLOWER_LABEL.to_string(),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        self.bbox.center()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glare {
    Normal,
    Glare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ripeness {
    Fully,
    Half,
}

/// Stratification descriptor for one evaluation group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub avg_flowers: f64,
    pub glare: Glare,
    pub ripeness: Ripeness,
    pub n_images: usize,
}

impl DatasetDescriptor {
    pub fn new(
        name: impl Into<String>,
        avg_flowers: f64,
        glare: Glare,
        ripeness: Ripeness,
        n_images: usize,
    ) -> Result<Self> {
        if n_images == 0 {
            return Err(Error::Validation("dataset needs at least one image".into()));
        }
        if !(avg_flowers >= 0.0) {
            return Err(Error::Validation("average flower count must be >= 0".into()));
        }
        Ok(Self {
            name: name.into(),
            avg_flowers,
            glare,
            ripeness,
            n_images,
        })
    }

    /// The four evaluation groups of the orchard dataset.
    pub fn presets() -> [DatasetDescriptor; 4] {
        let d = |name: &str, avg, glare, ripeness, n| DatasetDescriptor {
            name: name.to_string(),
            avg_flowers: avg,
            glare,
            ripeness,
            n_images: n,
        };
        [
            d("A", 60.0, Glare::Normal, Ripeness::Fully, 62),
            d("B1", 20.0, Glare::Glare, Ripeness::Fully, 68),
            d("B2", 30.0, Glare::Normal, Ripeness::Fully, 82),
            d("B3", 15.0, Glare::Normal, Ripeness::Half, 69),
        ]
    }

    pub fn preset(name: &str) -> Option<DatasetDescriptor> {
        Self::presets().into_iter().find(|d| d.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(bbox_area(&b(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(bbox_area(&b(5.0, 5.0, 1.0, 1.0)), 1.0);
        assert_eq!(bbox_area(&b(0.0, 0.0, 3.0, 7.0)), 21.0);
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 10.0, 10.0)), 0.0);
        // inter 50, union 150
        assert!((iou(&a, &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &b(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn frame_buffer_length_checked() {
        assert!(ImageFrame::new("a", Camera::Left, 2, 2, 0.0, vec![0u8; 11]).is_err());
        assert!(ImageFrame::new("a", Camera::Left, 0, 2, 0.0, Vec::<u8>::new()).is_err());
        assert!(ImageFrame::new("a", Camera::Left, 2, 2, 0.0, vec![0u8; 12]).is_ok());
    }

    #[test]
    fn clip_to_frame() {
        let c = b(-5.0, -5.0, 10.0, 10.0).clip(100.0, 100.0).unwrap();
        assert_eq!(c.to_array(), [0.0, 0.0, 5.0, 5.0]);
        assert!(b(200.0, 0.0, 10.0, 10.0).clip(100.0, 100.0).is_none());
    }

    #[test]
    fn dataset_presets() {
        let b2 = DatasetDescriptor::preset("B2").unwrap();
        assert_eq!((b2.avg_flowers, b2.n_images), (30.0, 82));
        assert_eq!(DatasetDescriptor::preset("B1").unwrap().glare, Glare::Glare);
        assert_eq!(DatasetDescriptor::preset("B3").unwrap().ripeness, Ripeness::Half);
        assert!(DatasetDescriptor::new("x", 1.0, Glare::Normal, Ripeness::Fully, 0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), c in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let before = iou(&a, &c);
            let after = iou(&a.translate(dx, dy), &c.translate(dx, dy));
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn iou_one_only_for_identical(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != c {
                prop_assert!(iou(&a, &c) < 1.0);
            }
        }
    }
}
