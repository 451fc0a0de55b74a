//! Statistical stand-ins for neural detectors.
//!
//! Ground truth is thinned to the profile's recall, jittered, and padded with
//! Poisson false positives so the expected precision equals the profile's.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::model::{BBox, Camera, Detection, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::rng::{hash_str, keyed_rng};

const FALLBACK_FP_SIZE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    pub name: String,
    pub precision_target: f64,
    pub recall_target: f64,
    pub latency_ms: f64,
    #[serde(default = "default_jitter")]
    pub center_jitter_sigma: f64,
    #[serde(default = "default_scores")]
    pub score_distribution: (f64, f64),
}

fn default_jitter() -> f64 {
    1.0
}

fn default_scores() -> (f64, f64) {
    (0.6, 0.99)
}

impl DetectorProfile {
    fn preset(name: &str, precision: f64, recall: f64, latency_ms: f64) -> Self {
        Self {
            name: name.to_string(),
            precision_target: precision,
            recall_target: recall,
            latency_ms,
            center_jitter_sigma: default_jitter(),
            score_distribution: default_scores(),
        }
    }

    /// Faster R-CNN NAS.
    pub fn nas() -> Self {
        Self::preset("nas", 0.968, 0.680, 1833.0)
    }

    /// Faster R-CNN Inception V2.
    pub fn frcnn_iv2() -> Self {
        Self::preset("frcnn_iv2", 0.904, 0.758, 58.0)
    }

    /// SSD Inception V2.
    pub fn ssd_iv2() -> Self {
        Self::preset("ssd_iv2", 0.785, 0.612, 42.0)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "nas" => Some(Self::nas()),
            "frcnn_iv2" => Some(Self::frcnn_iv2()),
            "ssd_iv2" => Some(Self::ssd_iv2()),
            _ => None,
        }
    }

    /// A preset name or `file:<path>`.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("file:") {
            let p: Self = config::load_toml(Path::new(path))?;
            p.validate()?;
            return Ok(p);
        }
        Self::by_name(spec).ok_or_else(|| Error::Config(format!("unknown detector profile '{spec}'")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Self = config::parse_toml(text, "detector profile")?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.precision_target) {
            return Err(Error::Config(format!(
                "profile '{}': precision_target must be in (0, 1]",
                self.name
            )));
        }
        if !in_unit(self.recall_target) {
            return Err(Error::Config(format!(
                "profile '{}': recall_target must be in (0, 1]",
                self.name
            )));
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(Error::Config("latency_ms must be finite and >= 0".into()));
        }
        if !(self.center_jitter_sigma >= 0.0 && self.center_jitter_sigma.is_finite()) {
            return Err(Error::Config("center_jitter_sigma must be finite and >= 0".into()));
        }
        let (lo, hi) = self.score_distribution;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(
                "score_distribution must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn latency_s(&self) -> f64 {
        self.latency_ms / 1000.0
    }
}

/// Frame dimensions the emulated boxes must stay inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

impl Default for FrameSize {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH as f64,
            height: DEFAULT_HEIGHT as f64,
        }
    }
}

fn camera_key(c: Camera) -> u64 {
    match c {
        Camera::Left => 0,
        Camera::Right => 1,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn place_inside(x: f64, y: f64, w: f64, h: f64, frame: FrameSize) -> BBox {
    let w = w.min(frame.width);
    let h = h.min(frame.height);
    let x = x.clamp(0.0, frame.width - w);
    let y = y.clamp(0.0, frame.height - h);
    BBox::new(x, y, w, h).expect("positive size")
}

fn score<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Emulate one image's detections. Records are keyed individually so images
/// can be processed in any order.
fn emulate_image(
    image_id: &str,
    camera: Camera,
    gts: &[&Detection],
    profile: &DetectorProfile,
    seed: u64,
    frame: FrameSize,
) -> Vec<Detection> {
    let base = [hash_str(image_id), camera_key(camera)];
    let jitter = Normal::new(0.0, profile.center_jitter_sigma).expect("sigma validated");
    let mut out = Vec::new();

    for (i, gt) in gts.iter().enumerate() {
        let mut rng = keyed_rng(seed, &[base[0], base[1], i as u64]);
        if rng.gen::<f64>() >= profile.recall_target {
            continue;
        }
        let b = &gt.bbox;
        let (dx, dy) = if profile.center_jitter_sigma > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let bbox = if dx == 0.0 && dy == 0.0 {
            *b
        } else {
            place_inside(b.x() + dx, b.y() + dy, b.w(), b.h(), frame)
        };
        out.push(Detection {
            image_id: image_id.to_string(),
            camera,
            bbox,
            score: score(&mut rng, profile.score_distribution),
            label: gt.label.clone(),
        });
    }

    let kept = out.len();
    let mean_fp = kept as f64 * (1.0 - profile.precision_target) / profile.precision_target;
    if mean_fp > 0.0 {
        // FP records use indices after the ground-truth ones
        let mut rng = keyed_rng(seed, &[base[0], base[1], gts.len() as u64]);
        let n_fp = Poisson::new(mean_fp).expect("positive mean").sample(&mut rng) as usize;
        let (w, h) = if gts.is_empty() {
            (FALLBACK_FP_SIZE, FALLBACK_FP_SIZE)
        } else {
            (
                median(gts.iter().map(|g| g.bbox.w()).collect()),
                median(gts.iter().map(|g| g.bbox.h()).collect()),
            )
        };
        for j in 0..n_fp {
            let mut rng = keyed_rng(seed, &[base[0], base[1], (gts.len() + 1 + j) as u64]);
            let x = rng.gen::<f64>() * (frame.width - w).max(0.0);
            let y = rng.gen::<f64>() * (frame.height - h).max(0.0);
            out.push(Detection {
                image_id: image_id.to_string(),
                camera,
                bbox: place_inside(x, y, w, h, frame),
                score: score(&mut rng, profile.score_distribution),
                label: crate::model::FLOWER_LABEL.to_string(),
            });
        }
    }
    out
}

/// Emulate a detector over ground truth. Output is grouped by
/// (image_id, camera) in sorted order, records in generation order.
pub fn emulate(gt: &[Detection], profile: &DetectorProfile, seed: u64, frame: FrameSize) -> Result<Vec<Detection>> {
    profile.validate()?;
    let mut by_image: BTreeMap<(&str, Camera), Vec<&Detection>> = BTreeMap::new();
    for d in gt {
        by_image.entry((d.image_id.as_str(), d.camera)).or_default().push(d);
    }
    Ok(by_image
        .into_iter()
        .flat_map(|((id, cam), gts)| emulate_image(id, cam, &gts, profile, seed, frame))
        .collect())
}

/// Time at which each frame's detections become available.
pub fn simulate_latency(profile: &DetectorProfile, frame_timestamps: &[f64]) -> Vec<f64> {
    let lat = profile.latency_s();
    frame_timestamps.iter().map(|t| t + lat).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange;

    fn grid_gt(images: usize, per_image: usize) -> Vec<Detection> {
        let mut v = Vec::new();
        for i in 0..images {
            for k in 0..per_image {
                let x = 40.0 + (k % 10) as f64 * 150.0;
                let y = 40.0 + (k / 10) as f64 * 150.0;
                v.push(Detection::ground_truth(
                    format!("img{i:04}"),
                    Camera::Left,
                    BBox::new(x, y, 16.0, 16.0).unwrap(),
                ));
            }
        }
        v
    }

    #[test]
    fn latency_examples() {
        let ssd = DetectorProfile::ssd_iv2();
        assert!((simulate_latency(&ssd, &[10.0])[0] - 10.042).abs() < 1e-12);
        assert!((simulate_latency(&DetectorProfile::nas(), &[0.0])[0] - 1.833).abs() < 1e-12);
        let mut zero = ssd;
        zero.latency_ms = 0.0;
        assert_eq!(simulate_latency(&zero, &[0.5, 1.25]), vec![0.5, 1.25]);
    }

    #[test]
    fn degenerate_profile_reproduces_ground_truth() {
        let gt = grid_gt(3, 7);
        let p = DetectorProfile {
            name: "perfect".into(),
            precision_target: 1.0,
            recall_target: 1.0,
            latency_ms: 0.0,
            center_jitter_sigma: 0.0,
            score_distribution: (1.0, 1.0),
        };
        let out = emulate(&gt, &p, 3, FrameSize::default()).unwrap();
        let boxes: Vec<_> = out.iter().map(|d| (d.image_id.clone(), d.bbox)).collect();
        let expect: Vec<_> = gt.iter().map(|d| (d.image_id.clone(), d.bbox)).collect();
        assert_eq!(boxes, expect);
    }

    #[test]
    fn zero_precision_is_config_error() {
        let mut p = DetectorProfile::frcnn_iv2();
        p.precision_target = 0.0;
        assert!(matches!(
            emulate(&[], &p, 0, FrameSize::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        let gt = grid_gt(20, 30);
        let p = DetectorProfile::ssd_iv2();
        let a = interchange::write_str(&emulate(&gt, &p, 42, FrameSize::default()).unwrap(), true);
        let b = interchange::write_str(&emulate(&gt, &p, 42, FrameSize::default()).unwrap(), true);
        assert_eq!(a, b);
        let c = interchange::write_str(&emulate(&gt, &p, 43, FrameSize::default()).unwrap(), true);
        assert_ne!(a, c);
    }

    #[test]
    fn input_order_does_not_matter() {
        let gt = grid_gt(5, 12);
        let p = DetectorProfile::frcnn_iv2();
        let mut rev_images = gt.clone();
        rev_images.sort_by(|a, b| b.image_id.cmp(&a.image_id));
        assert_eq!(
            emulate(&gt, &p, 9, FrameSize::default()).unwrap(),
            emulate(&rev_images, &p, 9, FrameSize::default()).unwrap()
        );
    }

    #[test]
    fn kept_fraction_matches_recall() {
        let gt = grid_gt(400, 30);
        let n = gt.len() as f64;
        let mut p = DetectorProfile::frcnn_iv2();
        p.precision_target = 1.0;
        let kept = emulate(&gt, &p, 7, FrameSize::default()).unwrap().len() as f64;
        let r = p.recall_target;
        assert!((kept / n - r).abs() <= 4.0 * (r * (1.0 - r) / n).sqrt());
    }

    #[test]
    fn boxes_stay_in_frame() {
        let frame = FrameSize {
            width: 200.0,
            height: 100.0,
        };
        let gt: Vec<Detection> = (0..50)
            .map(|i| {
                let b = if i % 2 == 0 {
                    BBox::new(0.0, 0.0, 10.0, 10.0)
                } else {
                    BBox::new(190.0, 90.0, 10.0, 10.0)
                };
                Detection::ground_truth(format!("e{i}"), Camera::Right, b.unwrap())
            })
            .collect();
        let mut p = DetectorProfile::ssd_iv2();
        p.center_jitter_sigma = 5.0;
        for d in emulate(&gt, &p, 1, frame).unwrap() {
            assert!(d.bbox.within(200.0, 100.0), "{:?}", d.bbox);
        }
    }

    #[test]
    fn profile_file_parses() {
        let p = DetectorProfile::from_toml_str(
            "name = \"custom\"\nprecision_target = 0.5\nrecall_target = 0.5\nlatency_ms = 10.0\nscore_distribution = [0.7, 0.8]\n",
        )
        .unwrap();
        assert_eq!(p.score_distribution, (0.7, 0.8));
        assert_eq!(p.center_jitter_sigma, 1.0);
        assert!(DetectorProfile::resolve("yolo").is_err());
        assert_eq!(DetectorProfile::resolve("nas").unwrap().latency_ms, 1833.0);
    }
}
