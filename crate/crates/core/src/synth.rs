//! Seeded pergola scenes: flowers on a flat canopy above an upward-facing
//! stereo rig, rendered with exact stigma ground truth.
//!
//! Scene coordinates are the left camera frame: x right, y down (image rows),
//! z up toward the canopy.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::model::{BBox, Camera, Detection, ImageFrame};
use crate::rng::{derive_seed, hash_str, keyed_rng, mix64};
use crate::stereo::StereoRig;

const MAX_PLACEMENT_TRIES: usize = 2000;
const HALF_OPEN_RADIUS: f64 = 0.6;
const HALF_OPEN_VALUE: f64 = 0.7;
const BACKGROUND_NOISE: i32 = 12;
/// Largest share of the frame that glare at intensity 1 may cover.
const GLARE_MAX_COVERAGE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowerCount {
    Fixed(usize),
    /// Poisson-distributed count with this mean.
    Mean(f64),
    /// Flowers per square meter of canopy; count is Poisson over the extent.
    Density(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub canopy_height_m: f64,
    /// (length along image rows, width along image columns). `None` uses the
    /// region fully visible in both cameras.
    pub extent_m: Option<(f64, f64)>,
    pub flowers: FlowerCount,
    pub flower_radius_m: f64,
    /// Stigma radius as a fraction of the flower radius.
    pub stigma_fraction: f64,
    pub petal_color: [u8; 3],
    pub stigma_color: [u8; 3],
    pub background_color: [u8; 3],
    /// 0 disables glare.
    pub glare: f64,
    pub open_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canopy_height_m: 1.2,
            extent_m: None,
            flowers: FlowerCount::Mean(30.0),
            flower_radius_m: 0.025,
            stigma_fraction: 0.4,
            petal_color: [235, 200, 40],
            stigma_color: [250, 250, 245],
            background_color: [30, 70, 30],
            glare: 0.0,
            open_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Orchard conditions A, B1, B2 and B3.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let spec = match name {
            "A" => Self {
                canopy_height_m: 2.0,
                flowers: FlowerCount::Mean(60.0),
                ..base
            },
            "B1" => Self {
                flowers: FlowerCount::Mean(20.0),
                glare: 0.6,
                ..base
            },
            "B2" => Self {
                flowers: FlowerCount::Mean(30.0),
                ..base
            },
            "B3" => Self {
                flowers: FlowerCount::Mean(15.0),
                open_fraction: 0.5,
                ..base
            },
            _ => return None,
        };
        Some(spec)
    }

    /// `A|B1|B2|B3` or `custom:<path>`.
    pub fn resolve(name: &str) -> Result<Self> {
        if let Some(path) = name.strip_prefix("custom:") {
            let spec: Self = config::load_toml(Path::new(path))?;
            spec.validate()?;
            return Ok(spec);
        }
        Self::preset(name).ok_or_else(|| Error::Config(format!("unknown scene preset '{name}'")))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.canopy_height_m > 0.0 && self.canopy_height_m.is_finite()) {
            return Err(Error::Config("canopy_height_m must be > 0".into()));
        }
        if !(self.flower_radius_m > 0.0) {
            return Err(Error::Config("flower_radius_m must be > 0".into()));
        }
        if !(self.stigma_fraction > 0.0 && self.stigma_fraction <= 1.0) {
            return Err(Error::Config("stigma_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.glare) || !(0.0..=1.0).contains(&self.open_fraction) {
            return Err(Error::Config("glare and open_fraction must be in [0, 1]".into()));
        }
        match self.flowers {
            FlowerCount::Mean(m) | FlowerCount::Density(m) if !(m >= 0.0 && m.is_finite()) => {
                return Err(Error::Config("flower count parameters must be >= 0".into()))
            }
            _ => {}
        }
        if let Some((l, w)) = self.extent_m {
            if !(l > 0.0 && w > 0.0) {
                return Err(Error::Config("extent_m must be positive".into()));
            }
        }
        Ok(())
    }

    /// Canopy rectangle `[x0, x1] × [y0, y1]` that flower centers are drawn from.
    pub fn sampling_region(&self, rig: &StereoRig) -> Result<[f64; 4]> {
        let z = self.canopy_height_m;
        let margin = 2.0 * self.flower_radius_m;
        let (x0, x1, y0, y1) = match self.extent_m {
            Some((length, width)) => {
                let xc = rig.baseline_m / 2.0;
                (xc - width / 2.0, xc + width / 2.0, -length / 2.0, length / 2.0)
            }
            None => {
                let s = z / rig.focal_px;
                // left view covers [-cx, W - cx]·s; the right view is shifted by the baseline
                let x0 = rig.baseline_m - rig.cx * s;
                let x1 = (rig.width as f64 - rig.cx) * s;
                let y0 = -rig.cy * s;
                let y1 = (rig.height as f64 - rig.cy) * s;
                (x0 + margin, x1 - margin, y0 + margin, y1 - margin)
            }
        };
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Generation(format!(
                "no canopy area visible in both views at height {z} m"
            )));
        }
        Ok([x0, x1, y0, y1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flower {
    pub id: usize,
    pub xyz: [f64; 3],
    /// Physical radius after the half-open reduction.
    pub radius_m: f64,
    pub stigma_radius_m: f64,
    pub open: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub image_id: String,
    pub spec: SceneSpec,
    pub rig: StereoRig,
    pub flowers: Vec<Flower>,
    pub gt_left: Vec<Detection>,
    pub gt_right: Vec<Detection>,
}

impl SceneTruth {
    pub fn gt(&self, camera: Camera) -> &[Detection] {
        match camera {
            Camera::Left => &self.gt_left,
            Camera::Right => &self.gt_right,
        }
    }
}

/// Pinhole projection into the left or right rectified view.
pub fn project(p: [f64; 3], rig: &StereoRig, camera: Camera) -> Result<(f64, f64)> {
    let [x, y, z] = p;
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    let xc = match camera {
        Camera::Left => x,
        Camera::Right => x - rig.baseline_m,
    };
    Ok((rig.cx + rig.focal_px * xc / z, rig.cy + rig.focal_px * y / z))
}

/// Stigma box for one flower, or `None` when its center projects outside the view.
fn stigma_box(f: &Flower, rig: &StereoRig, camera: Camera) -> Result<Option<BBox>> {
    let (u, v) = project(f.xyz, rig, camera)?;
    let (w, h) = (rig.width as f64, rig.height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return Ok(None);
    }
    let r = rig.focal_px * f.stigma_radius_m / f.xyz[2];
    Ok(BBox::from_center(u, v, 2.0 * r, 2.0 * r)?.clip(w, h))
}

fn flower_count(spec: &SceneSpec, region: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let poisson = |mean: f64, rng: &mut ChaCha8Rng| {
        if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(rng) as usize
        } else {
            0
        }
    };
    match spec.flowers {
        FlowerCount::Fixed(n) => n,
        FlowerCount::Mean(m) => poisson(m, rng),
        FlowerCount::Density(d) => {
            let area = (region[1] - region[0]) * (region[3] - region[2]);
            poisson(d * area, rng)
        }
    }
}

/// Sample one scene. Flower centers are uniform over the canopy with a
/// minimum spacing of two flower radii.
pub fn generate_scene(spec: &SceneSpec, rig: &StereoRig, image_id: &str) -> Result<SceneTruth> {
    spec.validate()?;
    rig.validate()?;
    let region = spec.sampling_region(rig)?;
    let mut rng = keyed_rng(spec.seed, &[hash_str(image_id)]);
    let n = flower_count(spec, &region, &mut rng);
    let min_d2 = (2.0 * spec.flower_radius_m).powi(2);
    let z = spec.canopy_height_m;

    let mut flowers: Vec<Flower> = Vec::with_capacity(n);
    for id in 0..n {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x = rng.gen_range(region[0]..region[1]);
            let y = rng.gen_range(region[2]..region[3]);
            let clear = flowers
                .iter()
                .all(|f| (f.xyz[0] - x).powi(2) + (f.xyz[1] - y).powi(2) >= min_d2);
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(Error::Generation(format!(
                "could not place flower {} of {n} with spacing {} m after {MAX_PLACEMENT_TRIES} tries",
                id + 1,
                2.0 * spec.flower_radius_m
            )));
        };
        let open = rng.gen::<f64>() < spec.open_fraction;
        let scale = if open { HALF_OPEN_RADIUS } else { 1.0 };
        let radius_m = spec.flower_radius_m * scale;
        flowers.push(Flower {
            id,
            xyz: [x, y, z],
            radius_m,
            stigma_radius_m: radius_m * spec.stigma_fraction,
            open,
        });
    }

    let mut gt_left = Vec::new();
    let mut gt_right = Vec::new();
    for f in &flowers {
        if let Some(b) = stigma_box(f, rig, Camera::Left)? {
            gt_left.push(Detection::ground_truth(image_id, Camera::Left, b));
        }
        if let Some(b) = stigma_box(f, rig, Camera::Right)? {
            gt_right.push(Detection::ground_truth(image_id, Camera::Right, b));
        }
    }
    Ok(SceneTruth {
        image_id: image_id.to_string(),
        spec: spec.clone(),
        rig: rig.clone(),
        flowers,
        gt_left,
        gt_right,
    })
}

fn scaled(rgb: [u8; 3], k: f64) -> [u8; 3] {
    rgb.map(|c| (f64::from(c) * k).round() as u8)
}

fn render_view(truth: &SceneTruth, camera: Camera) -> Result<ImageFrame> {
    let rig = &truth.rig;
    let spec = &truth.spec;
    let (w, h) = (rig.width, rig.height);
    let noise_seed = derive_seed(spec.seed, &[hash_str(&truth.image_id), camera as u64]);
    let mut px = vec![0u8; w * h * 3];
    for (i, chunk) in px.chunks_exact_mut(3).enumerate() {
        let bits = mix64(noise_seed ^ i as u64);
        let n = (bits % (2 * BACKGROUND_NOISE as u64 + 1)) as i32 - BACKGROUND_NOISE;
        for (c, base) in chunk.iter_mut().zip(spec.background_color) {
            *c = (i32::from(base) + n).clamp(0, 255) as u8;
        }
    }

    for f in &truth.flowers {
        let (u, v) = project(f.xyz, rig, camera)?;
        let k = rig.focal_px / f.xyz[2];
        let (r, rs) = (f.radius_m * k, f.stigma_radius_m * k);
        let value = if f.open { HALF_OPEN_VALUE } else { 1.0 };
        let petal = scaled(spec.petal_color, value);
        let stigma = scaled(spec.stigma_color, value);
        let x0 = (u - r).floor().max(0.0) as usize;
        let y0 = (v - r).floor().max(0.0) as usize;
        let x1 = ((u + r).ceil().max(0.0) as usize).min(w);
        let y1 = ((v + r).ceil().max(0.0) as usize).min(h);
        for py in y0..y1 {
            let dy = py as f64 + 0.5 - v;
            for pxl in x0..x1 {
                let dx = pxl as f64 + 0.5 - u;
                let d2 = dx * dx + dy * dy;
                if d2 > r * r {
                    continue;
                }
                let rgb = if d2 <= rs * rs { stigma } else { petal };
                let o = (py * w + pxl) * 3;
                px[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    ImageFrame::new(truth.image_id.clone(), camera, w, h, 0.0, px)
}

/// Render both views. Glare from the scene spec is applied per view.
pub fn render_stereo(truth: &SceneTruth) -> Result<(ImageFrame, ImageFrame)> {
    let mut left = render_view(truth, Camera::Left)?;
    let mut right = render_view(truth, Camera::Right)?;
    if truth.spec.glare > 0.0 {
        let base = derive_seed(truth.spec.seed, &[hash_str(&truth.image_id)]);
        left = apply_glare(&left, truth.spec.glare, derive_seed(base, &[0]))?;
        right = apply_glare(&right, truth.spec.glare, derive_seed(base, &[1]))?;
    }
    Ok((left, right))
}

/// Blend 1–3 seeded elliptical patches toward white. The ellipses together
/// cover at most `intensity · 25%` of the frame.
pub fn apply_glare(frame: &ImageFrame, intensity: f64, seed: u64) -> Result<ImageFrame> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Validation(format!("glare intensity {intensity} outside [0, 1]")));
    }
    if intensity == 0.0 {
        return Ok(frame.clone());
    }
    let (w, h) = (frame.width(), frame.height());
    let mut rng = keyed_rng(seed, &[]);
    let n = rng.gen_range(1..=3usize);
    let budget = intensity * GLARE_MAX_COVERAGE * (w * h) as f64 / n as f64;
    let mut px = frame.pixels().to_vec();
    for _ in 0..n {
        let area = budget * rng.gen_range(0.5..0.9);
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let a = (area * aspect / std::f64::consts::PI).sqrt();
        let b = area / (std::f64::consts::PI * a);
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        let peak = 0.7 + 0.3 * intensity;
        let reach = a.max(b);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let (p, q) = ((dx * c + dy * s) / a, (-dx * s + dy * c) / b);
                let rho2 = p * p + q * q;
                if rho2 >= 1.0 {
                    continue;
                }
                // bright core fading to the rim
                let alpha = (peak * (1.0 - rho2 * rho2)).clamp(0.0, 1.0);
                let o = (y * w + x) * 3;
                for ch in &mut px[o..o + 3] {
                    *ch = (f64::from(*ch) + alpha * (255.0 - f64::from(*ch))).round() as u8;
                }
            }
        }
    }
    ImageFrame::new(frame.image_id.clone(), frame.camera, w, h, frame.timestamp, px)
}

/// One truth line per flower.
#[derive(Debug, Serialize)]
pub struct TruthRecord<'a> {
    pub image_id: &'a str,
    pub flower: usize,
    pub xyz: [f64; 3],
    pub radius: f64,
    pub open: bool,
}

pub fn truth_records(truth: &SceneTruth) -> impl Iterator<Item = TruthRecord<'_>> {
    truth.flowers.iter().map(|f| TruthRecord {
        image_id: &truth.image_id,
        flower: f.id,
        xyz: f.xyz,
        radius: f.radius_m,
        open: f.open,
    })
}

/// Image id of the `index`-th scene of a preset run.
pub fn image_id(preset: &str, index: usize) -> String {
    format!("{preset}_{index:04}")
}

/// Scene spec for the `index`-th image of a run; every image gets its own seed.
pub fn spec_for_image(base: &SceneSpec, preset: &str, run_seed: u64, index: usize) -> SceneSpec {
    base.clone()
        .with_seed(derive_seed(run_seed, &[hash_str(preset), index as u64]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub images: usize,
    pub flowers: usize,
}

/// Write `n` rendered scenes to `dir`: `left/<id>.png`, `right/<id>.png`,
/// `gt_left.jsonl`, `gt_right.jsonl`, `manifest.csv`
/// (`image_id,dataset,timestamp`) and `truth.jsonl`. `dataset` names the
/// preset in the manifest and in the image ids.
pub fn write_dataset(
    dir: &Path,
    base: &SceneSpec,
    dataset: &str,
    n: usize,
    seed: u64,
    rig: &StereoRig,
) -> Result<DatasetSummary> {
    for sub in ["left", "right"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut gt_left = Vec::new();
    let mut gt_right = Vec::new();
    let mut manifest = vec!["image_id,dataset,timestamp".to_string()];
    let mut truth_lines = Vec::new();
    let mut summary = DatasetSummary::default();
    for i in 0..n {
        let id = image_id(dataset, i);
        let ts = i as f64 * crate::model::FRAME_PERIOD_S;
        let truth = generate_scene(&spec_for_image(base, dataset, seed, i), rig, &id)?;
        let (l, r) = render_stereo(&truth)?;
        crate::imageio::write_frame(&dir.join("left").join(format!("{id}.png")), &l.with_timestamp(ts))?;
        crate::imageio::write_frame(&dir.join("right").join(format!("{id}.png")), &r.with_timestamp(ts))?;
        gt_left.extend(truth.gt_left.iter().cloned());
        gt_right.extend(truth.gt_right.iter().cloned());
        manifest.push(format!("{id},{dataset},{ts}"));
        truth_lines.extend(truth_records(&truth).map(|t| serde_json::to_string(&t).expect("truth record serializes")));
        summary.images += 1;
        summary.flowers += truth.flowers.len();
    }
    crate::interchange::write_detections(&dir.join("gt_left.jsonl"), &gt_left, false)?;
    crate::interchange::write_detections(&dir.join("gt_right.jsonl"), &gt_right, false)?;
    crate::interchange::write_lines(&dir.join("manifest.csv"), manifest)?;
    crate::interchange::write_lines(&dir.join("truth.jsonl"), truth_lines)?;
    Ok(summary)
}
