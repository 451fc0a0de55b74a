//! Frame streams: synthetic scenes, dataset directories, and left/right pairing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::emulator::FrameSize;
use crate::error::{Error, Result};
use crate::imageio;
use crate::interchange;
use crate::model::{Camera, Detection, ImageFrame, FRAME_PERIOD_S};
use crate::stereo::StereoRig;
use crate::synth::{generate_scene, image_id, render_stereo, spec_for_image, SceneSpec, SceneTruth};

/// Left and right frames are paired when their timestamps differ by at most this.
pub const PAIRING_TOLERANCE_S: f64 = 0.010;

#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Loaded(Arc<ImageFrame>),
    /// Read by the worker that processes the frame.
    File(PathBuf),
}

/// One camera image as it enters the pipeline. Pixels are optional because
/// the emulated detector works from ground truth alone.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub image_id: String,
    pub camera: Camera,
    pub timestamp: f64,
    pub size: FrameSize,
    pub pixels: Option<Pixels>,
    pub truth: Option<Arc<Vec<Detection>>>,
}

impl FrameInput {
    /// The frame's pixels, loading them from disk if needed.
    pub fn load(&self) -> Result<Arc<ImageFrame>> {
        match &self.pixels {
            Some(Pixels::Loaded(f)) => Ok(Arc::clone(f)),
            Some(Pixels::File(p)) => imageio::read_frame(p, &self.image_id, self.camera, self.timestamp).map(Arc::new),
            None => Err(Error::Validation(format!(
                "frame {} ({}) carries no pixels",
                self.image_id, self.camera
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoInput {
    /// Position in the paired stream.
    pub seq: usize,
    pub left: FrameInput,
    pub right: FrameInput,
}

impl StereoInput {
    pub fn timestamp(&self) -> f64 {
        self.left.timestamp
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paired {
    pub pairs: Vec<StereoInput>,
    pub unpaired: Vec<FrameInput>,
}

/// Merge-join two timestamp-ordered camera streams. A frame whose nearest
/// partner is further than `tolerance` away is returned unpaired.
pub fn pair_frames(left: Vec<FrameInput>, right: Vec<FrameInput>, tolerance: f64) -> Result<Paired> {
    for (name, s) in [("left", &left), ("right", &right)] {
        if let Some(w) = s.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Validation(format!(
                "{name} stream is not timestamp-ordered at {} ({} < {})",
                w[1].image_id, w[1].timestamp, w[0].timestamp
            )));
        }
    }
    let mut out = Paired::default();
    let mut r = right.into_iter().peekable();
    for l in left {
        // right frames too early for this left frame can never pair
        while let Some(rf) = r.next_if(|rf| rf.timestamp < l.timestamp - tolerance) {
            out.unpaired.push(rf);
        }
        match r.next_if(|rf| rf.timestamp <= l.timestamp + tolerance) {
            Some(rf) => {
                let seq = out.pairs.len();
                out.pairs.push(StereoInput {
                    seq,
                    left: l,
                    right: rf,
                });
            }
            None => out.unpaired.push(l),
        }
    }
    out.unpaired.extend(r);
    Ok(out)
}

/// A synthetic stream of `n` stereo frames at the nominal frame rate.
///
/// Frame `i` is named `{preset}_{i:04}`. When `render` is set, `scenes`
/// distinct scenes are rendered once and cycled, so the image inside a
/// cycled frame keeps the id of the scene it was rendered for. Otherwise
/// every frame gets its own scene and carries ground truth only.
pub fn synth_stream(
    base: &SceneSpec,
    preset: &str,
    n: usize,
    seed: u64,
    rig: &StereoRig,
    render: bool,
    scenes: usize,
) -> Result<(Vec<FrameInput>, Vec<FrameInput>)> {
    let distinct = if render { scenes.clamp(1, n.max(1)) } else { n };
    let mut truths: Vec<SceneTruth> = Vec::with_capacity(distinct.min(n));
    let mut images: Vec<(Arc<ImageFrame>, Arc<ImageFrame>)> = Vec::new();
    for i in 0..distinct.min(n) {
        let t = generate_scene(&spec_for_image(base, preset, seed, i), rig, &image_id(preset, i))?;
        if render {
            let (l, r) = render_stereo(&t)?;
            images.push((Arc::new(l), Arc::new(r)));
        }
        truths.push(t);
    }
    let size = FrameSize {
        width: rig.width as f64,
        height: rig.height as f64,
    };
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % truths.len();
        let id = image_id(preset, i);
        let ts = i as f64 * FRAME_PERIOD_S;
        for (cam, out) in [(Camera::Left, &mut left), (Camera::Right, &mut right)] {
            let truth: Vec<Detection> = truths[k]
                .gt(cam)
                .iter()
                .map(|d| Detection {
                    image_id: id.clone(),
                    ..d.clone()
                })
                .collect();
            // cycled frames share the rendered pixels; detections are
            // relabelled with the frame's own id downstream
            let pixels = images
                .get(k)
                .map(|(l, r)| Pixels::Loaded(Arc::clone(if cam == Camera::Left { l } else { r })));
            out.push(FrameInput {
                image_id: id.clone(),
                camera: cam,
                timestamp: ts,
                size,
                pixels,
                truth: Some(Arc::new(truth)),
            });
        }
    }
    Ok((left, right))
}

/// A dataset directory: `left/<id>.{png,ppm}`, `right/<id>.{png,ppm}`,
/// optional `manifest.csv` (`image_id,dataset[,timestamp]`) fixing order
/// and timestamps, and optional `gt_left.jsonl` / `gt_right.jsonl`.
///
/// Without a manifest, ids come from the left directory in sorted order.
/// Missing timestamps default to the frame index times the nominal period.
pub fn dir_stream(dir: &Path) -> Result<(Vec<FrameInput>, Vec<FrameInput>)> {
    let manifest = dir.join("manifest.csv");
    let order: Vec<(String, Option<f64>)> = if manifest.exists() {
        read_manifest_times(&manifest)?
    } else {
        let mut ids: Vec<String> = list_images(&dir.join("left"))?.into_keys().collect();
        ids.sort();
        ids.into_iter().map(|id| (id, None)).collect()
    };
    let mut streams = Vec::with_capacity(2);
    for cam in [Camera::Left, Camera::Right] {
        let files = list_images(&dir.join(cam.as_str()))?;
        let gt_path = dir.join(format!("gt_{cam}.jsonl"));
        let gt = if gt_path.exists() {
            Some(interchange::replay(&gt_path)?)
        } else {
            None
        };
        let mut frames = Vec::new();
        for (i, (id, ts)) in order.iter().enumerate() {
            let Some(path) = files.get(id) else { continue };
            let (w, h) = image::image_dimensions(path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?;
            let truth = gt.as_ref().map(|g| {
                Arc::new(
                    g.get(id)
                        .map(|v| v.iter().filter(|d| d.camera == cam).cloned().collect())
                        .unwrap_or_default(),
                )
            });
            frames.push(FrameInput {
                image_id: id.clone(),
                camera: cam,
                timestamp: ts.unwrap_or(i as f64 * FRAME_PERIOD_S),
                size: FrameSize {
                    width: f64::from(w),
                    height: f64::from(h),
                },
                pixels: Some(Pixels::File(path.clone())),
                truth,
            });
        }
        streams.push(frames);
    }
    let right = streams.pop().expect("two streams");
    let left = streams.pop().expect("two streams");
    Ok((left, right))
}

/// Image files in `dir` keyed by file stem.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        if !matches!(ext, "png" | "ppm" | "pnm") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// `image_id,dataset[,timestamp]` rows; a header line is skipped.
fn read_manifest_times(path: &Path) -> Result<Vec<(String, Option<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols[0].is_empty() || (i == 0 && cols[0] == "image_id") {
            continue;
        }
        let ts = match cols.get(2) {
            Some(s) if !s.is_empty() => Some(s.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("timestamp '{s}' is not a number"),
            })?),
            _ => None,
        };
        out.push((cols[0].to_string(), ts));
    }
    Ok(out)
}
