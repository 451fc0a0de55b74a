//! JSON Lines interchange for detections and ground truth.
//!
//! One record per line, fields in fixed order:
//! `{"image_id":…,"camera":"left"|"right","bbox":[x,y,w,h],"score":…,"label":"flower"}`.
//! Ground-truth records omit `score`, which reads back as `1.0`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, Camera, Detection, FLOWER_LABEL};
use crate::scheduler::{Miss, SprayCommand, SprayPlan};
use crate::stereo::{FlowerTarget, TargetFrame};

#[derive(Serialize, Deserialize)]
struct Record {
    image_id: String,
    camera: Camera,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default = "default_label")]
    label: String,
}

fn default_label() -> String {
    FLOWER_LABEL.to_string()
}

/// Detections grouped by image id; insertion order is preserved within an image.
pub type DetectionsByImage = BTreeMap<String, Vec<Detection>>;

pub fn to_line(det: &Detection, with_score: bool) -> String {
    let rec = Record {
        image_id: det.image_id.clone(),
        camera: det.camera,
        bbox: det.bbox,
        score: with_score.then_some(det.score),
        label: det.label.clone(),
    };
    serde_json::to_string(&rec).expect("detection record serializes")
}

pub fn parse_line(line: &str, line_no: usize) -> Result<Detection> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let score = rec.score.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Validation(format!(
            "line {line_no}: score {score} outside [0, 1]"
        )));
    }
    Ok(Detection {
        image_id: rec.image_id,
        camera: rec.camera,
        bbox: rec.bbox,
        score,
        label: rec.label,
    })
}

pub fn read_str(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn group_by_image(dets: impl IntoIterator<Item = Detection>) -> DetectionsByImage {
    let mut map = DetectionsByImage::new();
    for d in dets {
        map.entry(d.image_id.clone()).or_default().push(d);
    }
    map
}

/// Parse an interchange file and group it by image id.
pub fn replay(path: &Path) -> Result<DetectionsByImage> {
    Ok(group_by_image(read_detections(path)?))
}

pub fn write_str(dets: &[Detection], with_score: bool) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&to_line(d, with_score));
        s.push('\n');
    }
    s
}

pub fn write_detections(path: &Path, dets: &[Detection], with_score: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dets {
        writeln!(w, "{}", to_line(d, with_score)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `{"image_id":…,"xyz":[x,y,z],"timestamp":…}`.
#[derive(Serialize, Deserialize)]
struct PointRecord {
    image_id: String,
    xyz: [f64; 3],
    timestamp: f64,
}

pub fn point_line(t: &FlowerTarget) -> String {
    let rec = PointRecord {
        image_id: t.image_id.clone(),
        xyz: t.xyz,
        timestamp: t.timestamp,
    };
    serde_json::to_string(&rec).expect("point record serializes")
}

/// Points carry no frame tag, so the caller states which frame they are in.
pub fn read_points_str(text: &str, frame: TargetFrame) -> Result<Vec<FlowerTarget>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: PointRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(FlowerTarget {
                image_id: rec.image_id,
                xyz: rec.xyz,
                timestamp: rec.timestamp,
                frame,
            })
        })
        .collect()
}

pub fn read_points(path: &Path, frame: TargetFrame) -> Result<Vec<FlowerTarget>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_points_str(&text, frame)
}

#[derive(Serialize)]
struct CommandRecord<'a> {
    nozzle: &'a str,
    fire_time: f64,
    duration: f64,
    target_xyz: [f64; 3],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    also_covers: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct MissRecord<'a> {
    miss: String,
    image_id: &'a str,
    target_xyz: [f64; 3],
}

/// A merged command lists its first target in `target_xyz` and the rest in
/// `also_covers`.
pub fn command_line(c: &SprayCommand) -> String {
    let rec = CommandRecord {
        nozzle: &c.nozzle_id,
        fire_time: c.fire_time,
        duration: c.duration,
        target_xyz: c.targets.first().map_or([f64::NAN; 3], |t| t.xyz),
        also_covers: c.targets.iter().skip(1).map(|t| t.xyz).collect(),
    };
    serde_json::to_string(&rec).expect("command record serializes")
}

pub fn miss_line(m: &Miss) -> String {
    let rec = MissRecord {
        miss: m.reason.to_string(),
        image_id: &m.target.image_id,
        target_xyz: m.target.xyz,
    };
    serde_json::to_string(&rec).expect("miss record serializes")
}

/// Commands in fire-time order, then misses.
pub fn spray_lines(plan: &SprayPlan) -> impl Iterator<Item = String> + '_ {
    plan.commands
        .iter()
        .map(command_line)
        .chain(plan.misses.iter().map(miss_line))
}

/// Write `lines` one per line, creating or truncating `path`.
pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
