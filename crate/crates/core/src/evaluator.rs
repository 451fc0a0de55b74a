//! IoU-threshold matching and precision / recall / F1 reporting.
//!
//! Matching discipline: predictions are visited in descending score (input
//! order breaks ties) and each claims the still-unmatched ground-truth box
//! with the highest IoU, provided that IoU reaches the threshold. Counts are
//! micro-averaged over images.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange;
use crate::model::{iou, Camera, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    None,
    Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Predictions scoring below this are discarded before matching.
    pub score_min: f64,
    pub group_key: GroupKey,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_min: 0.5,
            group_key: GroupKey::Dataset,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.score_min) {
            return Err(Error::Config("score_min outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageMatch {
    /// (prediction index, ground-truth index, IoU)
    pub tp_pairs: Vec<(usize, usize, f64)>,
    pub fp_preds: Vec<usize>,
    pub fn_gts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> Metrics {
        compute_metrics(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn compute_metrics(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics { precision, recall, f1 }
}

/// Greedy matching of one image's predictions against its ground truth.
pub fn match_image(preds: &[Detection], gts: &[Detection], iou_threshold: f64) -> Result<ImageMatch> {
    if let Some(first) = preds.first().or(gts.first()) {
        let key = (&first.image_id, first.camera);
        if let Some(bad) = preds.iter().chain(gts).find(|d| (&d.image_id, d.camera) != key) {
            return Err(Error::Validation(format!(
                "match_image got mixed images: '{}'/{} and '{}'/{}",
                key.0, key.1, bad.image_id, bad.camera
            )));
        }
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));

    let mut gt_taken = vec![false; gts.len()];
    let mut out = ImageMatch::default();
    for p in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !gt_taken[*g])
            .map(|(g, gt)| (g, iou(&preds[p].bbox, &gt.bbox)))
            .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= iou_threshold => {
                gt_taken[g] = true;
                out.tp_pairs.push((p, g, v));
            }
            _ => out.fp_preds.push(p),
        }
    }
    out.fn_gts = (0..gts.len()).filter(|g| !gt_taken[*g]).collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub counts: Counts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub iou_threshold: f64,
    pub score_min: f64,
    /// Groups in manifest order; empty when grouping is off.
    pub groups: Vec<GroupRow>,
    pub overall: GroupRow,
}

impl EvalReport {
    pub fn group(&self, name: &str) -> Option<&GroupRow> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Fixed-width text table, one row per group plus `overall`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# matching: greedy by descending score, each prediction takes the unmatched ground truth with highest IoU; IoU >= {:.3}; score >= {:.3}; micro-averaged",
            self.iou_threshold, self.score_min
        );
        let _ = writeln!(s, "# model: {}", self.model);
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9}", "dataset", "precision", "recall", "f1");
        for row in self.groups.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{:<16} {:>9.3} {:>9.3} {:>9.3}",
                row.group, row.metrics.precision, row.metrics.recall, row.metrics.f1
            );
        }
        s
    }
}

/// Image id to dataset group, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut m = Manifest::default();
        for (image, group) in entries {
            if m.index.contains_key(&image) {
                return Err(Error::Validation(format!("image '{image}' listed twice in manifest")));
            }
            m.index.insert(image.clone(), m.entries.len());
            m.entries.push((image, group));
        }
        Ok(m)
    }

    /// CSV with `image_id,dataset` leading columns; a header row is optional
    /// and extra columns are ignored.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(image), Some(group)) = (cols.next(), cols.next()) else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected image_id,dataset".into(),
                });
            };
            if i == 0 && image == "image_id" {
                continue;
            }
            rows.push((image.to_string(), group.to_string()));
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn group_of(&self, image_id: &str) -> Option<&str> {
        self.index.get(image_id).map(|i| self.entries[*i].1.as_str())
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|(_, g)| seen.insert(g.clone()))
            .map(|(_, g)| g.clone())
            .collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(i, _)| i.as_str())
    }
}

type ImageKey = (String, Camera);

fn by_image(dets: Vec<Detection>) -> BTreeMap<ImageKey, Vec<Detection>> {
    let mut map: BTreeMap<ImageKey, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        map.entry((d.image_id.clone(), d.camera)).or_default().push(d);
    }
    map
}

/// Evaluate in-memory predictions against ground truth.
pub fn evaluate_detections(
    model: &str,
    preds: Vec<Detection>,
    gts: Vec<Detection>,
    manifest: &Manifest,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let gt_images: BTreeSet<&str> = gts.iter().map(|d| d.image_id.as_str()).collect();
    for p in &preds {
        if !gt_images.contains(p.image_id.as_str()) && !manifest.contains(&p.image_id) {
            return Err(Error::Validation(format!(
                "prediction for unknown image '{}'",
                p.image_id
            )));
        }
    }
    if cfg.group_key == GroupKey::Dataset {
        if let Some(d) = preds.iter().chain(&gts).find(|d| !manifest.contains(&d.image_id)) {
            return Err(Error::Validation(format!(
                "image '{}' is missing from the manifest",
                d.image_id
            )));
        }
    }

    let preds: Vec<Detection> = preds.into_iter().filter(|d| d.score >= cfg.score_min).collect();
    let mut pred_map = by_image(preds);
    let gt_map = by_image(gts);
    let keys: BTreeSet<ImageKey> = pred_map.keys().chain(gt_map.keys()).cloned().collect();

    let mut per_group: HashMap<String, Counts> = HashMap::new();
    let mut overall = Counts::default();
    for key in keys {
        let p = pred_map.remove(&key).unwrap_or_default();
        let g = gt_map.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_image(&p, g, cfg.iou_threshold)?;
        let c = Counts::new(m.tp_pairs.len(), m.fp_preds.len(), m.fn_gts.len());
        overall.add(c);
        if cfg.group_key == GroupKey::Dataset {
            let group = manifest.group_of(&key.0).expect("checked above");
            per_group.entry(group.to_string()).or_default().add(c);
        }
    }

    let row = |group: String, counts: Counts| GroupRow {
        group,
        metrics: counts.metrics(),
        counts,
    };
    let groups = match cfg.group_key {
        GroupKey::None => Vec::new(),
        GroupKey::Dataset => manifest
            .groups()
            .into_iter()
            .map(|g| {
                let c = per_group.get(&g).copied().unwrap_or_default();
                row(g, c)
            })
            .collect(),
    };
    Ok(EvalReport {
        model: model.to_string(),
        iou_threshold: cfg.iou_threshold,
        score_min: cfg.score_min,
        groups,
        overall: row("overall".into(), overall),
    })
}

pub fn evaluate(preds_path: &Path, gt_path: &Path, manifest: &Manifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = interchange::read_detections(preds_path)?;
    let gts = interchange::read_detections(gt_path)?;
    let model = preds_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    evaluate_detections(&model, preds, gts, manifest, cfg)
}

/// `group,tp,fp,fn` rows for plotting.
pub fn confusion_summary(report: &EvalReport) -> String {
    let mut s = String::from("group,tp,fp,fn\n");
    let rows: Vec<&GroupRow> = if !report.groups.is_empty() {
        report.groups.iter().collect()
    } else if report.overall.counts != Counts::default() {
        vec![&report.overall]
    } else {
        Vec::new()
    };
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.group, r.counts.tp, r.counts.fp, r.counts.fn_);
    }
    s
}
