//! 8-connected component extraction with size and convexity filters.

use serde::{Deserialize, Serialize};

use super::raster::{nonzero_positions, Mask};
use crate::error::{Error, Result};
use crate::model::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    pub min_area: f64,
    pub max_area: f64,
    pub min_convexity: f64,
    /// Saliency cut applied when merging the color and saliency masks.
    pub merge_threshold: f32,
    /// Reported box = blob box scaled about its center by this factor. The
    /// default matches the stigma-to-flower radius ratio of the orchard
    /// renderer, so boxes land on the stigma like the ground truth does.
    pub stigma_fraction: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            min_area: 30.0,
            max_area: 20_000.0,
            min_convexity: 0.75,
            merge_threshold: 0.2,
            stigma_fraction: 0.4,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_area && self.min_area < self.max_area) {
            return Err(Error::Config(format!(
                "blob area bounds must satisfy 0 < min_area < max_area, got {} / {}",
                self.min_area, self.max_area
            )));
        }
        if !(0.0 < self.min_convexity && self.min_convexity <= 1.0) {
            return Err(Error::Config("blob.min_convexity must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.merge_threshold) {
            return Err(Error::Config("blob.merge_threshold must be in [0, 1]".into()));
        }
        if !(self.stigma_fraction > 0.0 && self.stigma_fraction <= 1.0) {
            return Err(Error::Config("blob.stigma_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    /// Mean of member pixel centers.
    pub centroid: (f64, f64),
    /// Member pixel count.
    pub area: usize,
    /// Area over convex hull area (hull of member pixel squares), in (0, 1].
    pub convexity: f64,
    pub bbox: BBox,
    pub(crate) pixels: Vec<u32>,
}

impl Blob {
    /// Linear indices (`y * width + x`) of the member pixels.
    pub fn pixels(&self) -> &[u32] {
        &self.pixels
    }
}

pub fn blob_detect(mask: &Mask, cfg: &BlobConfig) -> Vec<Blob> {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut stack: Vec<u32> = Vec::new();
    let mut blobs = Vec::new();

    for start in nonzero_positions(&mask.data) {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start as u32);
        let mut members: Vec<u32> = Vec::new();
        while let Some(p) = stack.pop() {
            members.push(p);
            let (x, y) = ((p as usize) % w, (p as usize) / w);
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    let q = ny * w + nx;
                    if mask.data[q] != 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q as u32);
                    }
                }
            }
        }
        let area = members.len() as f64;
        if area < cfg.min_area || area > cfg.max_area {
            continue;
        }
        let blob = describe(members, w);
        if blob.convexity >= cfg.min_convexity {
            blobs.push(blob);
        }
    }

    blobs.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
            .then(a.centroid.0.total_cmp(&b.centroid.0))
    });
    blobs
}

fn describe(mut pixels: Vec<u32>, width: usize) -> Blob {
    pixels.sort_unstable();
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    let (mut min_x, mut max_x) = (usize::MAX, 0usize);
    // pixels are sorted, so rows arrive in order with increasing x
    let mut rows: Vec<(i64, i64, i64)> = Vec::new();
    for &p in &pixels {
        let (x, y) = ((p as usize) % width, (p as usize) / width);
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        match rows.last_mut() {
            Some(r) if r.0 == y as i64 => r.2 = x as i64,
            _ => rows.push((y as i64, x as i64, x as i64)),
        }
    }
    let n = pixels.len() as f64;
    let min_y = rows.first().map_or(0, |r| r.0) as f64;
    let max_y = rows.last().map_or(0, |r| r.0) as f64;

    let mut corners = Vec::with_capacity(rows.len() * 4);
    for &(y, lo, hi) in &rows {
        corners.extend_from_slice(&[(lo, y), (lo, y + 1), (hi + 1, y), (hi + 1, y + 1)]);
    }
    let hull_area = convex_hull_area2(&mut corners) as f64 / 2.0;

    Blob {
        centroid: (sx / n, sy / n),
        area: pixels.len(),
        convexity: (n / hull_area).min(1.0),
        bbox: BBox::new(min_x as f64, min_y, (max_x + 1 - min_x) as f64, max_y + 1.0 - min_y)
            .expect("non-empty blob has a positive box"),
        pixels,
    }
}

/// Twice the area of the convex hull (Andrew's monotone chain).
pub(crate) fn convex_hull_area2(points: &mut [(i64, i64)]) -> i64 {
    points.sort_unstable();
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(points.len() + 1);
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let mut area2 = 0;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        area2 += a.0 * b.1 - b.0 * a.1;
    }
    area2.abs()
}
