//! Multi-scale center-surround luminance contrast.
//!
//! For every downsample factor `s` the luminance plane is box-averaged by
//! `s`, blurred with a three-pass box filter approximating a Gaussian of
//! standard deviation `surround_radius` (in pixels of that level), and the
//! absolute difference between center and surround is taken. Levels are
//! upsampled by pixel replication, averaged, and optionally min-max
//! normalized to [0, 1].

use serde::{Deserialize, Serialize};

use super::raster::FloatMap;
use crate::error::{Error, Result};
use crate::model::ImageFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    pub scales: Vec<usize>,
    pub surround_radius: f32,
    pub normalize: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4],
            surround_radius: 16.0,
            normalize: true,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.first() != Some(&1) {
            return Err(Error::Config("saliency.scales must start at 1".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("saliency.scales must be strictly increasing".into()));
        }
        if !(self.surround_radius > 0.0) {
            return Err(Error::Config("saliency.surround_radius must be > 0".into()));
        }
        Ok(())
    }

    /// Per-pass box radius so that three passes match the surround variance.
    pub fn box_radius(&self) -> usize {
        let sigma = f64::from(self.surround_radius);
        let ideal_width = (12.0 * sigma * sigma / 3.0 + 1.0).sqrt();
        (((ideal_width - 1.0) / 2.0).round() as usize).max(1)
    }
}

/// Rec. 601 luma in [0, 1].
pub fn luminance(frame: &ImageFrame) -> FloatMap {
    let mut out = FloatMap::zeros(frame.width(), frame.height());
    for (l, px) in out.data.iter_mut().zip(frame.pixels().chunks_exact(3)) {
        *l = luma(px[0], px[1], px[2]);
    }
    out
}

#[inline]
pub(crate) fn luma(r: u8, g: u8, b: u8) -> f32 {
    (0.299 * f32::from(r) + 0.587 * f32::from(g) + 0.114 * f32::from(b)) * (1.0 / 255.0)
}

pub fn saliency_map(frame: &ImageFrame, cfg: &SaliencyConfig) -> FloatMap {
    saliency_from_luminance(&luminance(frame), cfg)
}

pub fn saliency_from_luminance(lum: &FloatMap, cfg: &SaliencyConfig) -> FloatMap {
    raw_saliency(lum, cfg).finish()
}

/// Scale-averaged contrast before normalization. Final values are produced
/// on demand so callers that only need a few pixels skip a full pass.
pub(crate) struct RawSaliency {
    map: FloatMap,
    lo: f32,
    /// `Some(1 / range)` when normalizing a non-constant map.
    inv_range: Option<f32>,
    normalize: bool,
}

impl RawSaliency {
    #[inline]
    pub(crate) fn value(&self, i: usize) -> f32 {
        let v = self.map.data[i];
        match (self.normalize, self.inv_range) {
            (true, Some(inv)) => ((v - self.lo) * inv).clamp(0.0, 1.0),
            (true, None) => 0.0,
            (false, _) => v.clamp(0.0, 1.0),
        }
    }

    pub(crate) fn finish(self) -> FloatMap {
        let data = (0..self.map.data.len()).map(|i| self.value(i)).collect();
        FloatMap {
            width: self.map.width,
            height: self.map.height,
            data,
        }
    }
}

pub(crate) fn raw_saliency(lum: &FloatMap, cfg: &SaliencyConfig) -> RawSaliency {
    let (w, h) = lum.dims();
    let mut blur = Blur3::new(cfg.box_radius());
    let mut out = FloatMap::zeros(w, h);
    blur.contrast(lum, &mut out.data);

    let factors: Vec<usize> = cfg.scales.iter().copied().filter(|s| *s > 1).collect();
    let levels: Vec<(usize, FloatMap)> = factors
        .iter()
        .zip(downsample_many(lum, &factors))
        .map(|(s, level)| {
            let mut c = FloatMap::zeros(level.width, level.height);
            blur.contrast(&level, &mut c.data);
            (*s, c)
        })
        .collect();

    let inv_n = 1.0 / cfg.scales.len() as f32;
    let mut lo = [f32::INFINITY; LANES];
    let mut hi = [f32::NEG_INFINITY; LANES];
    let mut expanded: Vec<Vec<f32>> = vec![vec![0.0; w]; levels.len()];
    for y in 0..h {
        for ((s, c), e) in levels.iter().zip(expanded.iter_mut()) {
            if y % s == 0 {
                let src = &c.data[(y / s) * c.width..(y / s + 1) * c.width];
                for (chunk, v) in e.chunks_mut(*s).zip(src) {
                    chunk.fill(*v);
                }
            }
        }
        let row = &mut out.data[y * w..(y + 1) * w];
        for e in &expanded {
            for (o, v) in row.iter_mut().zip(e) {
                *o += v;
            }
        }
        for v in row.iter_mut() {
            *v *= inv_n;
        }
        let mut chunks = row.chunks_exact(LANES);
        for chunk in &mut chunks {
            for k in 0..LANES {
                lo[k] = lo[k].min(chunk[k]);
                hi[k] = hi[k].max(chunk[k]);
            }
        }
        for v in chunks.remainder() {
            lo[0] = lo[0].min(*v);
            hi[0] = hi[0].max(*v);
        }
    }
    let lo = lo.into_iter().fold(f32::INFINITY, f32::min);
    let hi = hi.into_iter().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    RawSaliency {
        map: out,
        lo,
        inv_range: (range > 1e-6).then(|| 1.0 / range),
        normalize: cfg.normalize,
    }
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_in_place(map: &mut FloatMap) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &map.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 1e-6) {
        map.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = 1.0 / range;
    for v in &mut map.data {
        *v = ((*v - lo) * inv).clamp(0.0, 1.0);
    }
}

/// Block average by an integer factor; partial edge blocks average what exists.
pub fn downsample(src: &FloatMap, factor: usize) -> FloatMap {
    downsample_many(src, &[factor]).pop().expect("one factor")
}

fn downsample_many(src: &FloatMap, factors: &[usize]) -> Vec<FloatMap> {
    let (w, h) = src.dims();
    // block sums; a factor divisible by an earlier one is built from its sums
    let mut sums: Vec<(usize, FloatMap)> = Vec::with_capacity(factors.len());
    for &f in factors {
        let base = sums.iter().rev().find(|(g, _)| f % g == 0);
        let (k, from) = match base {
            Some((g, m)) => (f / g, m),
            None => (f, src),
        };
        sums.push((f, block_sum(from, k)));
    }
    sums.into_iter()
        .map(|(f, mut m)| {
            let (nw, nh) = m.dims();
            let cols: Vec<f32> = (0..nw).map(|cx| (((cx + 1) * f).min(w) - cx * f) as f32).collect();
            for ny in 0..nh {
                let rows = (((ny + 1) * f).min(h) - ny * f) as f32;
                for (v, c) in m.data[ny * nw..(ny + 1) * nw].iter_mut().zip(&cols) {
                    *v /= rows * c;
                }
            }
            m
        })
        .collect()
}

/// Sum over `k × k` blocks, partial blocks at the edges included.
fn block_sum(src: &FloatMap, k: usize) -> FloatMap {
    let (w, h) = src.dims();
    let (nw, nh) = (w.div_ceil(k), h.div_ceil(k));
    let mut out = FloatMap::zeros(nw, nh);
    let mut col_sum = vec![0.0f32; w];
    for ny in 0..nh {
        let (y0, y1) = (ny * k, ((ny + 1) * k).min(h));
        col_sum.copy_from_slice(&src.data[y0 * w..(y0 + 1) * w]);
        for y in y0 + 1..y1 {
            for (c, v) in col_sum.iter_mut().zip(&src.data[y * w..(y + 1) * w]) {
                *c += v;
            }
        }
        let dst = &mut out.data[ny * nw..(ny + 1) * nw];
        if k == 2 {
            for (o, pair) in dst.iter_mut().zip(col_sum.chunks_exact(2)) {
                *o = pair[0] + pair[1];
            }
            if w % 2 == 1 {
                dst[nw - 1] = col_sum[w - 1];
            }
        } else {
            for (o, chunk) in dst.iter_mut().zip(col_sum.chunks(k)) {
                *o = chunk.iter().sum();
            }
        }
    }
    out
}

/// Rows blurred together horizontally; their sliding sums run in lockstep so
/// they vectorize.
const LANES: usize = 8;

/// Three vertical then three horizontal box passes of radius `r` with
/// replicated borders. Rows stream through small ring buffers between the
/// vertical passes, so no full-size intermediate is materialized.
struct Blur3 {
    r: usize,
    rings: [Vec<f32>; 2],
    accs: [Vec<f32>; 3],
    lanes: Vec<f32>,
    lanes_tmp: Vec<f32>,
}

impl Blur3 {
    fn new(r: usize) -> Self {
        Self {
            r,
            rings: Default::default(),
            accs: Default::default(),
            lanes: Vec::new(),
            lanes_tmp: Vec::new(),
        }
    }

    /// `dst = |src - blur(src)|`.
    fn contrast(&mut self, src: &FloatMap, dst: &mut [f32]) {
        let (w, h) = src.dims();
        let r = self.r;
        let cap = 2 * r + 2;
        let inv = 1.0 / (2 * r + 1) as f32;
        for ring in &mut self.rings {
            ring.resize(cap * w, 0.0);
        }
        for acc in &mut self.accs {
            acc.resize(w, 0.0);
        }
        self.lanes.resize(w * LANES, 0.0);
        self.lanes_tmp.resize(w * LANES, 0.0);

        let [ring1, ring2] = &mut self.rings;
        let [acc0, acc1, acc2] = &mut self.accs;
        let (mut emitted1, mut emitted2) = (0usize, 0usize);
        for y in 0..h {
            vstep(acc0, y, r, h, |i| &src.data[i * w..(i + 1) * w]);
            scale_into(&mut ring1[(y % cap) * w..(y % cap + 1) * w], acc0, inv);
            let received1 = y + 1;

            while emitted1 < h && received1 > (emitted1 + r).min(h - 1) {
                vstep(acc1, emitted1, r, h, |i| &ring1[(i % cap) * w..(i % cap + 1) * w]);
                let slot = emitted1 % cap;
                scale_into(&mut ring2[slot * w..(slot + 1) * w], acc1, inv);
                emitted1 += 1;

                while emitted2 < h && emitted1 > (emitted2 + r).min(h - 1) {
                    vstep(acc2, emitted2, r, h, |i| &ring2[(i % cap) * w..(i % cap + 1) * w]);
                    let k = emitted2 % LANES;
                    for (x, a) in acc2.iter().enumerate() {
                        self.lanes[x * LANES + k] = a * inv;
                    }
                    emitted2 += 1;
                    if k == LANES - 1 || emitted2 == h {
                        let y0 = emitted2 - (k + 1);
                        box_lanes(&self.lanes, &mut self.lanes_tmp, w, r);
                        box_lanes(&self.lanes_tmp, &mut self.lanes, w, r);
                        box_lanes(&self.lanes, &mut self.lanes_tmp, w, r);
                        for kk in 0..=k {
                            let row = (y0 + kk) * w..(y0 + kk + 1) * w;
                            for (x, (o, l)) in dst[row.clone()].iter_mut().zip(&src.data[row]).enumerate() {
                                *o = (l - self.lanes_tmp[x * LANES + kk]).abs();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Advance a vertical running sum to output row `y`; `row(i)` must return
/// input rows `y - r - 1 ..= y + r` (clamped), or `0 ..= r` when `y == 0`.
#[inline]
fn vstep<'a>(acc: &mut [f32], y: usize, r: usize, h: usize, row: impl Fn(usize) -> &'a [f32]) {
    if y == 0 {
        for (a, v) in acc.iter_mut().zip(row(0)) {
            *a = v * (r + 1) as f32;
        }
        for k in 1..=r {
            for (a, v) in acc.iter_mut().zip(row(k.min(h - 1))) {
                *a += v;
            }
        }
    } else {
        let add = row((y + r).min(h - 1));
        let sub = row((y as isize - r as isize - 1).max(0) as usize);
        for ((a, ad), sb) in acc.iter_mut().zip(add).zip(sub) {
            *a += ad - sb;
        }
    }
}

#[inline]
fn scale_into(dst: &mut [f32], src: &[f32], k: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s * k;
    }
}

/// Sliding-window mean along `LANES` interleaved rows of length `n`.
fn box_lanes(src: &[f32], dst: &mut [f32], n: usize, r: usize) {
    let inv = 1.0 / (2 * r + 1) as f32;
    let last = n - 1;
    let at = |x: usize| -> &[f32; LANES] { src[x * LANES..(x + 1) * LANES].try_into().expect("lane block") };
    let mut acc = at(0).map(|v| (r + 1) as f32 * v);
    for i in 1..=r {
        let v = at(i.min(last));
        for k in 0..LANES {
            acc[k] += v[k];
        }
    }
    for (x, out) in dst[..n * LANES].chunks_exact_mut(LANES).enumerate() {
        let add = at((x + r + 1).min(last));
        let sub = at(x.saturating_sub(r));
        for k in 0..LANES {
            out[k] = acc[k] * inv;
            acc[k] += add[k] - sub[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Camera;

    fn disc_frame(w: usize, h: usize, discs: &[(f64, f64, f64)]) -> ImageFrame {
        let mut buf = vec![20u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if discs
                    .iter()
                    .any(|(cx, cy, r)| (px - cx).powi(2) + (py - cy).powi(2) <= r * r)
                {
                    let i = (y * w + x) * 3;
                    buf[i..i + 3].copy_from_slice(&[230, 230, 230]);
                }
            }
        }
        ImageFrame::new("t", Camera::Left, w, h, 0.0, buf).unwrap()
    }

    /// Direct O(r) box mean with clamped indices, the reference for the sliding passes.
    fn naive_box(src: &[f32], r: usize) -> Vec<f32> {
        let n = src.len() as isize;
        (0..n)
            .map(|x| {
                let s: f64 = (-(r as isize)..=r as isize)
                    .map(|k| src[(x + k).clamp(0, n - 1) as usize] as f64)
                    .sum();
                (s / (2 * r + 1) as f64) as f32
            })
            .collect()
    }

    #[test]
    fn sliding_box_matches_naive_sum() {
        let n = 97;
        let rows: Vec<Vec<f32>> = (0..LANES)
            .map(|k| (0..n).map(|i| ((i * 37 + k * 5) % 11) as f32 / 10.0).collect())
            .collect();
        let mut lanes = vec![0.0; n * LANES];
        for (k, row) in rows.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                lanes[x * LANES + k] = *v;
            }
        }
        for r in [1, 3, 16, 120] {
            let mut dst = vec![0.0; n * LANES];
            box_lanes(&lanes, &mut dst, n, r);
            for (k, row) in rows.iter().enumerate() {
                for (x, b) in naive_box(row, r).into_iter().enumerate() {
                    let a = dst[x * LANES + k];
                    assert!((a - b).abs() < 1e-5, "r={r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sliding_box_drift_stays_small_on_full_rows() {
        let n = 1920;
        let row: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect();
        let mut lanes = vec![0.0; n * LANES];
        for (x, v) in row.iter().enumerate() {
            lanes[x * LANES..(x + 1) * LANES].fill(*v);
        }
        let mut dst = vec![0.0; n * LANES];
        box_lanes(&lanes, &mut dst, n, 16);
        let worst = naive_box(&row, 16)
            .into_iter()
            .enumerate()
            .map(|(x, b)| (dst[x * LANES] - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 5e-5, "drift {worst}");
    }

    #[test]
    fn vertical_step_matches_naive() {
        for (w, h, r) in [(7, 40, 5), (4, 3, 5), (3, 1, 2), (5, 12, 1)] {
            let src: Vec<f32> = (0..w * h).map(|i| ((i * 13) % 17) as f32 / 16.0).collect();
            let mut acc = vec![0.0; w];
            for y in 0..h {
                vstep(&mut acc, y, r, h, |i| &src[i * w..(i + 1) * w]);
                for x in 0..w {
                    let col: Vec<f32> = (0..h).map(|yy| src[yy * w + x]).collect();
                    let e = naive_box(&col, r)[y];
                    let got = acc[x] / (2 * r + 1) as f32;
                    assert!((got - e).abs() < 1e-5, "{w}x{h} r={r}");
                }
            }
        }
    }

    #[test]
    fn streamed_blur_matches_separable_naive() {
        for (w, h) in [(50, 37), (9, 70), (33, 8)] {
            let data: Vec<f32> = (0..w * h).map(|i| ((i * 29 + i / 7) % 23) as f32 / 22.0).collect();
            let src = FloatMap {
                width: w,
                height: h,
                data,
            };
            let r = 4;
            let mut dst = vec![f32::NAN; w * h];
            Blur3::new(r).contrast(&src, &mut dst);
            let mut t = src.data.clone();
            for _ in 0..3 {
                for y in 0..h {
                    let row = naive_box(&t[y * w..(y + 1) * w], r);
                    t[y * w..(y + 1) * w].copy_from_slice(&row);
                }
                for x in 0..w {
                    let col: Vec<f32> = (0..h).map(|y| t[y * w + x]).collect();
                    for (y, v) in naive_box(&col, r).into_iter().enumerate() {
                        t[y * w + x] = v;
                    }
                }
            }
            for i in 0..w * h {
                assert!((dst[i] - (src.data[i] - t[i]).abs()).abs() < 1e-5, "{w}x{h} at {i}");
            }
        }
    }

    #[test]
    fn box_radius_matches_surround() {
        let cfg = SaliencyConfig::default();
        assert_eq!(cfg.box_radius(), 16);
    }

    #[test]
    fn uniform_gray_is_all_zero() {
        let f = ImageFrame::filled("g", Camera::Left, 64, 48, [128, 128, 128]).unwrap();
        let m = saliency_map(&f, &SaliencyConfig::default());
        assert!(m.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bright_disc_holds_the_maximum() {
        let (w, h) = (240, 200);
        let (cx, cy, r) = (120.0, 100.0, 12.0);
        let f = disc_frame(w, h, &[(cx, cy, r)]);
        let m = saliency_map(&f, &SaliencyConfig::default());
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for y in 0..h {
            for x in 0..w {
                if m.get(x, y) > best {
                    best = m.get(x, y);
                    at = (x, y);
                }
            }
        }
        let (px, py) = (at.0 as f64 + 0.5, at.1 as f64 + 0.5);
        assert!((px - cx).powi(2) + (py - cy).powi(2) <= r * r, "max at {at:?}");
        assert!((best - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disc_center_beats_background_by_brute_force() {
        // Brute-force single-scale contrast: |L - mean of (2k+1)^2 window| with
        // the same three-pass kernel built by explicit convolution.
        let (w, h) = (160, 160);
        let f = disc_frame(w, h, &[(80.0, 80.0, 10.0)]);
        let lum = luminance(&f);
        let cfg = SaliencyConfig {
            scales: vec![1],
            surround_radius: 6.0,
            normalize: false,
        };
        let r = cfg.box_radius() as isize;
        let mut kernel = vec![1.0f64];
        for _ in 0..3 {
            let mut next = vec![0.0; kernel.len() + 2 * r as usize];
            for (i, k) in kernel.iter().enumerate() {
                for j in 0..(2 * r + 1) as usize {
                    next[i + j] += k / (2 * r + 1) as f64;
                }
            }
            kernel = next;
        }
        let half = (kernel.len() / 2) as isize;
        let brute = |x: isize, y: isize| {
            let mut s = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (sx, sy) = ((x + dx).clamp(0, w as isize - 1), (y + dy).clamp(0, h as isize - 1));
                    s += kernel[(dx + half) as usize]
                        * kernel[(dy + half) as usize]
                        * lum.get(sx as usize, sy as usize) as f64;
                }
            }
            (lum.get(x as usize, y as usize) as f64 - s).abs()
        };
        let m = saliency_from_luminance(&lum, &cfg);
        for &(x, y) in &[(80isize, 80isize), (75, 80), (20, 20), (140, 30)] {
            assert!((m.get(x as usize, y as usize) as f64 - brute(x, y)).abs() < 1e-4);
        }
        assert!(brute(80, 80) > brute(20, 20));
        assert!(m.get(80, 80) > m.get(20, 20));
    }

    #[test]
    fn identical_discs_have_equal_center_values() {
        // far enough apart that the largest surround does not see the other disc
        let f = disc_frame(1000, 600, &[(300.0, 300.0, 15.0), (700.0, 300.0, 15.0)]);
        let m = saliency_map(&f, &SaliencyConfig::default());
        assert!((m.get(300, 300) - m.get(700, 300)).abs() < 1e-6);
    }

    #[test]
    fn downsample_handles_partial_blocks() {
        let src = FloatMap {
            width: 3,
            height: 1,
            data: vec![1.0, 3.0, 5.0],
        };
        let d = downsample(&src, 2);
        assert_eq!(d.data, vec![2.0, 5.0]);
    }

    #[test]
    fn nested_levels_match_direct_block_means() {
        let (w, h) = (13, 10);
        let data: Vec<f32> = (0..w * h).map(|i| ((i * 7) % 11) as f32).collect();
        let src = FloatMap {
            width: w,
            height: h,
            data,
        };
        let factors = [2, 3, 4, 6, 8];
        for (f, level) in factors.iter().zip(downsample_many(&src, &factors)) {
            for ny in 0..h.div_ceil(*f) {
                for nx in 0..w.div_ceil(*f) {
                    let vals: Vec<f32> = (ny * f..((ny + 1) * f).min(h))
                        .flat_map(|y| (nx * f..((nx + 1) * f).min(w)).map(move |x| (x, y)))
                        .map(|(x, y)| src.get(x, y))
                        .collect();
                    let mean = vals.iter().sum::<f32>() / vals.len() as f32;
                    assert!((level.get(nx, ny) - mean).abs() < 1e-5, "f={f} ({nx},{ny})");
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = SaliencyConfig {
            scales: vec![2, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SaliencyConfig {
            scales: vec![1, 4, 2],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
