//! Stereo association and triangulation on a rectified pair.
//!
//! Box centers drive everything: the left/right centers of one flower share
//! an image row (within `eps_row_px`) and differ horizontally by the
//! disparity `d = u_left - u_right`, from which depth is `focal · baseline / d`.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::model::Detection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoRig {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub eps_row_px: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            focal_px: 1000.0,
            baseline_m: 0.1,
            cx: 960.0,
            cy: 540.0,
            width: 1920,
            height: 1080,
            eps_row_px: 3.0,
            d_min: 5.0,
            d_max: 300.0,
        }
    }
}

impl StereoRig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) {
            return Err(Error::Config("rig.focal_px must be > 0".into()));
        }
        if !(self.baseline_m > 0.0) {
            return Err(Error::Config("rig.baseline_m must be > 0".into()));
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(Error::Config(
                "rig disparity band must satisfy 0 < d_min < d_max".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("rig image size must be positive".into()));
        }
        if !(self.eps_row_px >= 0.0) {
            return Err(Error::Config("rig.eps_row_px must be >= 0".into()));
        }
        Ok(())
    }

    /// Depth change per pixel of disparity error at depth `z`.
    pub fn depth_sensitivity(&self, z: f64) -> f64 {
        z * z / (self.focal_px * self.baseline_m)
    }
}

/// Camera-to-vehicle mounting: `p_vehicle = R · p_camera + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        TransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        RigidTransform::new(repr.rotation, repr.translation).map_err(serde::de::Error::custom)
    }
}

impl RigidTransform {
    /// Rows of the rotation matrix plus translation.
    pub fn new(rotation_rows: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let rotation = Matrix3::from_row_slice(&rotation_rows.concat());
        let should_be_identity = rotation.transpose() * rotation;
        let ortho_err = (should_be_identity - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "extrinsic rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation: Vector3::from(translation),
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation about the vehicle z axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Upward-looking camera with the image top toward the direction of
    /// travel, mounted `forward_m` ahead of the vehicle origin.
    ///
    /// Camera x (image right) maps to vehicle +y (left, seen from below),
    /// camera y (image down) to vehicle -x, camera z (optical axis) to +z.
    pub fn upward_camera(forward_m: f64) -> Self {
        Self {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(forward_m, 0.0, 0.0),
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(p) + self.translation;
        [v.x, v.y, v.z]
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::upward_camera(0.6)
    }
}

/// Rig geometry plus optional mounting, as stored in a rig config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    #[serde(flatten)]
    pub rig: StereoRig,
    #[serde(default)]
    pub extrinsic: Option<RigidTransform>,
}

impl RigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RigFile = config::parse_toml(text, "rig config")?;
        file.rig.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionPair {
    pub left: Detection,
    pub right: Detection,
    pub disparity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetFrame {
    Camera,
    Vehicle,
}

/// A localized stigma. Camera frame: z forward, x right, y down.
/// Vehicle frame: x forward along travel, y left, z up.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowerTarget {
    pub image_id: String,
    pub xyz: [f64; 3],
    pub timestamp: f64,
    pub frame: TargetFrame,
}

impl FlowerTarget {
    pub fn x(&self) -> f64 {
        self.xyz[0]
    }
    pub fn y(&self) -> f64 {
        self.xyz[1]
    }
    pub fn z(&self) -> f64 {
        self.xyz[2]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StereoMatch {
    pub pairs: Vec<DetectionPair>,
    pub unmatched_left: Vec<Detection>,
    pub unmatched_right: Vec<Detection>,
}

fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let key = |d: &Detection| {
        let b = d.bbox;
        [b.x(), b.y(), b.w(), b.h(), d.score]
    };
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        key(&dets[a])
            .iter()
            .zip(key(&dets[b]).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

/// Greedy one-to-one association under the epipolar and disparity constraints.
///
/// Candidates are ranked by row difference, then by distance of their
/// disparity from the median candidate disparity, then by canonical
/// (position-sorted) left and right order, so the result does not depend on
/// input ordering.
pub fn match_stereo(left: &[Detection], right: &[Detection], rig: &StereoRig) -> StereoMatch {
    let lo = canonical_order(left);
    let ro = canonical_order(right);

    struct Cand {
        li: usize,
        ri: usize,
        dv: f64,
        d: f64,
    }
    let mut cands = Vec::new();
    for (li, &l) in lo.iter().enumerate() {
        let (ul, vl) = left[l].center();
        for (ri, &r) in ro.iter().enumerate() {
            let (ur, vr) = right[r].center();
            let dv = (vl - vr).abs();
            let d = ul - ur;
            if dv <= rig.eps_row_px && d >= rig.d_min && d <= rig.d_max {
                cands.push(Cand { li, ri, dv, d });
            }
        }
    }

    let median = if cands.is_empty() {
        0.0
    } else {
        let mut ds: Vec<f64> = cands.iter().map(|c| c.d).collect();
        ds.sort_by(f64::total_cmp);
        let n = ds.len();
        if n % 2 == 1 {
            ds[n / 2]
        } else {
            0.5 * (ds[n / 2 - 1] + ds[n / 2])
        }
    };
    cands.sort_by(|a, b| {
        a.dv.total_cmp(&b.dv)
            .then((a.d - median).abs().total_cmp(&(b.d - median).abs()))
            .then(a.li.cmp(&b.li))
            .then(a.ri.cmp(&b.ri))
    });

    let mut left_used = vec![false; left.len()];
    let mut right_used = vec![false; right.len()];
    let mut chosen: Vec<(usize, usize, f64)> = Vec::new();
    for c in &cands {
        if !left_used[c.li] && !right_used[c.ri] {
            left_used[c.li] = true;
            right_used[c.ri] = true;
            chosen.push((c.li, c.ri, c.d));
        }
    }
    chosen.sort_by_key(|c| c.0);

    StereoMatch {
        pairs: chosen
            .into_iter()
            .map(|(li, ri, d)| DetectionPair {
                left: left[lo[li]].clone(),
                right: right[ro[ri]].clone(),
                disparity: d,
            })
            .collect(),
        unmatched_left: (0..lo.len())
            .filter(|i| !left_used[*i])
            .map(|i| left[lo[i]].clone())
            .collect(),
        unmatched_right: (0..ro.len())
            .filter(|i| !right_used[*i])
            .map(|i| right[ro[i]].clone())
            .collect(),
    }
}

/// Pinhole triangulation from the left center and the pair disparity.
pub fn triangulate(pair: &DetectionPair, rig: &StereoRig, timestamp: f64) -> Result<FlowerTarget> {
    let (u, v) = pair.left.center();
    let xyz = triangulate_point(u, v, pair.disparity, rig)?;
    Ok(FlowerTarget {
        image_id: pair.left.image_id.clone(),
        xyz,
        timestamp,
        frame: TargetFrame::Camera,
    })
}

pub fn triangulate_point(u_left: f64, v_left: f64, disparity: f64, rig: &StereoRig) -> Result<[f64; 3]> {
    if !(disparity > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "disparity must be positive, got {disparity}"
        )));
    }
    let z = rig.focal_px * rig.baseline_m / disparity;
    Ok([
        (u_left - rig.cx) * z / rig.focal_px,
        (v_left - rig.cy) * z / rig.focal_px,
        z,
    ])
}

pub fn to_vehicle_frame(target: &FlowerTarget, extrinsic: &RigidTransform) -> FlowerTarget {
    FlowerTarget {
        xyz: extrinsic.apply(target.xyz),
        frame: TargetFrame::Vehicle,
        ..target.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Camera};

    fn det(cam: Camera, u: f64, v: f64) -> Detection {
        Detection::new("f", cam, BBox::from_center(u, v, 10.0, 10.0).unwrap(), 0.9).unwrap()
    }

    #[test]
    fn single_pair() {
        let m = match_stereo(
            &[det(Camera::Left, 600.0, 400.0)],
            &[det(Camera::Right, 550.0, 400.0)],
            &StereoRig::default(),
        );
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].disparity, 50.0);
    }

    #[test]
    fn row_mismatch_leaves_both_unmatched() {
        let m = match_stereo(
            &[det(Camera::Left, 600.0, 400.0)],
            &[det(Camera::Right, 550.0, 420.0)],
            &StereoRig::default(),
        );
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_left.len(), m.unmatched_right.len()), (1, 1));
    }

    #[test]
    fn two_by_two_matches_the_brute_force_assignment() {
        let rig = StereoRig::default();
        let left = vec![det(Camera::Left, 600.0, 300.0), det(Camera::Left, 640.0, 500.0)];
        let right = vec![det(Camera::Right, 560.0, 501.0), det(Camera::Right, 540.0, 300.5)];
        // brute force: of the two possible assignments, keep the feasible one
        // with the smallest total row error
        let cost = |perm: [usize; 2]| -> Option<f64> {
            let mut total = 0.0;
            for (l, r) in perm.iter().enumerate() {
                let (ul, vl) = left[l].center();
                let (ur, vr) = right[*r].center();
                let d = ul - ur;
                if (vl - vr).abs() > rig.eps_row_px || d < rig.d_min || d > rig.d_max {
                    return None;
                }
                total += (vl - vr).abs();
            }
            Some(total)
        };
        let best = [[0, 1], [1, 0]]
            .into_iter()
            .filter_map(|p| cost(p).map(|c| (p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        for (l_in, r_in) in [
            (left.clone(), right.clone()),
            (
                left.iter().rev().cloned().collect(),
                right.iter().rev().cloned().collect(),
            ),
        ] {
            let m = match_stereo(&l_in, &r_in, &rig);
            assert_eq!(m.pairs.len(), 2);
            for p in &m.pairs {
                let li = left.iter().position(|d| *d == p.left).unwrap();
                assert_eq!(right[best[li]], p.right);
            }
        }
    }

    #[test]
    fn triangulation_closed_form() {
        let rig = StereoRig::default();
        let xyz = triangulate_point(1060.0, 540.0, 50.0, &rig).unwrap();
        assert!((xyz[0] - 0.2).abs() < 1e-12);
        assert!(xyz[1].abs() < 1e-12);
        assert!((xyz[2] - 2.0).abs() < 1e-12);
        let on_axis = triangulate_point(rig.cx, rig.cy, 40.0, &rig).unwrap();
        assert_eq!((on_axis[0], on_axis[1]), (0.0, 0.0));
        assert!(matches!(
            triangulate_point(0.0, 0.0, 0.0, &rig),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn vehicle_frame_transforms() {
        let t = FlowerTarget {
            image_id: "a".into(),
            xyz: [0.3, -0.2, 1.5],
            timestamp: 0.0,
            frame: TargetFrame::Camera,
        };
        assert_eq!(to_vehicle_frame(&t, &RigidTransform::identity()).xyz, t.xyz);
        let shifted = to_vehicle_frame(&t, &RigidTransform::translation([0.0, 0.0, 1.0]));
        assert_eq!(shifted.xyz, [0.3, -0.2, 2.5]);
        assert_eq!(shifted.frame, TargetFrame::Vehicle);

        let quarter = RigidTransform::rotation_z(std::f64::consts::FRAC_PI_2);
        let half = RigidTransform::rotation_z(std::f64::consts::PI);
        let twice = quarter.compose(&quarter);
        let (a, b) = (twice.apply(t.xyz), half.apply(t.xyz));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn upward_camera_is_proper_rotation() {
        let up = RigidTransform::upward_camera(0.0);
        // image top (camera -y) points forward, optical axis up
        assert_eq!(up.apply([0.0, -1.0, 0.0]), [1.0, 0.0, 0.0]);
        assert_eq!(up.apply([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0]);
        assert!(RigidTransform::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).is_ok());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        assert!(RigidTransform::new([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).is_err());
        // reflection
        assert!(RigidTransform::new([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).is_err());
    }

    #[test]
    fn rig_file_parses_extrinsic() {
        let text = "focal_px = 800.0\nbaseline_m = 0.12\n\n[extrinsic]\nrotation = [[1.0,0.0,0.0],[0.0,1.0,0.0],[0.0,0.0,1.0]]\ntranslation = [0.5, 0.0, 0.0]\n";
        let f = RigFile::from_toml_str(text).unwrap();
        assert_eq!(f.rig.focal_px, 800.0);
        assert_eq!(f.rig.width, 1920);
        assert_eq!(f.extrinsic.unwrap().apply([0.0; 3]), [0.5, 0.0, 0.0]);
        assert!(RigFile::from_toml_str("d_min = 10.0\nd_max = 5.0\n").is_err());
    }
}
